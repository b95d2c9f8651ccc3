//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once recorded; [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar output with respect to every node that
//! depends on a leaf created with `requires_grad = true`.

use crate::error::{Result, TensorError};
use crate::kernels::{self, BatchNormSaved, DiceSums, PoolIndices};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and hyper-parameters of one batch-norm layer. The
/// affine scale and shift are trainable tensors and live on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(BN_MOMENTUM),
            eps: T::from_f64_lossy(BN_EPS),
        }
    }
}

/// Settings of the generalized Dice loss term.
#[derive(Debug, Clone)]
pub struct GdlOptions<T> {
    /// Per-class weights, usually `1 / f_l^2`.
    pub weights: Vec<T>,
    /// Added to the denominator only.
    pub eps: T,
    /// Reject targets that are not one-hot per pixel.
    pub strict: bool,
}

pub const GDL_EPS: f64 = 1e-8;

impl<T: Scalar> GdlOptions<T> {
    pub fn new(weights: Vec<T>) -> Self {
        Self {
            weights,
            eps: T::from_f64_lossy(GDL_EPS),
            strict: true,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        pad: usize,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
        batch_stats: bool,
    },
    MaxPool {
        input: Var,
        indices: PoolIndices,
    },
    MaxUnpool {
        input: Var,
        indices: PoolIndices,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Softmax {
        input: Var,
    },
    Gdl {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
        sums: DiceSums<T>,
    },
    Scale {
        input: Var,
        factor: T,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
    #[cfg(feature = "negative-control")]
    BrokenScale {
        input: Var,
        factor: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward pass for later differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    kinks: Option<Vec<u64>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// Tape that also logs every discrete branch taken (ReLU signs, pooling
    /// argmaxes). Two passes with equal logs evaluate the same smooth piece
    /// of the function, which is what finite differences need.
    pub fn with_kink_log() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(Vec::new()),
        }
    }

    pub fn kink_log(&self) -> Option<&[u64]> {
        self.kinks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), pad)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                pad,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if let Some(log) = self.kinks.as_mut() {
            for chunk in x.data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i));
                log.push(bits);
            }
        }
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu { input }, &[input])
    }

    /// Batch normalization over `N, H, W` per channel. In train mode the
    /// running statistics in `state` are updated in place.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let c = self.shape(input).c;
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm state",
                lhs: self.shape(input),
                rhs: Shape::vector(state.running_mean.len()),
            });
        }
        let stats = match mode {
            Mode::Train => None,
            Mode::Eval => Some((state.running_mean.as_slice(), state.running_var.as_slice())),
        };
        let (out, saved) = kernels::batch_norm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            state.eps,
        )?;
        if mode == Mode::Train {
            let m = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * saved.batch_mean[ch];
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * saved.batch_var_unbiased[ch];
            }
        }
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                batch_stats: mode == Mode::Train,
            },
            &[input, gamma, beta],
        )
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<(Var, PoolIndices)> {
        let (out, indices) = kernels::max_pool_2x2_forward(self.value(input))?;
        if let Some(log) = self.kinks.as_mut() {
            log.extend(indices.offsets().iter().map(|&o| u64::from(o)));
        }
        let var = self.push(
            "max_pool_2x2",
            out,
            Op::MaxPool {
                input,
                indices: indices.clone(),
            },
            &[input],
        )?;
        Ok((var, indices))
    }

    pub fn max_unpool_2x2(&mut self, input: Var, indices: &PoolIndices, output_shape: Shape) -> Result<Var> {
        let out = kernels::max_unpool_2x2_forward(self.value(input), indices, output_shape)?;
        self.push(
            "max_unpool_2x2",
            out,
            Op::MaxUnpool {
                input,
                indices: indices.clone(),
            },
            &[input],
        )
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels_forward(&values)?;
        self.push(
            "concat_channels",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        )
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = kernels::softmax_channels_forward(self.value(input));
        self.push("softmax_channels", out, Op::Softmax { input }, &[input])
    }

    /// Generalized Dice loss of `pred` against a one-hot `target`.
    pub fn gdl_loss(&mut self, pred: Var, target: &Tensor<T>, options: &GdlOptions<T>) -> Result<Var> {
        if options.strict {
            check_one_hot(target)?;
        }
        let (loss, sums) = kernels::gdl_forward(self.value(pred), target, &options.weights, options.eps)?;
        self.push(
            "gdl_loss",
            Tensor::scalar(loss),
            Op::Gdl {
                pred,
                target: target.clone(),
                weights: options.weights.clone(),
                sums,
            },
            &[pred],
        )
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push("scale", out, Op::Scale { input, factor }, &[input])
    }

    /// `sum(input * weights)`: reduces any tensor to a scalar with fixed
    /// projection weights.
    pub fn weighted_sum(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: x.shape(),
                rhs: weights.shape(),
            });
        }
        let total = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum {
                input,
                weights: weights.clone(),
            },
            &[input],
        )
    }

    /// Scaling with a wrong backward rule (gradient off by 10%).
    #[cfg(feature = "negative-control")]
    pub fn broken_scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        self.push("broken_scale", out, Op::BrokenScale { input, factor }, &[input])
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if out_shape.numel() != 1 {
            return Err(TensorError::NotScalar { shape: out_shape });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out_shape, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            g.ensure_finite("backward")?;
            let wants = |v: Var| self.nodes[v.0].requires_grad;
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    pad,
                } => {
                    let r = kernels::conv2d_backward(
                        &g,
                        self.value(*input),
                        self.value(*kernel),
                        *pad,
                        [wants(*input), wants(*kernel), wants(*bias)],
                    );
                    if let Some(dx) = r.input {
                        contributions.push((*input, dx));
                    }
                    if let Some(dk) = r.kernel {
                        contributions.push((*kernel, dk));
                    }
                    if let Some(db) = r.bias {
                        let shape = self.shape(*bias);
                        contributions.push((*bias, db.reshape(shape)?));
                    }
                }
                Op::Relu { input } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    contributions.push((*input, dx));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                    batch_stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        kernels::batch_norm_backward(&g, saved, self.value(*gamma).data(), *batch_stats);
                    contributions.push((*input, dx));
                    contributions.push((*gamma, Tensor::from_vec(self.shape(*gamma), dgamma)?));
                    contributions.push((*beta, Tensor::from_vec(self.shape(*beta), dbeta)?));
                }
                Op::MaxPool { input, indices } => {
                    contributions.push((*input, kernels::max_pool_2x2_backward(&g, indices)));
                }
                Op::MaxUnpool { input, indices } => {
                    contributions.push((*input, kernels::max_unpool_2x2_backward(&g, indices)));
                }
                Op::Concat { inputs } => {
                    let parts: Vec<Shape> = inputs.iter().map(|&v| self.shape(v)).collect();
                    for (v, dx) in inputs.iter().zip(kernels::concat_channels_backward(&g, &parts)) {
                        contributions.push((*v, dx));
                    }
                }
                Op::Softmax { input } => {
                    contributions.push((*input, kernels::softmax_channels_backward(&g, &node.value)));
                }
                Op::Gdl {
                    pred,
                    target,
                    weights,
                    sums,
                } => {
                    let dl = g.data()[0];
                    contributions.push((*pred, kernels::gdl_backward(dl, target, weights, *sums)));
                }
                Op::Scale { input, factor } => {
                    contributions.push((*input, g.map(|v| v * *factor)));
                }
                Op::WeightedSum { input, weights } => {
                    let dl = g.data()[0];
                    contributions.push((*input, weights.map(|w| w * dl)));
                }
                #[cfg(feature = "negative-control")]
                Op::BrokenScale { input, factor } => {
                    let wrong = *factor * T::from_f64_lossy(1.1);
                    contributions.push((*input, g.map(|v| v * wrong)));
                }
            }
            for (var, dx) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => grads[var.0] = Some(dx),
                }
            }
            // Leaves keep their gradient; interior gradients are dropped.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Verifies that every pixel of `target` holds exactly one `1` and zeros.
pub fn check_one_hot<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    let s = target.shape();
    let p = s.plane();
    for n in 0..s.n {
        let sample = target.sample(n);
        for i in 0..p {
            let mut ones = 0;
            for c in 0..s.c {
                let v = sample[c * p + i];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(TensorError::invalid("gdl_loss", "target is not one-hot"));
                }
            }
            if ones != 1 {
                return Err(TensorError::invalid("gdl_loss", "target is not one-hot"));
            }
        }
    }
    Ok(())
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_constant_counting() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let k = tape.param(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = tape.param(Tensor::zeros(Shape::vector(1)));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_scalar_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.param(t(Shape::new(1, 1, 1, 1), &[2.0]));
        let b = tape.param(t(Shape::vector(1), &[1.0]));
        let y = tape.conv2d(x, k, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let k = tape.param(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let b = tape.param(Tensor::zeros(Shape::vector(1)));
        let err = tape.conv2d(x, k, b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 2, 4, 4)") && msg.contains("(1, 3, 3, 3)"), "{msg}");
    }

    #[test]
    fn relu_values_and_dead_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(Shape::new(1, 1, 1, 3), &[-1.0, -2.0, -0.5]));
        let y = tape.relu(x).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 1, 3), 1.0);
        let s = tape.weighted_sum(y, &w).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pool_picks_max_and_first_on_ties() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
        let (y, idx) = tape.max_pool_2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(idx.offsets(), &[3]);

        let x = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2), 5.0));
        let (y, idx) = tape.max_pool_2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        assert_eq!(idx.offsets(), &[0]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 4)));
        assert!(tape.max_pool_2x2(x).is_err());
    }

    #[test]
    fn unpool_places_values() {
        let mut tape = Tape::<f64>::new();
        let idx = PoolIndices::from_offsets(Shape::new(1, 1, 1, 1), vec![3]).unwrap();
        let x = tape.constant(t(Shape::new(1, 1, 1, 1), &[4.0]));
        let y = tape.max_unpool_2x2(x, &idx, Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 4.0]);

        let z = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.max_unpool_2x2(z, &idx, Shape::new(1, 1, 2, 2)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_rejects_index_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let idx = PoolIndices::from_offsets(Shape::new(1, 1, 1, 1), vec![0]).unwrap();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(
            tape.max_unpool_2x2(x, &idx, Shape::new(1, 2, 2, 2)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn concat_widths() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(Shape::new(2, 64, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(2, 64, 4, 4)));
        let c = tape.constant(Tensor::zeros(Shape::new(2, 64, 4, 4)));
        let ab = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(ab), Shape::new(2, 128, 4, 4));
        let abc = tape.concat_channels(&[a, b, c]).unwrap();
        assert_eq!(tape.shape(abc), Shape::new(2, 192, 4, 4));
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));

        let odd = tape.constant(Tensor::zeros(Shape::new(2, 64, 2, 4)));
        let err = tape.concat_channels(&[a, odd]).unwrap_err();
        assert!(err.to_string().contains("(2, 64, 2, 4)"));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let y = tape.softmax_channels(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);

        let x = tape.constant(t(Shape::new(1, 2, 1, 1), &[1000.0, 0.0]));
        let y = tape.softmax_channels(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (0.0..1e-12).contains(&v[1]));
    }

    #[test]
    fn batch_norm_normalizes_and_applies_affine() {
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let shape = Shape::new(2, 2, 2, 4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(shape, data).unwrap());
        let g = tape.param(Tensor::full(Shape::vector(2), 1.0));
        let b = tape.param(Tensor::zeros(Shape::vector(2)));
        let mut state = BatchNormState::new(2);
        let y = tape.batch_norm(x, g, b, &mut state, Mode::Train).unwrap();
        let (mean, var) = channel_moments(tape.value(y), 0);
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "{mean} {var}");

        let g2 = tape.param(Tensor::full(Shape::vector(2), 2.0));
        let b2 = tape.param(Tensor::full(Shape::vector(2), 3.0));
        let mut state2 = BatchNormState::new(2);
        let z = tape.batch_norm(y, g2, b2, &mut state2, Mode::Train).unwrap();
        let (mean, var) = channel_moments(tape.value(z), 1);
        assert!((mean - 3.0).abs() < 1e-5 && (var.sqrt() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 2), &[10.0, 20.0]));
        let g = tape.param(Tensor::full(Shape::vector(1), 1.0));
        let b = tape.param(Tensor::zeros(Shape::vector(1)));
        let mut state = BatchNormState::<f64>::new(1);
        state.running_mean = vec![10.0];
        state.running_var = vec![4.0 - 1e-5];
        let y = tape.batch_norm(x, g, b, &mut state, Mode::Eval).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.0).abs() < 1e-12 && (v[1] - 5.0).abs() < 1e-9);
        assert_eq!(state.running_mean, vec![10.0]);
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let g = tape.param(Tensor::full(Shape::vector(1), 1.0));
        let b = tape.param(Tensor::zeros(Shape::vector(1)));
        let mut state = BatchNormState::new(1);
        assert!(tape.batch_norm(x, g, b, &mut state, Mode::Train).is_err());
    }

    fn channel_moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| t.plane(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 1), &[f64::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(TensorError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn gdl_rejects_soft_targets_in_strict_mode() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::full(Shape::new(1, 2, 1, 1), 0.5));
        let target = Tensor::full(Shape::new(1, 2, 1, 1), 0.5);
        let mut opts = GdlOptions::new(vec![1.0, 1.0]);
        assert!(tape.gdl_loss(p, &target, &opts).is_err());
        opts.strict = false;
        assert!(tape.gdl_loss(p, &target, &opts).is_ok());
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(Shape::new(1, 1, 1, 1), &[2.0]));
        let a = tape.scale(x, 3.0).unwrap();
        let cat = tape.concat_channels(&[a, x]).unwrap();
        let w = t(Shape::new(1, 2, 1, 1), &[1.0, 1.0]);
        let s = tape.weighted_sum(cat, &w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0]);
    }
}
