//! InfiNet graph assembly.
//!
//! Dual-arm layout (depth 3, 64 channels):
//!
//! ```text
//! arm k, level l:  conv3x3 -> ReLU -> BN -> maxpool (indices saved)
//! bottleneck:      unpool(arm1 pooled3, idx1_3) ++ unpool(arm2 pooled3, idx2_3)
//!                  -> BN -> conv1x1 -> ReLU -> BN
//!                  ++ skip(arm1 level3) ++ skip(arm2 level3)
//!                  -> conv3x3 -> ReLU -> BN
//! dec2, dec1:      same block, unpooling the previous block output twice with
//!                  each arm's indices of that level
//! classifier:      conv1x1 -> softmax over channels
//! ```
//!
//! The single-arm baseline stacks both modalities as a 2-channel input to one
//! encoder arm, and every fusion block then unpools and skips from that arm
//! only.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, Gradients, Mode, Tape, Var};
use crate::error::{Result, TensorError};
use crate::kernels::PoolIndices;
use crate::tensor::{Scalar, Shape, Tensor};

/// Trainable parameter count reported for the original full-scale model.
pub const REFERENCE_TRAINABLE_PARAMS: usize = 740_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfiNetConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub modalities: usize,
    /// Concatenate the deepest encoder features into the bottleneck, as the
    /// decoder blocks do with theirs.
    #[serde(default = "default_true")]
    pub bottleneck_skips: bool,
}

fn default_true() -> bool {
    true
}

impl Default for InfiNetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            base_channels: 64,
            depth: 3,
            input_height: 64,
            input_width: 64,
            modalities: 2,
            bottleneck_skips: true,
        }
    }
}

impl InfiNetConfig {
    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn with_base_channels(mut self, channels: usize) -> Self {
        self.base_channels = channels;
        self
    }

    /// Whether the fusion block at `level` concatenates encoder skips.
    pub fn has_skips(&self, level: usize) -> bool {
        level < self.depth || self.bottleneck_skips
    }

    /// Spatial dims must survive `depth` halvings.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Err(TensorError::invalid("InfiNetConfig", reason));
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            return invalid("base_channels must be positive".into());
        }
        if self.depth == 0 {
            return invalid("depth must be positive".into());
        }
        if self.modalities != 2 {
            return invalid(format!("exactly 2 modalities are supported, got {}", self.modalities));
        }
        self.check_spatial(self.input_height, self.input_width)
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(TensorError::invalid(
                "InfiNetConfig",
                format!("input {h}x{w} is not divisible by 2^{} = {m}", self.depth),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// One encoder arm per modality.
    DualArm,
    /// Both modalities stacked as channels of a single encoder arm.
    SingleArm,
}

impl Arch {
    pub fn arms(self) -> usize {
        match self {
            Arch::DualArm => 2,
            Arch::SingleArm => 1,
        }
    }

    fn arm_input_channels(self) -> usize {
        match self {
            Arch::DualArm => 1,
            Arch::SingleArm => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of every tensor of a model. Trainable entries are conv
/// kernels and biases and batch-norm scale and shift; running statistics are
/// stored alongside as non-trainable entries. Iteration follows construction
/// order, which is fixed by the architecture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::invalid("ModelParameters", format!("missing tensor `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `(trainable, total)` scalar counts.
pub fn count_parameters<T: Scalar>(params: &ModelParameters<T>) -> (usize, usize) {
    params.iter().fold((0, 0), |(tr, tot), (_, e)| {
        let n = e.tensor.numel();
        (tr + if e.trainable { n } else { 0 }, tot + n)
    })
}

/// Trainable count with convolution biases left out.
pub fn count_parameters_without_bias<T: Scalar>(params: &ModelParameters<T>) -> usize {
    params
        .trainable()
        .filter(|(name, _)| !name.ends_with(".bias"))
        .map(|(_, t)| t.numel())
        .sum()
}

/// Per-level output of one encoder arm.
#[derive(Debug, Clone)]
pub struct EncoderLevel {
    /// Pre-pool feature map, used as the skip connection.
    pub features: Var,
    pub pooled: Var,
    pub indices: PoolIndices,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub arm: usize,
    /// `levels[0]` is level 1 (full resolution).
    pub levels: Vec<EncoderLevel>,
}

/// Which encoder indices an unpooling layer consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnpoolRecord {
    pub block: String,
    pub block_level: usize,
    pub arm: usize,
    pub indices_level: usize,
}

pub struct ForwardPass {
    pub probabilities: Var,
    pub logits: Var,
    /// Tape variable of every trainable tensor, in canonical order.
    pub bindings: IndexMap<String, Var>,
    pub encoders: Vec<EncoderTrace>,
    pub unpool_audit: Vec<UnpoolRecord>,
}

impl ForwardPass {
    /// Collects the gradient of every trainable tensor by name.
    pub fn collect_gradients<T: Scalar>(&self, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.bindings
            .iter()
            .filter_map(|(name, &var)| grads.take(var).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// An InfiNet (or single-arm baseline) with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InfiNet<T: Scalar = f32> {
    config: InfiNetConfig,
    arch: Arch,
    params: ModelParameters<T>,
}

/// Builds the dual-arm InfiNet with freshly initialized parameters.
pub fn build_infinet<T: Scalar>(config: InfiNetConfig, seed: u64) -> Result<InfiNet<T>> {
    InfiNet::new(config, Arch::DualArm, seed)
}

/// Builds the single-encoder baseline taking both modalities as channels.
pub fn build_single_arm<T: Scalar>(config: InfiNetConfig, seed: u64) -> Result<InfiNet<T>> {
    InfiNet::new(config, Arch::SingleArm, seed)
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn conv<T: Scalar>(&mut self, params: &mut ModelParameters<T>, name: &str, k: usize, c: usize, size: usize) {
        let shape = Shape::new(k, c, size, size);
        let std = (2.0 / (c * size * size) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        params.insert(format!("{name}.weight"), Tensor::from_vec(shape, data).unwrap(), true);
        params.insert(format!("{name}.bias"), Tensor::zeros(Shape::vector(k)), true);
    }

    fn bn<T: Scalar>(&mut self, params: &mut ModelParameters<T>, name: &str, c: usize) {
        let v = Shape::vector(c);
        params.insert(format!("{name}.gamma"), Tensor::full(v, T::one()), true);
        params.insert(format!("{name}.beta"), Tensor::zeros(v), true);
        params.insert(format!("{name}.running_mean"), Tensor::zeros(v), false);
        params.insert(format!("{name}.running_var"), Tensor::full(v, T::one()), false);
    }
}

fn arm_name(arm: usize) -> String {
    format!("arm{arm}")
}

fn block_name(config: &InfiNetConfig, level: usize) -> String {
    if level == config.depth {
        "bottleneck".to_string()
    } else {
        format!("dec{level}")
    }
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: &'a ModelParameters<T>,
    mode: Mode,
    bindings: IndexMap<String, Var>,
    bn_updates: Vec<(String, BatchNormState<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn bind(&mut self, name: String) -> Result<Var> {
        if let Some(&v) = self.bindings.get(&name) {
            return Ok(v);
        }
        let value = self.params.tensor(&name)?.clone();
        let var = self.tape.param(value);
        self.bindings.insert(name, var);
        Ok(var)
    }

    fn conv(&mut self, x: Var, name: &str, pad: usize) -> Result<Var> {
        let w = self.bind(format!("{name}.weight"))?;
        let b = self.bind(format!("{name}.bias"))?;
        self.tape.conv2d(x, w, b, pad)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.bind(format!("{name}.gamma"))?;
        let beta = self.bind(format!("{name}.beta"))?;
        let mut state = BatchNormState::new(self.tape.shape(x).c);
        state.running_mean = self.params.tensor(&format!("{name}.running_mean"))?.data().to_vec();
        state.running_var = self.params.tensor(&format!("{name}.running_var"))?.data().to_vec();
        let y = self.tape.batch_norm(x, gamma, beta, &mut state, self.mode)?;
        if self.mode == Mode::Train {
            self.bn_updates.push((name.to_string(), state));
        }
        Ok(y)
    }
}

impl<T: Scalar> InfiNet<T> {
    pub fn new(config: InfiNetConfig, arch: Arch, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ModelParameters::new();
        let base = config.base_channels;
        for arm in 1..=arch.arms() {
            for level in 1..=config.depth {
                let cin = if level == 1 { arch.arm_input_channels() } else { base };
                let prefix = format!("{}.enc{level}", arm_name(arm));
                init.conv(&mut params, &format!("{prefix}.conv"), base, cin, 3);
                init.bn(&mut params, &format!("{prefix}.bn"), base);
            }
        }
        let arms = arch.arms();
        for level in (1..=config.depth).rev() {
            let name = block_name(&config, level);
            init.bn(&mut params, &format!("{name}.bn_in"), arms * base);
            init.conv(&mut params, &format!("{name}.reduce"), base, arms * base, 1);
            init.bn(&mut params, &format!("{name}.bn_reduce"), base);
            let skip_channels = if config.has_skips(level) { arms * base } else { 0 };
            init.conv(&mut params, &format!("{name}.conv"), base, base + skip_channels, 3);
            init.bn(&mut params, &format!("{name}.bn_out"), base);
        }
        init.conv(&mut params, "classifier", config.num_classes, base, 1);
        Ok(Self { config, arch, params })
    }

    /// Reassembles a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parameters(config: InfiNetConfig, arch: Arch, params: ModelParameters<T>) -> Result<Self> {
        let template = Self::new(config, arch, 0)?;
        if template.params.len() != params.len() {
            return Err(TensorError::invalid(
                "InfiNet",
                format!("expected {} tensors, found {}", template.params.len(), params.len()),
            ));
        }
        for (name, entry) in template.params.iter() {
            let found = params
                .get(name)
                .ok_or_else(|| TensorError::invalid("InfiNet", format!("missing tensor `{name}`")))?;
            if found.tensor.shape() != entry.tensor.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "InfiNet parameters",
                    lhs: entry.tensor.shape(),
                    rhs: found.tensor.shape(),
                });
            }
        }
        // Keep canonical order regardless of how `params` was assembled.
        let mut ordered = ModelParameters::new();
        for (name, entry) in template.params.iter() {
            let found = params.get(name).expect("checked above");
            ordered.insert(name, found.tensor.clone(), entry.trainable);
        }
        Ok(Self {
            config,
            arch,
            params: ordered,
        })
    }

    pub fn config(&self) -> &InfiNetConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters<T> {
        &mut self.params
    }

    pub fn count_parameters(&self) -> (usize, usize) {
        count_parameters(&self.params)
    }

    pub fn cast<U: Scalar>(&self) -> InfiNet<U> {
        InfiNet {
            config: self.config,
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    /// Records a forward pass. In train mode batch-norm running statistics
    /// are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, t1: Var, t2: Var, mode: Mode) -> Result<ForwardPass> {
        let (pass, updates) = self.run(tape, t1, t2, mode, IndexMap::new())?;
        for (name, state) in updates {
            let v = Shape::vector(state.running_mean.len());
            *self
                .params
                .tensor_mut(&format!("{name}.running_mean"))
                .expect("bn exists") = Tensor::from_vec(v, state.running_mean)?;
            *self
                .params
                .tensor_mut(&format!("{name}.running_var"))
                .expect("bn exists") = Tensor::from_vec(v, state.running_var)?;
        }
        Ok(pass)
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn forward_eval(&self, tape: &mut Tape<T>, t1: Var, t2: Var) -> Result<ForwardPass> {
        self.run(tape, t1, t2, Mode::Eval, IndexMap::new())
            .map(|(pass, _)| pass)
    }

    /// Forward pass that uses the given tape variables for the named
    /// trainable tensors instead of binding fresh copies. Running statistics
    /// are not updated.
    pub fn forward_with_bindings(
        &self,
        tape: &mut Tape<T>,
        t1: Var,
        t2: Var,
        mode: Mode,
        bindings: IndexMap<String, Var>,
    ) -> Result<ForwardPass> {
        for (name, &var) in &bindings {
            let expected = self.params.tensor(name)?.shape();
            if tape.shape(var) != expected {
                return Err(TensorError::ShapeMismatch {
                    op: "InfiNet parameter binding",
                    lhs: expected,
                    rhs: tape.shape(var),
                });
            }
        }
        self.run(tape, t1, t2, mode, bindings).map(|(pass, _)| pass)
    }

    /// Class probabilities for a batch of co-registered slices, eval mode.
    pub fn predict(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let a = tape.constant(t1.clone());
        let b = tape.constant(t2.clone());
        let pass = self.forward_eval(&mut tape, a, b)?;
        Ok(tape.value(pass.probabilities).clone())
    }

    fn check_inputs(&self, s1: Shape, s2: Shape) -> Result<()> {
        if s1 != s2 {
            return Err(TensorError::ShapeMismatch {
                op: "InfiNet forward (T1 vs T2)",
                lhs: s1,
                rhs: s2,
            });
        }
        if s1.c != 1 {
            return Err(TensorError::invalid(
                "InfiNet forward",
                format!("each modality must be a single channel, got {s1}"),
            ));
        }
        self.config.check_spatial(s1.h, s1.w)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        tape: &mut Tape<T>,
        t1: Var,
        t2: Var,
        mode: Mode,
        bound: IndexMap<String, Var>,
    ) -> Result<(ForwardPass, Vec<(String, BatchNormState<T>)>)> {
        self.check_inputs(tape.shape(t1), tape.shape(t2))?;
        let mut ctx = Ctx {
            tape,
            params: &self.params,
            mode,
            bindings: bound,
            bn_updates: Vec::new(),
        };
        let arm_inputs = match self.arch {
            Arch::DualArm => vec![t1, t2],
            Arch::SingleArm => vec![ctx.tape.concat_channels(&[t1, t2])?],
        };
        let mut encoders = Vec::with_capacity(arm_inputs.len());
        for (i, &x) in arm_inputs.iter().enumerate() {
            encoders.push(self.encoder(&mut ctx, i + 1, x)?);
        }

        let mut audit = Vec::new();
        let depth = self.config.depth;
        let mut x: Option<Var> = None;
        for level in (1..=depth).rev() {
            let name = block_name(&self.config, level);
            let mut ups = Vec::with_capacity(encoders.len());
            for enc in &encoders {
                let lvl = &enc.levels[level - 1];
                // The bottleneck unpools each arm's own pooled features; the
                // decoders unpool the previous block's output.
                let src = x.unwrap_or(lvl.pooled);
                let out_shape = lvl.indices.input_shape();
                ups.push(ctx.tape.max_unpool_2x2(src, &lvl.indices, out_shape)?);
                audit.push(UnpoolRecord {
                    block: name.clone(),
                    block_level: level,
                    arm: enc.arm,
                    indices_level: level,
                });
            }
            let skips: Vec<Var> = if self.config.has_skips(level) {
                encoders.iter().map(|e| e.levels[level - 1].features).collect()
            } else {
                Vec::new()
            };
            x = Some(self.fusion_block(&mut ctx, &name, &ups, &skips)?);
        }
        let features = x.expect("depth >= 1");
        let logits = ctx.conv(features, "classifier", 0)?;
        let probabilities = ctx.tape.softmax_channels(logits)?;
        let Ctx {
            bindings, bn_updates, ..
        } = ctx;
        let bindings = self
            .params
            .trainable()
            .filter_map(|(name, _)| bindings.get(name).map(|&v| (name.to_string(), v)))
            .collect();
        Ok((
            ForwardPass {
                probabilities,
                logits,
                bindings,
                encoders,
                unpool_audit: audit,
            },
            bn_updates,
        ))
    }

    fn encoder(&self, ctx: &mut Ctx<'_, T>, arm: usize, input: Var) -> Result<EncoderTrace> {
        let mut levels = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for level in 1..=self.config.depth {
            let prefix = format!("{}.enc{level}", arm_name(arm));
            let y = ctx.conv(x, &format!("{prefix}.conv"), 1)?;
            let y = ctx.tape.relu(y)?;
            let features = ctx.bn(y, &format!("{prefix}.bn"))?;
            let (pooled, indices) = ctx.tape.max_pool_2x2(features)?;
            levels.push(EncoderLevel {
                features,
                pooled,
                indices,
            });
            x = pooled;
        }
        Ok(EncoderTrace { arm, levels })
    }

    fn fusion_block(&self, ctx: &mut Ctx<'_, T>, name: &str, ups: &[Var], skips: &[Var]) -> Result<Var> {
        let x = ctx.tape.concat_channels(ups)?;
        let x = ctx.bn(x, &format!("{name}.bn_in"))?;
        let x = ctx.conv(x, &format!("{name}.reduce"), 0)?;
        let x = ctx.tape.relu(x)?;
        let x = ctx.bn(x, &format!("{name}.bn_reduce"))?;
        let mut cat = Vec::with_capacity(1 + skips.len());
        cat.push(x);
        cat.extend_from_slice(skips);
        let x = ctx.tape.concat_channels(&cat)?;
        let x = ctx.conv(x, &format!("{name}.conv"), 1)?;
        let x = ctx.tape.relu(x)?;
        ctx.bn(x, &format!("{name}.bn_out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> InfiNetConfig {
        InfiNetConfig {
            base_channels: 4,
            ..InfiNetConfig::default()
        }
        .with_input(16, 16)
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = InfiNetConfig::default().with_input(60, 64);
        assert!(build_infinet::<f32>(cfg, 0).is_err());
    }

    #[test]
    fn single_conv_count() {
        let mut params = ModelParameters::<f32>::new();
        Init {
            rng: ChaCha8Rng::seed_from_u64(0),
        }
        .conv(&mut params, "c", 64, 1, 3);
        assert_eq!(count_parameters(&params), (640, 640));
        assert_eq!(count_parameters(&ModelParameters::<f32>::new()), (0, 0));
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let model = build_infinet::<f32>(small(), 1).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 1, 16, 16)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 16, 8)));
        assert!(matches!(
            model.forward_eval(&mut tape, a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn init_is_seeded() {
        let a = build_infinet::<f32>(small(), 3).unwrap();
        let b = build_infinet::<f32>(small(), 3).unwrap();
        let c = build_infinet::<f32>(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn from_parameters_checks_shapes() {
        let model = build_infinet::<f32>(small(), 1).unwrap();
        let mut params = model.params().clone();
        *params.tensor_mut("dec1.conv.bias").unwrap() = Tensor::zeros(Shape::vector(3));
        assert!(InfiNet::from_parameters(small(), Arch::DualArm, params).is_err());
        assert!(InfiNet::from_parameters(small(), Arch::DualArm, model.params().clone()).is_ok());
    }
}
