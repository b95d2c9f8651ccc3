//! Named finite-difference checks of every differentiable op and of the
//! composed network with its loss.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{BatchNormState, GdlOptions, Mode, Tape, Var};
use crate::error::{Result, TensorError};
use crate::gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
use crate::model::{Arch, InfiNet, InfiNetConfig};
use crate::sampler::{derive_seed, one_hot};
use crate::tensor::{Shape, Tensor};

/// Ops covered by `all`.
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "batch_norm",
    "relu",
    "max_pool",
    "max_unpool",
    "concat",
    "softmax",
    "gdl_loss",
    "infinet",
];

/// Deliberately wrong backward pass, available only with the
/// `negative-control` feature.
pub const BROKEN_OP: &str = "broken_scale";

pub fn known_op(name: &str) -> bool {
    OP_NAMES.contains(&name) || (cfg!(feature = "negative-control") && name == BROKEN_OP)
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCheckSummary {
    pub op: String,
    pub trials: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn normal(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

/// Runs one trial of the named check.
pub fn check_op(name: &str, trial: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, trial));
    let rng = &mut rng;
    match name {
        "conv2d" => {
            let x = normal(rng, Shape::new(2, 3, 5, 5));
            let k = normal(rng, Shape::new(4, 3, 3, 3));
            let b = normal(rng, Shape::vector(4));
            let w = normal(rng, Shape::new(2, 4, 5, 5));
            finite_difference_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], 1)?;
                    t.weighted_sum(y, &w)
                },
                &[x, k, b],
                &[true; 3],
                cfg,
            )
        }
        "batch_norm" => {
            let x = normal(rng, Shape::new(3, 2, 3, 3));
            let g = uniform(rng, Shape::vector(2), 0.5, 1.5);
            let b = normal(rng, Shape::vector(2));
            let w = normal(rng, x.shape());
            finite_difference_check(
                |t, v| {
                    let mut state = BatchNormState::new(2);
                    let y = t.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train)?;
                    t.weighted_sum(y, &w)
                },
                &[x, g, b],
                &[true; 3],
                cfg,
            )
        }
        "relu" => {
            let x = normal(rng, Shape::new(2, 2, 4, 4));
            let w = normal(rng, x.shape());
            finite_difference_check(
                |t, v| {
                    let y = t.relu(v[0])?;
                    t.weighted_sum(y, &w)
                },
                &[x],
                &[true],
                cfg,
            )
        }
        "max_pool" => {
            let x = normal(rng, Shape::new(2, 2, 4, 6));
            let w = normal(rng, Shape::new(2, 2, 2, 3));
            finite_difference_check(
                |t, v| {
                    let (y, _) = t.max_pool_2x2(v[0])?;
                    t.weighted_sum(y, &w)
                },
                &[x],
                &[true],
                cfg,
            )
        }
        "max_unpool" => {
            let source = normal(rng, Shape::new(2, 2, 4, 4));
            let mut scratch = Tape::new();
            let s = scratch.constant(source.clone());
            let (_, indices) = scratch.max_pool_2x2(s)?;
            let x = normal(rng, indices.shape());
            let w = normal(rng, source.shape());
            finite_difference_check(
                |t, v| {
                    let y = t.max_unpool_2x2(v[0], &indices, source.shape())?;
                    t.weighted_sum(y, &w)
                },
                &[x],
                &[true],
                cfg,
            )
        }
        "concat" => {
            let a = normal(rng, Shape::new(2, 2, 3, 3));
            let b = normal(rng, Shape::new(2, 3, 3, 3));
            let w = normal(rng, Shape::new(2, 5, 3, 3));
            finite_difference_check(
                |t, v| {
                    let y = t.concat_channels(&[v[0], v[1]])?;
                    t.weighted_sum(y, &w)
                },
                &[a, b],
                &[true, true],
                cfg,
            )
        }
        "softmax" => {
            let x = normal(rng, Shape::new(2, 4, 3, 3));
            let w = normal(rng, x.shape());
            finite_difference_check(
                |t, v| {
                    let y = t.softmax_channels(v[0])?;
                    t.weighted_sum(y, &w)
                },
                &[x],
                &[true],
                cfg,
            )
        }
        "gdl_loss" => {
            let shape = Shape::new(2, 3, 3, 3);
            let logits = normal(rng, shape);
            let labels = random_labels(rng, 2 * 9, 3);
            let target = one_hot(&labels, Shape::new(2, 1, 3, 3), 3).cast::<f64>();
            let weights = (0..3).map(|_| rng.random_range(0.5..4.0)).collect();
            let opts = GdlOptions::new(weights);
            // Checked both directly on probabilities and through softmax.
            let probs = uniform(rng, shape, 0.05, 1.0);
            let direct = finite_difference_check(|t, v| t.gdl_loss(v[0], &target, &opts), &[probs], &[true], cfg)?;
            let through = finite_difference_check(
                |t, v| {
                    let p = t.softmax_channels(v[0])?;
                    t.gdl_loss(p, &target, &opts)
                },
                &[logits],
                &[true],
                cfg,
            )?;
            Ok(merge(direct, through))
        }
        "infinet" => check_composed(rng, cfg),
        #[cfg(feature = "negative-control")]
        "broken_scale" => {
            let x = normal(rng, Shape::new(1, 2, 3, 3));
            let w = normal(rng, x.shape());
            finite_difference_check(
                |t, v| {
                    let y = t.broken_scale(v[0], 2.0)?;
                    t.weighted_sum(y, &w)
                },
                &[x],
                &[true],
                cfg,
            )
        }
        other => Err(TensorError::invalid("grad-check", format!("unknown op `{other}`"))),
    }
}

fn merge(mut a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    a.inputs.extend(b.inputs);
    a.max_rel_error = a.max_rel_error.max(b.max_rel_error);
    a.passed &= b.passed;
    a
}

/// Dual-arm InfiNet (4 base channels) on a batch of two 8x8 slices,
/// through softmax into the loss, w.r.t. both inputs and every trainable
/// tensor.
fn check_composed(rng: &mut ChaCha8Rng, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let config = InfiNetConfig::default().with_base_channels(4).with_input(8, 8);
    let model = InfiNet::<f64>::new(config, Arch::DualArm, rng.random())?;
    let shape = Shape::new(2, 1, 8, 8);
    let t1 = uniform(rng, shape, 0.0, 1.0);
    let t2 = uniform(rng, shape, 0.0, 1.0);
    let labels = random_labels(rng, 2 * 64, config.num_classes);
    let target = one_hot(&labels, shape, config.num_classes).cast::<f64>();
    let opts = GdlOptions::new(vec![1.0, 2.0, 0.5, 3.0]);
    let names: Vec<String> = model.params().trainable().map(|(n, _)| n.to_string()).collect();
    // At initialization every shift is zero, which puts whole blocks of
    // decoder ReLU inputs exactly on the kink. Move to a generic point.
    let mut inputs = vec![t1, t2];
    for (name, t) in model.params().trainable() {
        let moved = if name.ends_with(".gamma") {
            uniform(rng, t.shape(), 0.5, 1.5)
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            normal(rng, t.shape()).map(|v| 0.5 * v)
        } else {
            t.clone()
        };
        inputs.push(moved);
    }
    let wrt = vec![true; inputs.len()];
    finite_difference_check(
        |t, v| {
            let bindings: IndexMap<String, Var> = names.iter().cloned().zip(v[2..].iter().copied()).collect();
            let pass = model.forward_with_bindings(t, v[0], v[1], Mode::Train, bindings)?;
            t.gdl_loss(pass.probabilities, &target, &opts)
        },
        &inputs,
        &wrt,
        cfg,
    )
}

/// Runs `trials` seeded trials of `op` and folds them into one summary.
pub fn run_check(op: &str, trials: usize, cfg: &GradCheckConfig) -> Result<OpCheckSummary> {
    let mut summary = OpCheckSummary {
        op: op.to_string(),
        trials,
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for trial in 0..trials {
        let r = check_op(op, trial as u64, cfg)?;
        summary.checked += r.checked();
        summary.skipped_kinks += r.skipped();
        summary.max_rel_error = summary.max_rel_error.max(r.max_rel_error);
        summary.passed &= r.passed;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_an_error() {
        assert!(check_op("nope", 0, &GradCheckConfig::default()).is_err());
        assert!(!known_op("nope"));
        assert!(known_op("conv2d"));
    }

    #[test]
    fn single_ops_pass() {
        let cfg = GradCheckConfig::default();
        for op in OP_NAMES.iter().filter(|&&o| o != "infinet") {
            let s = run_check(op, 1, &cfg).unwrap();
            assert!(s.passed, "{s:?}");
            assert!(s.checked > 0);
        }
    }
}
