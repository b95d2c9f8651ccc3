//! Central finite-difference verification of tape gradients.
//!
//! Each checked element `x_i` is perturbed by `+h` and `-h`; the estimate
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` is compared with the analytic
//! gradient. When either perturbation changes a discrete branch of the
//! function (a ReLU sign or a pooling argmax) the element is skipped: the
//! difference quotient straddles a kink and is not a derivative estimate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that vanishing gradients
    /// are compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many elements per input (sampled without
    /// replacement); `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub input: usize,
    pub shape: [usize; 4],
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest error.
    pub worst_element: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|c| c.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|c| c.skipped_kinks).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Eval {
    value: f64,
    kinks: Vec<u64>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], wrt: &[bool]) -> Result<(Eval, Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_kink_log();
    let vars: Vec<Var> = inputs.iter().zip(wrt).map(|(t, &g)| tape.leaf(t.clone(), g)).collect();
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out);
    if shape != Shape::scalar() {
        return Err(TensorError::NotScalar { shape });
    }
    let eval = Eval {
        value: tape.value(out).data()[0],
        kinks: tape.kink_log().unwrap_or_default().to_vec(),
    };
    Ok((eval, tape, vars, out))
}

/// Compares analytic and central-difference gradients of the scalar
/// function `f` with respect to each input flagged in `wrt`.
pub fn finite_difference_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if wrt.len() != inputs.len() {
        return Err(TensorError::invalid(
            "finite_difference_check",
            "wrt flags do not match inputs",
        ));
    }
    let (base, tape, vars, out) = evaluate(&f, inputs, wrt)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut perturbed = inputs.to_vec();
    for (i, (&var, _)) in vars.iter().zip(wrt).enumerate().filter(|(_, (_, &w))| w) {
        let numel = inputs[i].numel();
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let elements: Vec<usize> = match cfg.max_elements {
            Some(k) if k < numel => {
                let mut idx = sample(&mut rng, numel, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..numel).collect(),
        };
        let mut report = InputCheck {
            input: i,
            shape: inputs[i].shape().dims(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_element: None,
        };
        for e in elements {
            let x0 = inputs[i].data()[e];
            perturbed[i].data_mut()[e] = x0 + cfg.h;
            let (plus, ..) = evaluate(&f, &perturbed, wrt)?;
            perturbed[i].data_mut()[e] = x0 - cfg.h;
            let (minus, ..) = evaluate(&f, &perturbed, wrt)?;
            perturbed[i].data_mut()[e] = x0;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * cfg.h);
            let err = relative_error(analytic.data()[e], numeric, cfg.abs_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_element.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_element = Some(e);
            }
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance && reports.iter().any(|r| r.checked > 0),
        inputs: reports,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

/// Single-input convenience wrapper.
pub fn check_single<F>(f: F, input: &Tensor<f64>, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        h,
        tolerance,
        ..GradCheckConfig::default()
    };
    finite_difference_check(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(input),
        &[true],
        &cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let ones = Tensor::full(x.shape(), 1.0);
        let report = check_single(
            |tape, v| {
                let y = tape.scale(v, 3.0)?;
                tape.weighted_sum(y, &ones)
            },
            &x,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn relu_at_zero_is_skipped() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 0.7, -0.4]).unwrap();
        let ones = Tensor::full(x.shape(), 1.0);
        let report = check_single(
            |tape, v| {
                let y = tape.relu(v)?;
                tape.weighted_sum(y, &ones)
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.inputs[0].skipped_kinks, 1);
        assert_eq!(report.inputs[0].checked, 2);
        assert!(report.passed);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let err = check_single(|tape, v| tape.scale(v, 2.0), &x, 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }
}
