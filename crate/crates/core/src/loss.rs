//! Class weighting for the generalized Dice loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::GdlOptions;
use crate::tensor::Scalar;

/// Per-class loss weights derived from label frequencies.
///
/// `weights[l] = 1 / f_l^2` for every class with `f_l > 0`; classes that never
/// occur get weight `0` and drop out of the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub frequencies: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn from_frequencies(frequencies: &[f64]) -> Self {
        let weights = frequencies
            .iter()
            .map(|&f| if f > 0.0 { 1.0 / (f * f) } else { 0.0 })
            .collect();
        Self {
            frequencies: frequencies.to_vec(),
            weights,
        }
    }

    /// Equal weights, used when no frequency information is available.
    pub fn uniform(num_classes: usize) -> Self {
        let f = 1.0 / num_classes as f64;
        Self::from_frequencies(&vec![f; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Number of classes with non-zero weight.
    pub fn active_classes(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn gdl_options<T: Scalar>(&self) -> GdlOptions<T> {
        GdlOptions::new(self.weights.iter().map(|&w| T::from_f64_lossy(w)).collect())
    }
}
