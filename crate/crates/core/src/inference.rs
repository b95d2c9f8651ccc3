//! Whole-volume inference per view, view aggregation, hard labels and Dice.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::TensorError;
use crate::model::InfiNet;
use crate::phantom::CLASS_NAMES;
use crate::tensor::{Shape, Tensor};
use crate::volume::{extract_slice, scatter_slice, write_atomic, Axis, LabeledVolume, VolumeError};

pub const PROBABILITY_MAGIC: &str = "IPROB1";

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Vec<usize>, Vec<usize>),
    #[error("model is incompatible with the volume: {0}")]
    Incompatible(String),
    #[error("class {class} outside 0..{num_classes}")]
    BadClass { class: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-class probability of every voxel, laid out as `L x D x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    pub num_classes: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn zeros(num_classes: usize, dims: [usize; 3]) -> Self {
        Self {
            num_classes,
            dims,
            data: vec![0.0; num_classes * dims.iter().product::<usize>()],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Probability map of class `l`.
    pub fn class_map(&self, l: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[l * v..(l + 1) * v]
    }

    pub fn class_map_mut(&mut self, l: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.data[l * v..(l + 1) * v]
    }

    pub fn at(&self, l: usize, voxel: usize) -> f32 {
        self.data[l * self.voxels() + voxel]
    }

    /// Largest deviation of a per-voxel class sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        let v = self.voxels();
        (0..v)
            .map(|i| {
                let s: f64 = (0..self.num_classes).map(|l| f64::from(self.data[l * v + i])).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    fn dim_vec(&self) -> Vec<usize> {
        let mut d = vec![self.num_classes];
        d.extend(self.dims);
        d
    }
}

#[derive(Serialize, Deserialize)]
struct ProbabilityHeader {
    magic: String,
    num_classes: usize,
    dims: [usize; 3],
    provenance: String,
}

/// One JSON header line followed by the `L x D x H x W` f32 little-endian
/// payload. `provenance` is free text (views, seeds, source files).
pub fn encode_probabilities(p: &ProbabilityVolume, provenance: &str) -> Vec<u8> {
    let header = ProbabilityHeader {
        magic: PROBABILITY_MAGIC.to_string(),
        num_classes: p.num_classes,
        dims: p.dims,
        provenance: provenance.to_string(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(p.data.len() * 4);
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_probabilities(bytes: &[u8]) -> Result<(ProbabilityVolume, String), VolumeError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| VolumeError::Malformed("missing header line".into()))?;
    let header: ProbabilityHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| VolumeError::Malformed(e.to_string()))?;
    if header.magic != PROBABILITY_MAGIC {
        return Err(VolumeError::BadMagic {
            expected: PROBABILITY_MAGIC,
            found: header.magic,
        });
    }
    let n = header
        .dims
        .iter()
        .try_fold(header.num_classes, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or(VolumeError::DimOverflow { dims: header.dims })?;
    let payload = &bytes[nl + 1..];
    if payload.len() != n {
        return Err(VolumeError::Truncated {
            expected: n,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let p = ProbabilityVolume {
        num_classes: header.num_classes,
        dims: header.dims,
        data,
    };
    Ok((p, header.provenance))
}

pub fn write_probabilities(
    p: &ProbabilityVolume,
    provenance: &str,
    path: impl AsRef<std::path::Path>,
) -> Result<(), VolumeError> {
    write_atomic(path.as_ref(), &encode_probabilities(p, provenance))
}

pub fn read_probabilities(path: impl AsRef<std::path::Path>) -> Result<(ProbabilityVolume, String), VolumeError> {
    decode_probabilities(&std::fs::read(path)?)
}

/// Runs every slice along `axis` through `model` in eval mode, `batch`
/// slices at a time, and restacks the probabilities.
pub fn segment_view(
    model: &InfiNet<f32>,
    volume: &LabeledVolume,
    axis: Axis,
    batch: usize,
) -> Result<ProbabilityVolume, InferenceError> {
    let (count, h, w) = axis.slice_geometry(volume.dims);
    model
        .config()
        .check_spatial(h, w)
        .map_err(|e| InferenceError::Incompatible(format!("{axis} slices are {h}x{w}: {e}")))?;
    if volume.num_classes != model.config().num_classes {
        return Err(InferenceError::Incompatible(format!(
            "volume has {} classes, model has {}",
            volume.num_classes,
            model.config().num_classes
        )));
    }
    let classes = model.config().num_classes;
    let mut out = ProbabilityVolume::zeros(classes, volume.dims);
    let plane = h * w;
    let starts: Vec<usize> = (0..count).step_by(batch.max(1)).collect();
    for start in starts {
        let end = (start + batch.max(1)).min(count);
        let n = end - start;
        let mut t1 = Vec::with_capacity(n * plane);
        let mut t2 = Vec::with_capacity(n * plane);
        for i in start..end {
            let s = extract_slice(volume, axis, i).expect("index within count");
            t1.extend_from_slice(&s.t1);
            t2.extend_from_slice(&s.t2);
        }
        let shape = Shape::new(n, 1, h, w);
        let probs = model.predict(&Tensor::from_vec(shape, t1)?, &Tensor::from_vec(shape, t2)?)?;
        for (k, i) in (start..end).enumerate() {
            for l in 0..classes {
                let values = probs.plane(k, l);
                scatter_slice(out.class_map_mut(l), volume.dims, axis, i, values);
            }
        }
    }
    Ok(out)
}

/// Voxelwise mean of the per-view probability maps.
pub fn aggregate_views(views: &[&ProbabilityVolume]) -> Result<ProbabilityVolume, InferenceError> {
    let first = views
        .first()
        .ok_or_else(|| InferenceError::Incompatible("no views to aggregate".into()))?;
    for v in &views[1..] {
        if v.dims != first.dims || v.num_classes != first.num_classes {
            return Err(InferenceError::DimMismatch(first.dim_vec(), v.dim_vec()));
        }
    }
    let k = views.len() as f64;
    let data = (0..first.data.len())
        .map(|i| (views.iter().map(|v| f64::from(v.data[i])).sum::<f64>() / k) as f32)
        .collect();
    Ok(ProbabilityVolume {
        num_classes: first.num_classes,
        dims: first.dims,
        data,
    })
}

/// Per-voxel argmax; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbabilityVolume) -> Vec<u8> {
    let v = p.voxels();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for l in 1..p.num_classes {
                if p.data[l * v + i] > p.data[best * v + i] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

/// `2|P ∩ G| / (|P| + |G|)` for one class; 1 when both masks are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> Result<f64, InferenceError> {
    if pred.len() != truth.len() {
        return Err(InferenceError::DimMismatch(vec![pred.len()], vec![truth.len()]));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (ia, ib) = (a == class, b == class);
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub class: usize,
    pub name: String,
    pub dice: f64,
    pub predicted_voxels: usize,
    pub true_voxels: usize,
}

/// Per-class Dice over all voxels; the mean excludes background (class 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub classes: Vec<ClassDice>,
    pub mean_dice: f64,
}

fn class_name(l: usize) -> String {
    CLASS_NAMES
        .get(l)
        .map_or_else(|| format!("class{l}"), |s| s.to_string())
}

impl DiceReport {
    pub fn compute(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<Self, InferenceError> {
        if pred.len() != truth.len() {
            return Err(InferenceError::DimMismatch(vec![pred.len()], vec![truth.len()]));
        }
        if let Some(&l) = pred.iter().chain(truth).find(|&&l| usize::from(l) >= num_classes) {
            return Err(InferenceError::BadClass {
                class: l.into(),
                num_classes,
            });
        }
        let classes: Vec<ClassDice> = (0..num_classes)
            .map(|l| ClassDice {
                class: l,
                name: class_name(l),
                dice: dice_score(pred, truth, l as u8).expect("lengths checked"),
                predicted_voxels: pred.iter().filter(|&&p| usize::from(p) == l).count(),
                true_voxels: truth.iter().filter(|&&t| usize::from(t) == l).count(),
            })
            .collect();
        let tissue = &classes[1.min(classes.len())..];
        let mean_dice = tissue.iter().map(|c| c.dice).sum::<f64>() / tissue.len().max(1) as f64;
        Ok(Self { classes, mean_dice })
    }

    pub fn dice(&self, class: usize) -> Option<f64> {
        self.classes.get(class).map(|c| c.dice)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<8} {:>8} {:>10} {:>10}",
            "class", "name", "dice", "predicted", "true"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<6} {:<8} {:>8.4} {:>10} {:>10}",
                c.class, c.name, c.dice, c.predicted_voxels, c.true_voxels
            );
        }
        let _ = writeln!(s, "{:<6} {:<8} {:>8.4}", "mean", "(no bg)", self.mean_dice);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_file_round_trip() {
        let mut p = ProbabilityVolume::zeros(2, [1, 2, 3]);
        p.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 / 12.0);
        let bytes = encode_probabilities(&p, "view=axial seed=3");
        let (q, prov) = decode_probabilities(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(prov, "view=axial seed=3");
        assert!(matches!(
            decode_probabilities(&bytes[..bytes.len() - 1]),
            Err(VolumeError::Truncated { .. })
        ));
    }

    #[test]
    fn dice_worked_example() {
        // |P| = 4, |G| = 6, overlap 3.
        let pred = [1, 1, 1, 1, 0, 0, 0, 0, 0];
        let truth = [1, 1, 1, 0, 1, 1, 1, 0, 0];
        assert_eq!(dice_score(&pred, &truth, 1).unwrap(), 0.6);
        assert_eq!(dice_score(&pred, &pred, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 0], &[0, 1], 1).unwrap(), 0.0);
        assert!(dice_score(&[1], &[1, 0], 1).is_err());
    }

    #[test]
    fn averaging_example() {
        let mk = |v: [f32; 3]| ProbabilityVolume {
            num_classes: 3,
            dims: [1, 1, 1],
            data: v.to_vec(),
        };
        let (a, b) = (mk([1.0, 0.0, 0.0]), mk([0.0, 1.0, 0.0]));
        let m = aggregate_views(&[&a, &b, &b]).unwrap();
        assert!((m.data[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((m.data[1] - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(m.data[2], 0.0);
        let other = ProbabilityVolume::zeros(3, [1, 1, 2]);
        assert!(aggregate_views(&[&a, &other]).is_err());
    }

    #[test]
    fn argmax_tie_goes_low() {
        let p = ProbabilityVolume {
            num_classes: 2,
            dims: [1, 1, 2],
            data: vec![0.5, 0.2, 0.5, 0.8],
        };
        assert_eq!(argmax_labels(&p), vec![0, 1]);
    }

    #[test]
    fn report_excludes_background_from_mean() {
        let truth = [0, 1, 2, 3];
        let pred = [1, 1, 2, 3];
        let r = DiceReport::compute(&pred, &truth, 4).unwrap();
        assert_eq!(r.dice(0), Some(0.0));
        assert!((r.mean_dice - (2.0 / 3.0 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(r.to_table().contains("WM"));
    }
}
