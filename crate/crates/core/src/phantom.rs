//! Synthetic two-modality head phantoms with known ground truth.
//!
//! Each phantom is a jittered ellipsoidal "brain" of nested tissue shells on
//! a background: an outer CSF layer, a folded gray-matter ribbon, a white
//! matter core and two CSF-filled ventricles. Class intensities come from
//! per-modality contrast tables; each modality gets its own smooth
//! multiplicative bias field and Gaussian noise, then values are clamped to
//! `[0, 1]`.
//!
//! The default contrast tables reproduce the iso-intense problem: in T1 the
//! gray/white matter means are closer than the noise level, in T2 background
//! and white matter are, yet the pair of modalities separates every class.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::LabeledVolume;

pub const BACKGROUND: u8 = 0;
pub const CSF: u8 = 1;
pub const GRAY_MATTER: u8 = 2;
pub const WHITE_MATTER: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["BG", "CSF", "GM", "WM"];

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("dims {0:?} must all be positive multiples of 8")]
    Dims([usize; 3]),
    #[error("class {0} is empty in the generated phantom")]
    EmptyClass(usize),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub name: String,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub num_classes: usize,
    /// Maximum center offset as a fraction of each half-extent.
    pub center_jitter: f64,
    /// Outer brain radius as a fraction of each half-extent.
    pub outer_radius: (f64, f64),
    /// Shell thicknesses in normalized radius units.
    pub csf_thickness: (f64, f64),
    pub gm_thickness: (f64, f64),
    /// Relative modulation of the gray/white boundary.
    pub fold_amplitude: f64,
    pub fold_frequency: f64,
    /// Ventricle size relative to the brain radius.
    pub ventricle_radius: (f64, f64),
    pub noise_std: f64,
    pub bias_field_amplitude: f64,
    /// Mean intensity per class, `[BG, CSF, GM, WM]`.
    pub contrast_t1: Vec<f64>,
    pub contrast_t2: Vec<f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::iso_intense([64, 64, 64])
    }
}

impl PhantomSpec {
    pub fn iso_intense(dims: [usize; 3]) -> Self {
        Self {
            name: "iso-intense".into(),
            dims,
            voxel_size: [1.0; 3],
            num_classes: 4,
            center_jitter: 0.06,
            outer_radius: (0.74, 0.86),
            csf_thickness: (0.09, 0.13),
            gm_thickness: (0.16, 0.24),
            fold_amplitude: 0.45,
            fold_frequency: 5.0,
            ventricle_radius: (0.14, 0.20),
            noise_std: 0.06,
            bias_field_amplitude: 0.12,
            contrast_t1: vec![0.05, 0.22, 0.50, 0.55],
            contrast_t2: vec![0.08, 0.85, 0.42, 0.12],
        }
    }

    pub fn with_dims(mut self, dims: [usize; 3]) -> Self {
        self.dims = dims;
        self
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.iter().any(|&d| d == 0 || d % 8 != 0) {
            return Err(PhantomError::Dims(self.dims));
        }
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        if self.num_classes != 4 {
            return bad("phantoms have exactly 4 classes (BG, CSF, GM, WM)");
        }
        if self.contrast_t1.len() != self.num_classes || self.contrast_t2.len() != self.num_classes {
            return bad("contrast tables need one mean per class");
        }
        for &(lo, hi) in [
            &self.outer_radius,
            &self.csf_thickness,
            &self.gm_thickness,
            &self.ventricle_radius,
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad("ranges must satisfy 0 < lo <= hi");
            }
        }
        if self.csf_thickness.1 + self.gm_thickness.1 * (1.0 + self.fold_amplitude) >= 1.0 {
            return bad("shells leave no room for white matter");
        }
        if self.noise_std < 0.0 || self.bias_field_amplitude < 0.0 || self.bias_field_amplitude >= 1.0 {
            return bad("noise_std must be >= 0 and bias amplitude in [0, 1)");
        }
        Ok(())
    }

    /// Pairs of classes whose means differ by less than the noise level in
    /// one modality (`table` 0 = T1, 1 = T2).
    pub fn ambiguous_pairs(&self, table: usize) -> Vec<(usize, usize)> {
        let t = if table == 0 {
            &self.contrast_t1
        } else {
            &self.contrast_t2
        };
        let mut out = Vec::new();
        for a in 0..t.len() {
            for b in a + 1..t.len() {
                if (t[a] - t[b]).abs() < self.noise_std {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Each modality alone has an ambiguous class pair, and no pair is
    /// ambiguous in both.
    pub fn is_iso_intense(&self) -> bool {
        let (a, b) = (self.ambiguous_pairs(0), self.ambiguous_pairs(1));
        !a.is_empty() && !b.is_empty() && a.iter().all(|p| !b.contains(p))
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, PhantomError> {
        let mut spec = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = || PhantomError::InvalidSpec(format!("line {}: `{raw}`", lineno + 1));
            let (key, value) = line.split_once('=').ok_or_else(err)?;
            let value = value.trim();
            let floats = || -> Result<Vec<f64>, PhantomError> {
                value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<f64>().map_err(|_| err()))
                    .collect()
            };
            let pair = || -> Result<(f64, f64), PhantomError> {
                match floats()?.as_slice() {
                    [a, b] => Ok((*a, *b)),
                    _ => Err(err()),
                }
            };
            let triple = || -> Result<[f64; 3], PhantomError> {
                match floats()?.as_slice() {
                    [a, b, c] => Ok([*a, *b, *c]),
                    _ => Err(err()),
                }
            };
            let single = || -> Result<f64, PhantomError> { value.parse::<f64>().map_err(|_| err()) };
            match key.trim() {
                "name" => spec.name = value.to_string(),
                "dims" => {
                    let d = triple()?;
                    if d.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                        return Err(err());
                    }
                    spec.dims = [d[0] as usize, d[1] as usize, d[2] as usize];
                }
                "voxel_size" => spec.voxel_size = triple()?,
                "center_jitter" => spec.center_jitter = single()?,
                "outer_radius" => spec.outer_radius = pair()?,
                "csf_thickness" => spec.csf_thickness = pair()?,
                "gm_thickness" => spec.gm_thickness = pair()?,
                "fold_amplitude" => spec.fold_amplitude = single()?,
                "fold_frequency" => spec.fold_frequency = single()?,
                "ventricle_radius" => spec.ventricle_radius = pair()?,
                "noise_std" => spec.noise_std = single()?,
                "bias_field_amplitude" => spec.bias_field_amplitude = single()?,
                "contrast_t1" => spec.contrast_t1 = floats()?,
                "contrast_t2" => spec.contrast_t2 = floats()?,
                _ => return Err(err()),
            }
        }
        Ok(spec)
    }
}

/// Multiplicative bias fields applied during generation, one per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasFields {
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

struct Geometry {
    center: [f64; 3],
    radius: [f64; 3],
    csf: f64,
    gm: f64,
    fold_phase: [f64; 2],
    ventricle: f64,
}

impl Geometry {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut center = [0.0; 3];
        let mut radius = [0.0; 3];
        for i in 0..3 {
            let half = spec.dims[i] as f64 / 2.0;
            center[i] = half - 0.5 + rng.random_range(-1.0..=1.0) * spec.center_jitter * half;
            radius[i] = uniform(rng, spec.outer_radius) * half;
        }
        Self {
            center,
            radius,
            csf: uniform(rng, spec.csf_thickness),
            gm: uniform(rng, spec.gm_thickness),
            fold_phase: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            ventricle: uniform(rng, spec.ventricle_radius),
        }
    }

    fn label(&self, spec: &PhantomSpec, z: usize, y: usize, x: usize) -> u8 {
        let u = [
            (z as f64 - self.center[0]) / self.radius[0],
            (y as f64 - self.center[1]) / self.radius[1],
            (x as f64 - self.center[2]) / self.radius[2],
        ];
        let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if rho > 1.0 {
            return BACKGROUND;
        }
        if rho > 1.0 - self.csf {
            return CSF;
        }
        let theta = u[1].atan2(u[2]);
        let phi = if rho > 0.0 {
            (u[0] / rho).clamp(-1.0, 1.0).acos()
        } else {
            0.0
        };
        let f = spec.fold_frequency;
        let fold =
            1.0 + spec.fold_amplitude * (f * theta + self.fold_phase[0]).sin() * (f * phi + self.fold_phase[1]).sin();
        if rho > 1.0 - self.csf - self.gm * fold {
            return GRAY_MATTER;
        }
        // Two lateral ventricles, elongated along the first axis.
        let v = self.ventricle;
        for side in [-1.0, 1.0] {
            let d = [u[0] / (1.6 * v), u[1] / v, (u[2] - side * 1.2 * v) / (0.6 * v)];
            if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < 1.0 {
                return CSF;
            }
        }
        WHITE_MATTER
    }
}

fn bias_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [d, h, w] = spec.dims;
    let amp = spec.bias_field_amplitude;
    // Three random low-frequency cosines, scaled so |b - 1| <= amp.
    let terms: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let freq = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            (freq, rng.random_range(0.0..2.0 * PI), rng.random_range(-1.0..=1.0))
        })
        .collect();
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64];
                let s: f64 = terms
                    .iter()
                    .map(|(f, ph, a)| a * (PI * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + ph).cos())
                    .sum();
                out.push(1.0 + amp * s / 3.0);
            }
        }
    }
    out
}

/// Deterministic phantom for `(spec, seed)`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume, PhantomError> {
    generate_phantom_with_fields(spec, seed).map(|(v, _)| v)
}

/// Like [`generate_phantom`], also returning the bias fields that were applied.
pub fn generate_phantom_with_fields(
    spec: &PhantomSpec,
    seed: u64,
) -> Result<(LabeledVolume, BiasFields), PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::sample(spec, &mut rng);
    let [d, h, w] = spec.dims;
    let mut labels = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                labels.push(geom.label(spec, z, y, x));
            }
        }
    }
    let counts = class_counts(&labels, spec.num_classes);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(PhantomError::EmptyClass(empty));
    }
    let fields = BiasFields {
        t1: bias_field(spec, &mut rng),
        t2: bias_field(spec, &mut rng),
    };
    let mut synth = |table: &[f64], bias: &[f64]| -> Vec<f32> {
        labels
            .iter()
            .zip(bias)
            .map(|(&l, &b)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = table[usize::from(l)] * b + spec.noise_std * noise;
                v.clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    let t1 = synth(&spec.contrast_t1, &fields.t1);
    let t2 = synth(&spec.contrast_t2, &fields.t2);
    Ok((
        LabeledVolume {
            dims: spec.dims,
            voxel_size: spec.voxel_size,
            t1,
            t2,
            labels,
            num_classes: spec.num_classes,
            seed,
            spec_id: spec.name.clone(),
        },
        fields,
    ))
}

pub fn class_counts(labels: &[u8], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for &l in labels {
        counts[usize::from(l)] += 1;
    }
    counts
}

/// Fraction of voxels per class. Sums to 1 (up to rounding) for non-empty input.
pub fn class_frequencies(labels: &[u8], num_classes: usize) -> Vec<f64> {
    let counts = class_counts(labels, num_classes);
    let total = labels.len().max(1) as f64;
    counts.iter().map(|&c| c as f64 / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec::iso_intense([32, 32, 32])
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&small(), 7).unwrap();
        let b = generate_phantom(&small(), 7).unwrap();
        let c = generate_phantom(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.t1, c.t1);
    }

    #[test]
    fn noiseless_intensity_equals_table_mean() {
        let mut spec = small();
        spec.noise_std = 0.0;
        spec.bias_field_amplitude = 0.0;
        let vol = generate_phantom(&spec, 3).unwrap();
        for i in 0..vol.voxels() {
            let l = usize::from(vol.labels[i]);
            assert_eq!(vol.t1[i], spec.contrast_t1[l] as f32);
            assert_eq!(vol.t2[i], spec.contrast_t2[l] as f32);
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let spec = PhantomSpec::iso_intense([30, 30, 30]);
        assert_eq!(
            generate_phantom(&spec, 1).unwrap_err(),
            PhantomError::Dims([30, 30, 30])
        );
    }

    #[test]
    fn empty_class_is_an_error() {
        let mut spec = small();
        // A brain far larger than the grid leaves no background.
        spec.outer_radius = (3.0, 3.0);
        spec.center_jitter = 0.0;
        assert_eq!(generate_phantom(&spec, 1).unwrap_err(), PhantomError::EmptyClass(0));
    }

    #[test]
    fn all_classes_present_and_in_range() {
        let vol = generate_phantom(&small(), 5).unwrap();
        vol.validate().unwrap();
        assert!(class_counts(&vol.labels, 4).iter().all(|&c| c > 0));
    }

    #[test]
    fn default_contrast_is_iso_intense() {
        let spec = PhantomSpec::default();
        assert!(spec.is_iso_intense());
        assert!(spec.ambiguous_pairs(0).contains(&(2, 3)));
    }

    #[test]
    fn frequencies_of_simple_labels() {
        assert_eq!(class_frequencies(&[0, 1, 2, 3], 4), vec![0.25; 4]);
        assert_eq!(class_frequencies(&[2, 2, 2], 4), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn kv_spec_overrides_defaults() {
        let spec = PhantomSpec::from_kv("dims = 32, 32, 16\nnoise_std = 0.01 # quieter\n").unwrap();
        assert_eq!(spec.dims, [32, 32, 16]);
        assert_eq!(spec.noise_std, 0.01);
        assert!(PhantomSpec::from_kv("bogus = 1").is_err());
    }
}
