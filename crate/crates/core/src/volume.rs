//! Labeled two-modality volumes, view slicing and the `.ivol` file format.
//!
//! Volumes are stored `[d][h][w]` row-major. Slicing conventions:
//!
//! | axis     | fixed index | slice rows | slice cols |
//! |----------|-------------|------------|------------|
//! | axial    | d (axis 0)  | h          | w          |
//! | coronal  | h (axis 1)  | d          | w          |
//! | sagittal | w (axis 2)  | d          | h          |

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VOLUME_MAGIC: &str = "IVOL1";
pub const LABELS_MAGIC: &str = "ILBL1";

/// Upper bound on voxels per volume accepted by the reader.
pub const MAX_VOXELS: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn index(self) -> usize {
        match self {
            Axis::Axial => 0,
            Axis::Coronal => 1,
            Axis::Sagittal => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }

    /// `(slice count, slice height, slice width)` for a `[d, h, w]` volume.
    pub fn slice_geometry(self, dims: [usize; 3]) -> (usize, usize, usize) {
        let [d, h, w] = dims;
        match self {
            Axis::Axial => (d, h, w),
            Axis::Coronal => (h, d, w),
            Axis::Sagittal => (w, d, h),
        }
    }

    /// Flat volume index of pixel `(row, col)` in slice `index`.
    pub fn voxel(self, dims: [usize; 3], index: usize, row: usize, col: usize) -> usize {
        let [_, h, w] = dims;
        let (z, y, x) = match self {
            Axis::Axial => (index, row, col),
            Axis::Coronal => (row, index, col),
            Axis::Sagittal => (row, col, index),
        };
        (z * h + y) * w + x
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axial" | "0" => Ok(Axis::Axial),
            "coronal" | "1" => Ok(Axis::Coronal),
            "sagittal" | "2" => Ok(Axis::Sagittal),
            other => Err(format!("unknown axis `{other}` (expected axial, coronal or sagittal)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected `{expected}`, found `{found}`")]
    BadMagic { expected: &'static str, found: String },
    #[error("truncated payload: header implies {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dims {dims:?} overflow the supported voxel count")]
    DimOverflow { dims: [usize; 3] },
    #[error("malformed header: {0}")]
    Malformed(String),
    #[error("{0}")]
    Invalid(String),
    #[error("slice index {index} out of range for {axis} axis with {count} slices")]
    SliceOutOfRange { axis: Axis, index: usize, count: usize },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Co-registered T1/T2 intensities and integer labels on one voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub t1: Vec<f32>,
    pub t2: Vec<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub seed: u64,
    pub spec_id: String,
}

impl LabeledVolume {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let n = checked_voxels(self.dims)?;
        if self.t1.len() != n || self.t2.len() != n || self.labels.len() != n {
            return Err(VolumeError::Invalid(format!(
                "buffers ({}, {}, {}) do not match dims {:?}",
                self.t1.len(),
                self.t2.len(),
                self.labels.len(),
                self.dims
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| usize::from(l) >= self.num_classes) {
            return Err(VolumeError::Invalid(format!(
                "label {l} outside 0..{}",
                self.num_classes
            )));
        }
        if self.t1.iter().chain(&self.t2).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VolumeError::Invalid("intensity outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn slice_count(&self, axis: Axis) -> usize {
        axis.slice_geometry(self.dims).0
    }
}

/// One 2D cut through a [`LabeledVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSlice {
    pub height: usize,
    pub width: usize,
    pub t1: Vec<f32>,
    pub t2: Vec<f32>,
    pub labels: Vec<u8>,
}

fn gather<V: Copy>(src: &[V], dims: [usize; 3], axis: Axis, index: usize) -> Vec<V> {
    let (_, h, w) = axis.slice_geometry(dims);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(src[axis.voxel(dims, index, r, c)]);
        }
    }
    out
}

fn scatter<V: Copy>(dst: &mut [V], dims: [usize; 3], axis: Axis, index: usize, values: &[V]) {
    let (_, h, w) = axis.slice_geometry(dims);
    for r in 0..h {
        for c in 0..w {
            dst[axis.voxel(dims, index, r, c)] = values[r * w + c];
        }
    }
}

pub fn extract_slice(vol: &LabeledVolume, axis: Axis, index: usize) -> Result<VolumeSlice, VolumeError> {
    let (count, height, width) = axis.slice_geometry(vol.dims);
    if index >= count {
        return Err(VolumeError::SliceOutOfRange { axis, index, count });
    }
    Ok(VolumeSlice {
        height,
        width,
        t1: gather(&vol.t1, vol.dims, axis, index),
        t2: gather(&vol.t2, vol.dims, axis, index),
        labels: gather(&vol.labels, vol.dims, axis, index),
    })
}

/// Reassembles a volume from every slice along `axis` (inverse of
/// [`extract_slice`]). Metadata is copied from `template`.
pub fn stack_slices(
    template: &LabeledVolume,
    axis: Axis,
    slices: &[VolumeSlice],
) -> Result<LabeledVolume, VolumeError> {
    let (count, h, w) = axis.slice_geometry(template.dims);
    if slices.len() != count {
        return Err(VolumeError::Invalid(format!(
            "expected {count} slices along {axis}, got {}",
            slices.len()
        )));
    }
    let n = template.voxels();
    let mut out = LabeledVolume {
        t1: vec![0.0; n],
        t2: vec![0.0; n],
        labels: vec![0; n],
        ..template.clone()
    };
    for (i, s) in slices.iter().enumerate() {
        if s.height != h || s.width != w {
            return Err(VolumeError::Invalid(format!(
                "slice {i} is {}x{}, expected {h}x{w}",
                s.height, s.width
            )));
        }
        scatter(&mut out.t1, template.dims, axis, i, &s.t1);
        scatter(&mut out.t2, template.dims, axis, i, &s.t2);
        scatter(&mut out.labels, template.dims, axis, i, &s.labels);
    }
    Ok(out)
}

/// Labels of slice `index` along `axis` for a bare label grid.
pub fn label_slice(labels: &[u8], dims: [usize; 3], axis: Axis, index: usize) -> Vec<u8> {
    gather(labels, dims, axis, index)
}

/// Writes `values` into slice `index` along `axis` of a flat `D x H x W` grid.
pub fn scatter_slice<V: Copy>(dst: &mut [V], dims: [usize; 3], axis: Axis, index: usize, values: &[V]) {
    scatter(dst, dims, axis, index, values)
}

fn checked_voxels(dims: [usize; 3]) -> Result<usize, VolumeError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or(VolumeError::DimOverflow { dims })
}

// ---------------------------------------------------------------------------
// file format

/// Header fields shared by full volumes and label-only files.
#[derive(Debug, Clone, PartialEq)]
struct Header {
    magic: &'static str,
    dims: [usize; 3],
    voxel_size: [f64; 3],
    num_classes: usize,
    seed: u64,
    spec_id: String,
    little_endian: bool,
}

fn write_header(out: &mut Vec<u8>, h: &Header) {
    let dtype = if h.magic == VOLUME_MAGIC {
        "t1=f32 t2=f32 labels=u8"
    } else {
        "labels=u8"
    };
    let text = format!(
        "{magic}\ndims {d} {hh} {w}\nvoxel_size {vx} {vy} {vz}\ndtype {dtype}\nendian little\naxes axial=0 coronal=1 sagittal=2\nnum_classes {nc}\nseed {seed}\nspec {spec}\n\n",
        magic = h.magic,
        d = h.dims[0],
        hh = h.dims[1],
        w = h.dims[2],
        vx = h.voxel_size[0],
        vy = h.voxel_size[1],
        vz = h.voxel_size[2],
        nc = h.num_classes,
        seed = h.seed,
        spec = if h.spec_id.is_empty() { "-" } else { &h.spec_id },
    );
    out.extend_from_slice(text.as_bytes());
}

/// Splits `bytes` at the first blank line and parses the header text.
fn read_header<'a>(bytes: &'a [u8], expected: &'static str) -> Result<(Header, &'a [u8]), VolumeError> {
    let first_line_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let found = String::from_utf8_lossy(&bytes[..first_line_end.min(16)])
        .trim()
        .to_string();
    if found != expected {
        return Err(VolumeError::BadMagic { expected, found });
    }
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| VolumeError::Malformed("header not terminated by a blank line".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| VolumeError::Malformed("header is not UTF-8".into()))?;
    let payload = &bytes[end + 2..];

    let mut header = Header {
        magic: expected,
        dims: [0; 3],
        voxel_size: [1.0; 3],
        num_classes: 0,
        seed: 0,
        spec_id: String::new(),
        little_endian: true,
    };
    let mut seen_dims = false;
    for line in text.lines().skip(1) {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        let bad = |what: &str| VolumeError::Malformed(format!("bad `{what}` line: {line}"));
        match key {
            "dims" => {
                if rest.len() != 3 {
                    return Err(bad("dims"));
                }
                for (slot, v) in header.dims.iter_mut().zip(&rest) {
                    *slot = v.parse().map_err(|e: std::num::ParseIntError| match e.kind() {
                        std::num::IntErrorKind::PosOverflow => VolumeError::DimOverflow { dims: [usize::MAX; 3] },
                        _ => bad("dims"),
                    })?;
                }
                seen_dims = true;
            }
            "voxel_size" => {
                if rest.len() != 3 {
                    return Err(bad("voxel_size"));
                }
                for (slot, v) in header.voxel_size.iter_mut().zip(&rest) {
                    *slot = v.parse().map_err(|_| bad("voxel_size"))?;
                }
            }
            "endian" => {
                header.little_endian = match rest.first() {
                    Some(&"little") => true,
                    Some(&"big") => false,
                    _ => return Err(bad("endian")),
                }
            }
            "num_classes" => {
                header.num_classes = rest
                    .first()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("num_classes"))?
            }
            "seed" => header.seed = rest.first().and_then(|v| v.parse().ok()).ok_or_else(|| bad("seed"))?,
            "spec" => {
                let s = rest.join(" ");
                header.spec_id = if s == "-" { String::new() } else { s };
            }
            // Informational.
            "dtype" | "axes" => {}
            _ => return Err(VolumeError::Malformed(format!("unknown header key `{key}`"))),
        }
    }
    if !seen_dims {
        return Err(VolumeError::Malformed("missing dims".into()));
    }
    Ok((header, payload))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], little: bool) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect()
}

pub fn encode_volume(vol: &LabeledVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.voxels() * 9 + 256);
    write_header(
        &mut out,
        &Header {
            magic: VOLUME_MAGIC,
            dims: vol.dims,
            voxel_size: vol.voxel_size,
            num_classes: vol.num_classes,
            seed: vol.seed,
            spec_id: vol.spec_id.clone(),
            little_endian: true,
        },
    );
    push_f32s(&mut out, &vol.t1);
    push_f32s(&mut out, &vol.t2);
    out.extend_from_slice(&vol.labels);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<LabeledVolume, VolumeError> {
    let (h, payload) = read_header(bytes, VOLUME_MAGIC)?;
    let n = checked_voxels(h.dims)?;
    let expected = n * 9;
    if payload.len() != expected {
        return Err(VolumeError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    let vol = LabeledVolume {
        dims: h.dims,
        voxel_size: h.voxel_size,
        t1: read_f32s(&payload[..4 * n], h.little_endian),
        t2: read_f32s(&payload[4 * n..8 * n], h.little_endian),
        labels: payload[8 * n..].to_vec(),
        num_classes: h.num_classes,
        seed: h.seed,
        spec_id: h.spec_id,
    };
    vol.validate()?;
    Ok(vol)
}

pub fn write_volume(vol: &LabeledVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_atomic(path.as_ref(), &encode_volume(vol))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<LabeledVolume, VolumeError> {
    decode_volume(&fs::read(path)?)
}

/// A bare label grid (predictions or ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub seed: u64,
    pub spec_id: String,
}

impl From<&LabeledVolume> for LabelVolume {
    fn from(v: &LabeledVolume) -> Self {
        Self {
            dims: v.dims,
            voxel_size: v.voxel_size,
            labels: v.labels.clone(),
            num_classes: v.num_classes,
            seed: v.seed,
            spec_id: v.spec_id.clone(),
        }
    }
}

pub fn encode_labels(vol: &LabelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(vol.labels.len() + 256);
    write_header(
        &mut out,
        &Header {
            magic: LABELS_MAGIC,
            dims: vol.dims,
            voxel_size: vol.voxel_size,
            num_classes: vol.num_classes,
            seed: vol.seed,
            spec_id: vol.spec_id.clone(),
            little_endian: true,
        },
    );
    out.extend_from_slice(&vol.labels);
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume, VolumeError> {
    let (h, payload) = read_header(bytes, LABELS_MAGIC)?;
    let n = checked_voxels(h.dims)?;
    if payload.len() != n {
        return Err(VolumeError::Truncated {
            expected: n,
            actual: payload.len(),
        });
    }
    if let Some(&l) = payload.iter().find(|&&l| usize::from(l) >= h.num_classes) {
        return Err(VolumeError::Invalid(format!("label {l} outside 0..{}", h.num_classes)));
    }
    Ok(LabelVolume {
        dims: h.dims,
        voxel_size: h.voxel_size,
        labels: payload.to_vec(),
        num_classes: h.num_classes,
        seed: h.seed,
        spec_id: h.spec_id,
    })
}

pub fn write_labels(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_atomic(path.as_ref(), &encode_labels(vol))
}

/// Reads either a label-only file or the labels of a full volume file.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(VOLUME_MAGIC.as_bytes()) {
        return decode_volume(&bytes).map(|v| LabelVolume::from(&v));
    }
    decode_labels(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), VolumeError> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
