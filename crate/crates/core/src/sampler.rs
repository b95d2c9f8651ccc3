//! Shuffled mini-batches of co-registered slices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};
use crate::volume::{extract_slice, Axis, LabeledVolume, VolumeError};

/// SplitMix64 finalizer applied to `seed + stream * golden`. Used to give
/// each epoch, view or worker its own independent RNG stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One mini-batch: `N x 1 x H x W` per modality plus `N*H*W` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    pub t1: Tensor<f32>,
    pub t2: Tensor<f32>,
    pub labels: Vec<u8>,
    /// `(volume index, slice index)` of each sample.
    pub members: Vec<(usize, usize)>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// One-hot `N x L x H x W` target.
    pub fn one_hot(&self, num_classes: usize) -> Tensor<f32> {
        one_hot(&self.labels, self.t1.shape(), num_classes)
    }
}

/// One-hot encodes `labels` laid out as `N x H x W` (channel dim of `shape`
/// is ignored).
pub fn one_hot(labels: &[u8], shape: Shape, num_classes: usize) -> Tensor<f32> {
    let out_shape = Shape::new(shape.n, num_classes, shape.h, shape.w);
    let mut t = Tensor::zeros(out_shape);
    let p = shape.plane();
    let data = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        let (n, px) = (i / p, i % p);
        data[(n * num_classes + usize::from(l)) * p + px] = 1.0;
    }
    t
}

/// Epoch-wise shuffled batches over every `(volume, slice)` pair along one axis.
pub struct BatchSampler<'a> {
    volumes: &'a [LabeledVolume],
    axis: Axis,
    batch_size: usize,
    seed: u64,
    geometry: (usize, usize),
}

impl<'a> BatchSampler<'a> {
    pub fn new(volumes: &'a [LabeledVolume], axis: Axis, batch_size: usize, seed: u64) -> Result<Self, VolumeError> {
        let first = volumes
            .first()
            .ok_or_else(|| VolumeError::Invalid("no volumes to sample from".into()))?;
        if batch_size == 0 {
            return Err(VolumeError::Invalid("batch_size must be >= 1".into()));
        }
        let (_, h, w) = axis.slice_geometry(first.dims);
        for v in volumes {
            let (_, vh, vw) = axis.slice_geometry(v.dims);
            if (vh, vw) != (h, w) {
                return Err(VolumeError::DimMismatch(first.dims, v.dims));
            }
        }
        Ok(Self {
            volumes,
            axis,
            batch_size,
            seed,
            geometry: (h, w),
        })
    }

    pub fn slices_per_epoch(&self) -> usize {
        self.volumes.iter().map(|v| v.slice_count(self.axis)).sum()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.slices_per_epoch().div_ceil(self.batch_size)
    }

    /// Visiting order of epoch `epoch`: a permutation of all pairs that
    /// depends only on `(seed, epoch)`.
    pub fn order(&self, epoch: usize) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .volumes
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.slice_count(self.axis)).map(move |si| (vi, si)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64));
        pairs.shuffle(&mut rng);
        pairs
    }

    /// Batches of epoch `epoch`; the last one may be partial.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = SliceBatch> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<(usize, usize)>> = order.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        chunks.into_iter().map(move |members| self.assemble(members))
    }

    fn assemble(&self, members: Vec<(usize, usize)>) -> SliceBatch {
        let (h, w) = self.geometry;
        let n = members.len();
        let mut t1 = Vec::with_capacity(n * h * w);
        let mut t2 = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n * h * w);
        for &(vi, si) in &members {
            let s = extract_slice(&self.volumes[vi], self.axis, si).expect("index within slice count");
            t1.extend_from_slice(&s.t1);
            t2.extend_from_slice(&s.t2);
            labels.extend_from_slice(&s.labels);
        }
        let shape = Shape::new(n, 1, h, w);
        SliceBatch {
            t1: Tensor::from_vec(shape, t1).expect("batch buffer sized"),
            t2: Tensor::from_vec(shape, t2).expect("batch buffer sized"),
            labels,
            members,
        }
    }
}
