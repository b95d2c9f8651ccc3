//! InfiNet: a multi-modal encoder-decoder network for slice-wise volumetric
//! segmentation, trained with a generalized Dice loss and combined across
//! three anatomical views.
//!
//! The crate is self-contained: it carries its own dense tensor type with
//! reverse-mode differentiation ([`autodiff`]), the network definitions
//! ([`model`]), a synthetic two-modality phantom generator ([`phantom`]),
//! the training loop ([`training`]) and multi-view inference ([`inference`]).

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod inference;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod sampler;
pub mod tensor;
pub mod training;
pub mod volume;

pub use autodiff::{BatchNormState, GdlOptions, Gradients, Mode, Tape, Var};
pub use error::{Result, TensorError};
pub use kernels::PoolIndices;
pub use loss::ClassWeights;
pub use model::{build_infinet, build_single_arm, count_parameters, Arch, InfiNet, InfiNetConfig, ModelParameters};
pub use tensor::{Scalar, Shape, Tensor};
