use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Errors raised by tensor operations, the tape and the optimizer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: incompatible shapes {}", format_shapes(.shapes))]
    IncompatibleShapes { op: &'static str, shapes: Vec<Shape> },
    #[error("buffer of length {actual} does not fit shape {shape} ({expected} elements)")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("no gradient for trainable tensor `{name}`")]
    MissingGradient { name: String },
    #[error("expected a scalar output, got shape {shape}")]
    NotScalar { shape: Shape },
}

fn format_shapes(shapes: &[Shape]) -> String {
    shapes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Self::Invalid {
            op,
            reason: reason.into(),
        }
    }
}
