//! Tensor kernels, reverse-mode differentiation and the RMSprop optimizer.
//!
//! Every kernel here is a pure function of its inputs; gradients are
//! computed by replaying a [`Graph`] tape in reverse.

mod graph;
mod ops;
mod optim;

pub use graph::{Gradients, Graph, Var};
pub use ops::*;
pub use optim::{rmsprop_step, OptimizerState, RmsPropConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("target class {class} at pixel {pixel} is out of range for {num_classes} classes")]
    TargetOutOfRange {
        class: u8,
        pixel: usize,
        num_classes: usize,
    },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Self::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// The vector's norm was at or below the tolerance; the input is left as-is.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("degenerate norm {norm:e}")]
pub struct DegenerateNorm {
    pub norm: f64,
}

/// Scales `v` to unit L2 norm.
///
/// When `‖v‖ <= eps` the vector cannot be normalized and [`DegenerateNorm`]
/// is returned instead; the caller still owns the original `v`.
pub fn l2_normalize(v: &[f32], eps: f64) -> Result<Vec<f32>, DegenerateNorm> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm <= eps {
        return Err(DegenerateNorm { norm });
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as f32).collect())
}
