//! Dense tensor algebra with reverse-mode automatic differentiation, an
//! adaptive-moment optimizer, and gradient-verification utilities.
//!
//! Precision is a constructor-time choice: everything is generic over
//! [`Element`], with `f64` used by tests and gradient checks and `f32` by
//! training runs.

mod adam;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand f64 → E conversion for literals and precomputed constants.
pub fn ef<E: Element>(x: f64) -> E {
    E::from_f64(x).expect("finite literal")
}

/// Norms below this are considered degenerate for L2 normalization.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("shape/data length mismatch: shape {shape:?} implies {expected} elements, got {got}")]
    BadLength { shape: Vec<usize>, expected: usize, got: usize },
    #[error("degenerate norm {norm} (<= {eps}) in L2 normalization")]
    DegenerateNorm { norm: f64, eps: f64 },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// Normalize a vector to unit L2 norm. Errors when the norm is at or below
/// `EPS_NORM`.
pub fn l2_normalize<E: Element>(v: &Tensor<E>) -> Result<Tensor<E>, NumericsError> {
    let norm = v
        .data()
        .iter()
        .map(|&x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(NumericsError::NonFinite { context: "l2_normalize" });
    }
    if norm <= EPS_NORM {
        return Err(NumericsError::DegenerateNorm { norm, eps: EPS_NORM });
    }
    let inv = ef::<E>(1.0 / norm);
    Ok(Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * inv).collect()).expect("same length"))
}
