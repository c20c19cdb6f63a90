//! Floating-point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// floating point: f32 or f64
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the value is unrepresentable, which never
    /// happens for the finite constants used in this crate.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable log-softmax of `logits / temperature`.
pub fn log_softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    let max = logits
        .iter()
        .fold(F::neg_infinity(), |m, &z| m.max(z / temperature));
    let lse = logits
        .iter()
        .map(|&z| (z / temperature - max).exp())
        .sum::<F>()
        .ln()
        + max;
    logits.iter().map(|&z| z / temperature - lse).collect()
}

pub fn softmax<F: Scalar>(logits: &[F], temperature: F) -> Vec<F> {
    log_softmax(logits, temperature)
        .into_iter()
        .map(Float::exp)
        .collect()
}
