//! Floating-point scalar abstraction. All solvers are generic over [`Scalar`];
//! concrete aliases at the crate root pin `f64` for production use.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + LowerExp + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lossy conversion from `f64` for coefficients and tolerances.
#[inline]
pub fn cast<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 constant not representable in scalar type")
}

/// `x^2`, spelled out to avoid `powi` in hot loops.
#[inline]
pub fn sq<S: Scalar>(x: S) -> S {
    x * x
}
