use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of tensors. Training runs in `f32`, gradient
/// checks and loop oracles in `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `exp` from libm, identical with and without `std`.
    fn portable_exp(self) -> Self;
    /// `ln` from libm, identical with and without `std`.
    fn portable_ln(self) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn portable_exp(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn portable_ln(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn portable_exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn portable_ln(self) -> Self {
        libm::log(self)
    }
}
