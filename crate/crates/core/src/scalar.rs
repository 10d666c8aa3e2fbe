//! Floating-point scalar abstraction: the whole engine is generic over `f32`
//! or `f64`. `f64` is the default (gradient checks are decisive there); `f32`
//! trades precision for roughly 2x throughput on wide SIMD.

use num_traits::{Float, NumAssignOps};

pub trait Scalar:
    Float + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
