//! Scalar abstraction for the numeric core.
//!
//! Everything numeric (tensors, autodiff, alignment, merging, metrics) is
//! generic over [`Scalar`]; the crate root exports `*64` aliases pinned to
//! `f64`, which is what the experiment harness uses throughout.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point scalar usable by the numeric core: `f32` or `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; constants and RNG draws come in as `f64`.
    fn from_f64(v: f64) -> Self;

    /// Widening (for `f32`) or identity (for `f64`) conversion to `f64`.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
