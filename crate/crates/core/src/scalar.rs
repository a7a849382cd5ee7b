//! Scalar abstraction so every numeric path compiles at both `f32` and `f64`.
//!
//! Training runs at `f32` (the checkpoint wire format is float32, so parameters
//! round-trip losslessly), while all finite-difference verification instantiates
//! the identical code at `f64`. Keeping one generic implementation means the
//! gradients being verified are the gradients being trained.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StandardUniform};

/// Floating-point element type usable throughout tape, model, and losses.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` (exact for `f64`, rounded for `f32`).
    fn from_f64_c(x: f64) -> Self;
    /// Widening conversion to `f64` (always exact).
    fn to_f64_c(self) -> f64;
    /// One standard-normal draw.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One uniform draw in `[0, 1)`.
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64_c(x: f64) -> Self {
        x as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardUniform.sample(rng)
    }
}

impl Scalar for f64 {
    fn from_f64_c(x: f64) -> Self {
        x
    }
    fn to_f64_c(self) -> f64 {
        self
    }
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardUniform.sample(rng)
    }
}

/// Shorthand for writing literal constants in generic code: `c::<T>(0.5)`.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64_c(x)
}
