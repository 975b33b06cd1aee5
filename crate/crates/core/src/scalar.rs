//! Scalar abstraction for the numeric stack.
//!
//! Every numeric kernel in this crate is generic over [`Scalar`], so the same
//! code runs in `f32` or `f64`. The experiment pipeline instantiates
//! everything at [`crate::Real`] (`f64`).

use ndarray::NdFloat;
use rand::distr::uniform::SampleUniform;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    NdFloat + SampleUniform + Serialize + DeserializeOwned + Default + 'static
{
    /// Draws one standard-normal variate.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Parses the `Display` form back; `Display` on floats emits the
    /// shortest string that round-trips exactly, so parse(format(x)) == x.
    fn parse_str(text: &str) -> Option<Self>;

    /// Shorthand for converting an `f64` constant into this scalar type.
    fn c(value: f64) -> Self {
        Self::from(value).expect("finite constant representable in any float type")
    }
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn parse_str(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn parse_str(text: &str) -> Option<Self> {
        text.parse().ok()
    }
}
