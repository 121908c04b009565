//! Floating-point scalar abstraction shared by every numeric kernel.
//!
//! Transcendental functions are routed through `libm` so results do not
//! depend on the platform's C math library.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type usable by tensors, stage models and the pipeline.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics ("f32" / "f64").
    const NAME: &'static str;

    fn det_exp(self) -> Self;
    fn det_ln(self) -> Self;
    fn det_tanh(self) -> Self;

    /// Lossless widening to f64.
    fn widen(self) -> f64;

    /// Narrowing from f64 (exact when the value came from `widen`).
    fn narrow(v: f64) -> Self;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn det_exp(self) -> Self {
        libm::exp(self)
    }
    fn det_ln(self) -> Self {
        libm::log(self)
    }
    fn det_tanh(self) -> Self {
        libm::tanh(self)
    }
    fn widen(self) -> f64 {
        self
    }
    fn narrow(v: f64) -> Self {
        v
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn det_exp(self) -> Self {
        libm::expf(self)
    }
    fn det_ln(self) -> Self {
        libm::logf(self)
    }
    fn det_tanh(self) -> Self {
        libm::tanhf(self)
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn narrow(v: f64) -> Self {
        v as f32
    }
}
