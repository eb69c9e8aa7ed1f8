//! Floating-point abstraction shared by every numeric module.
//!
//! All model code is written against [`Scalar`] so the same pipeline runs in
//! `f32` (training, extraction) and `f64` (gradient verification).

use ndarray::NdFloat;
use num_traits::FromPrimitive;

pub trait Scalar: NdFloat + FromPrimitive + Default {
    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    fn type_name() -> &'static str;
}

impl Scalar for f32 {
    fn type_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    fn type_name() -> &'static str {
        "f64"
    }
}
