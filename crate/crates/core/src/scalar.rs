//! Scalar abstraction for the numeric pipeline.
//!
//! Everything downstream of image bytes runs on a floating-point scalar that
//! supports real-field arithmetic (via `nalgebra`) and lossless-enough
//! conversion from `f64` literals (via `num-traits`). `f32` and `f64` are the
//! two intended instantiations; parameter files store `f32` regardless of the
//! in-memory scalar.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the pipeline.
pub trait Scalar:
    nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + std::fmt::Display
{
    /// Widens (or narrows) this scalar to `f64` for reporting and storage.
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }

    /// Machine epsilon of the concrete representation; series cutoffs and
    /// drift limits scale from this so `f32` stays numerically safe.
    fn machine_epsilon() -> Self;
}

impl Scalar for f32 {
    fn machine_epsilon() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    fn machine_epsilon() -> Self {
        f64::EPSILON
    }
}

/// Converts an `f64` constant into the working scalar; shorthand for
/// expression-heavy numeric code.
#[inline]
pub fn s<T: Scalar>(v: f64) -> T {
    <T as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_constants_both_widths() {
        assert_eq!(s::<f64>(0.25), 0.25);
        assert_eq!(s::<f32>(0.25), 0.25f32);
        assert_eq!(0.5f64.to_f64_lossy(), 0.5);
        assert_eq!(0.5f32.to_f64_lossy(), 0.5);
    }
}
