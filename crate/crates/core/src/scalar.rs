//! Floating point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Acceptance paths run in `f64`; `f32` exists for compact inference.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short type tag written into checkpoints.
    const NAME: &'static str;

    /// Converts an `f64` literal, rounding to nearest for narrower types.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Exact bit pattern, widened to 64 bits.
    fn to_bits_u64(self) -> u64;

    fn from_bits_u64(bits: u64) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }

    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn lit(x: f64) -> Self {
        x
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_round_trip() {
        for x in [0.0f64, -1.5, 1e-300, f64::MAX] {
            assert_eq!(f64::from_bits_u64(x.to_bits_u64()).to_bits(), x.to_bits());
        }
        for x in [0.0f32, -1.5, 3.25e-20] {
            assert_eq!(f32::from_bits_u64(x.to_bits_u64()).to_bits(), x.to_bits());
        }
    }
}
