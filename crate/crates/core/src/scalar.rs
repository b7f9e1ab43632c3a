//! Element types the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type usable in tensors: `f32` for training, `f64`
/// for gradient verification.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Width tag used in diagnostics ("32bit" / "64bit").
    const WIDTH: &'static str;

    /// Converts an `f64` literal, rounding to nearest for narrower types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Scalar for f32 {
    const WIDTH: &'static str = "32bit";
}

impl Scalar for f64 {
    const WIDTH: &'static str = "64bit";
}
