use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor: `f32` or `f64`.
///
/// Gradient checking wants `f64`; searches are allowed to run in `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any float")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts to f64")
    }

    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize converts to any float")
    }

    /// Short name used in reports and manifests.
    fn precision_name() -> &'static str;
}

impl Scalar for f32 {
    fn precision_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    fn precision_name() -> &'static str {
        "f64"
    }
}
