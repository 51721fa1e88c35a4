//! Scalar abstraction for the closed-form kernels.

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point scalar the special-function kernels are written against.
///
/// `f32` is good enough for plotting-grade evaluation; every tolerance in the
/// solver layer assumes `f64`.
pub trait Scalar: Float + FloatConst + FromPrimitive + std::fmt::Debug + 'static {
    /// Lossless embedding of a small integer constant.
    fn of(x: i32) -> Self {
        Self::from_i32(x).expect("small integer fits any float")
    }

    /// Nearest representable value of an `f64` constant.
    fn of_f64(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
