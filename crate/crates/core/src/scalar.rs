//! Scalar abstraction so numerical code can run in f32 or f64.
//!
//! Training uses f64 throughout (gradient checking needs the headroom);
//! inference casts checkpoints down to f32. Everything that computes is
//! generic over [`Scalar`]; concrete aliases live at the crate root.

use num_traits::Float;

/// Floating-point scalar usable in tensors, images and network math.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (used when loading f64 checkpoints as f32).
    fn from_f64_lossy(v: f64) -> Self;
    /// Widening conversion to f64 (used for accumulation and reporting).
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
