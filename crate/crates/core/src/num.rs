//! Scalar abstraction: every numerical routine in this crate is generic over
//! the floating-point type through [`Scalar`].
//!
//! `f64` is the working type for studies; `f32` stays available for quick
//! smoke runs. Concrete aliases for the main data types live at the crate
//! root.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64` literals and intermediate values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any supported scalar")
    }

    /// Conversion back to `f64` for reporting and serialization.
    fn to_f64x(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Conversion from `usize` counters (sample sizes, node counts).
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize fits in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
