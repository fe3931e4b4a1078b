//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Geometry, the neural prior, the losses and the metrics are all written
//! against [`Real`] so the same code runs in `f64` (the default, used for
//! optimization and gradient checks) and `f32` (the on-disk width).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar usable throughout the crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tolerance used when validating rotation matrices.
    const ORTHO_TOL: f64;

    /// Lossy conversion from an `f64` literal or config value.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f64 {
    const ORTHO_TOL: f64 = 1e-9;
}

impl Real for f32 {
    const ORTHO_TOL: f64 = 1e-5;
}
