//! Scalar abstraction used by every numerical routine in this crate.
//!
//! All solvers are written against [`Real`] so they can run in `f32` or
//! `f64`. The crate root exports `f64` aliases for the common types; `f64`
//! is what the command line tool and the tight default tolerances assume.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating point scalar with the conversions and constants the solvers need.
pub trait Real:
    Float
    + FloatConst
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal. Panics only if the target
    /// type cannot represent any nearby value, which cannot happen for the
    /// finite literals used in this crate.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable in scalar type")
    }

    /// One full turn, `2*pi`.
    fn two_pi() -> Self {
        Self::PI() + Self::PI()
    }
}

impl Real for f32 {}
impl Real for f64 {}
