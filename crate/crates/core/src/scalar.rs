//! Floating-point scalar abstraction shared by the encoder, the losses and
//! the evaluation math.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A real scalar usable for parameters, embeddings and losses.
///
/// Implemented for `f32` and `f64`. Text encodings go through `Display` /
/// `FromStr`, which round-trip bit-exactly for both types.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Display
    + Debug
    + FromStr
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable as float")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Raw bit pattern widened to 64 bits, used for checksums.
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Dot product of two equal-length slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Euclidean norm.
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
