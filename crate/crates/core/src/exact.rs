//! Numeric abstraction shared by the floating-point and exact rational paths.
//!
//! The closed forms in [`crate::stationary`] and [`crate::whittle`] are written
//! once over [`Scalar`] and evaluated either in `f64` or in [`BigRational`].
//! Every probability that appears is a polynomial in `1/R`, so the rational
//! evaluation is exact and ties can be decided without tolerance.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub trait Scalar:
    Clone
    + Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_int(v: i64) -> Self;

    fn ratio(num: i64, den: i64) -> Self {
        Self::from_int(num) / Self::from_int(den)
    }

    /// Exact conversion of a finite `f64`.
    fn from_f64(v: f64) -> Self;

    fn to_f64(&self) -> f64;

    fn powi(&self, exp: u32) -> Self {
        num_traits::pow(self.clone(), exp as usize)
    }
}

impl Scalar for f64 {
    fn from_int(v: i64) -> Self {
        v as f64
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(&self) -> f64 {
        *self
    }

    fn powi(&self, exp: u32) -> Self {
        f64::powi(*self, exp as i32)
    }
}

impl Scalar for BigRational {
    fn from_int(v: i64) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }

    fn ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    fn from_f64(v: f64) -> Self {
        BigRational::from_float(v).expect("finite weight")
    }

    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

pub fn to_f64_vec<T: Scalar>(values: &[T]) -> Vec<f64> {
    values.iter().map(Scalar::to_f64).collect()
}
