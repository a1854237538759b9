use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar used by every numeric routine in the crate: f32 or f64.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless widening used for persistence and reporting.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    /// Conversion from an `f64` literal or computed value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 to scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic sigmoid, computed without overflow for large |x|.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// In-place log-softmax over a slice.
pub fn log_softmax_in_place<S: Scalar>(v: &mut [S]) {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
    for x in v.iter_mut() {
        *x -= lse;
    }
}

pub fn softmax<S: Scalar>(v: &[S]) -> Vec<S> {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: S = out.iter().copied().sum();
    for x in out.iter_mut() {
        *x /= total;
    }
    out
}

pub fn log_softmax<S: Scalar>(v: &[S]) -> Vec<S> {
    let mut out = v.to_vec();
    log_softmax_in_place(&mut out);
    out
}
