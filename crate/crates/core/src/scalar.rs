//! Floating point abstraction shared by the quantizer, bound evaluators and engines.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};

/// floating point: f32 or f64
pub trait Scalar: Float + FromPrimitive + NumCast + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Lossless widening used by the wire format.
    fn to_wire(self) -> f64;
    fn from_wire(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_wire(self) -> f64 {
        self as f64
    }
    fn from_wire(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_wire(self) -> f64 {
        self
    }
    fn from_wire(v: f64) -> Self {
        v
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("literal representable in target float")
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub fn norm_inf<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
