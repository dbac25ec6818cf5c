//! Scalar abstraction: every numeric kernel in this crate is generic over
//! `Scalar`, so the same code path runs in f32 for training speed and in f64
//! for finite-difference gradient verification.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Send + Sync + std::fmt::Debug + 'static
{
    fn of_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn of_f32(x: f32) -> Self;
    fn to_f32_(self) -> f32;
}

impl Scalar for f32 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn of_f32(x: f32) -> Self {
        x
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64_(self) -> f64 {
        self
    }
    #[inline(always)]
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    #[inline(always)]
    fn to_f32_(self) -> f32 {
        self as f32
    }
}
