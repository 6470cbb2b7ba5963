//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point type the models are generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// One standard normal draw.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Natural log of the gamma function.
    fn lgamma(self) -> Self;

    /// Lossy conversion from `f64`; used for literals.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Tolerance for iterative solvers, scaled to the type's precision.
    fn solver_tol() -> Self;
}

macro_rules! impl_real {
    ($t:ty, $tol:expr) => {
        impl Real for $t {
            #[inline]
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }

            fn lgamma(self) -> Self {
                statrs::function::gamma::ln_gamma(self as f64) as $t
            }

            #[inline]
            fn lit(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn solver_tol() -> Self {
                $tol
            }
        }
    };
}

impl_real!(f32, 1e-5);
impl_real!(f64, 1e-11);

/// Dot product of two equally long slices.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
