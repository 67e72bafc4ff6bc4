//! Scalar abstraction shared by every numerical module.
//!
//! All math in the crate is written against [`Real`], which is implemented
//! for `f32` and `f64`. Random draws are produced in `f64` and narrowed, so a
//! given seed yields the same stream of decisions for both widths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }

    #[inline]
    fn two() -> Self {
        Self::lit(2.0)
    }

    /// Relative tolerance used to decide that a Gram pivot is numerically zero.
    #[inline]
    fn pivot_tolerance() -> Self {
        Self::epsilon() * Self::lit(64.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// One standard normal draw.
#[inline]
pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(z)
}

/// One uniform draw on `[0, 1)`.
#[inline]
pub fn uniform01<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let u: f64 = rng.random();
    T::lit(u)
}

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Real, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Sample mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub mean: T,
    pub stderr: T,
    pub count: usize,
}

impl<T: Real> Estimate<T> {
    pub fn from_samples(samples: &[T]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self { mean: T::nan(), stderr: T::nan(), count };
        }
        let n = T::of_usize(count);
        let mean = compensated_sum(samples.iter().copied()) / n;
        if count == 1 {
            return Self { mean, stderr: T::zero(), count };
        }
        let ss = compensated_sum(samples.iter().map(|&x| (x - mean) * (x - mean)));
        let var = ss / (n - T::one());
        Self { mean, stderr: (var / n).sqrt(), count }
    }

    /// Unbiased sample variance implied by the standard error.
    pub fn variance(&self) -> T {
        self.stderr * self.stderr * T::of_usize(self.count)
    }

    /// `|mean - target| / stderr`; infinite when the error bar is zero and the
    /// mean is off target.
    pub fn z_score(&self, target: T) -> T {
        let gap = (self.mean - target).abs();
        if self.stderr > T::zero() {
            gap / self.stderr
        } else if gap == T::zero() {
            T::zero()
        } else {
            T::infinity()
        }
    }
}
