//! Numeric abstraction for reward and metric arithmetic.
//!
//! Reward aggregation and the clarification metrics only need field
//! operations plus conversion from counts and probabilities, so they are
//! written once over [`Scalar`] and instantiated for `f32`, `f64`, and the
//! exact [`Rational`] type. The rational instantiation is what lets the
//! fixture tests assert values such as `2/3` or a probability-weighted mean
//! with `==` instead of a tolerance.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Exact rational scalar used by the fixture oracles.
pub type Rational = Ratio<i64>;

pub trait Scalar:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Exact conversion of a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Conversion of a probability or score produced by a backend.
    ///
    /// For [`Rational`] this is exact for dyadic inputs (0.25, 0.75, ...)
    /// and a best rational approximation otherwise.
    fn from_real(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::zero)
    }

    fn to_real(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `num / den`, with `0/0` defined as zero.
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Self::zero()
        } else {
            Self::from_count(num) / Self::from_count(den)
        }
    }

    /// Unweighted mean; the empty mean is zero.
    fn mean(values: &[Self]) -> Self {
        if values.is_empty() {
            return Self::zero();
        }
        let sum = values.iter().fold(Self::zero(), |acc, v| acc + *v);
        sum / Self::from_count(values.len())
    }
}

impl<T> Scalar for T where
    T: Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
}
