//! Scalar abstraction shared by the numeric kernels.
//!
//! Every routine that only does floating-point arithmetic is written
//! against [`Scalar`], so the same code runs in `f32` and `f64`. The
//! purely algebraic pieces (section rates, the flow-balance residual, the
//! exchange and sequence lemmas) only ask for ring operations and also
//! accept exact types such as `num_rational::Rational64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

/// Floating point type usable by the solver: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal; panics only for values the type cannot hold.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("literal out of range for scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Draws a unit-mean exponential variate, i.e. `|H|^2` for unit-variance
    /// circularly symmetric Gaussian `H`.
    fn sample_exp1<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draws a standard normal variate.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draws from `[0, 1)`.
    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    fn sample_exp1<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Exp1.sample(rng)
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

impl Scalar for f32 {
    fn sample_exp1<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Exp1.sample(rng)
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn sample_unit<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se<S: Scalar>(values: &[S]) -> (S, S) {
    let n = values.len();
    if n == 0 {
        return (S::zero(), S::zero());
    }
    let count = S::lit(n as f64);
    let mean = values.iter().copied().sum::<S>() / count;
    if n == 1 {
        return (mean, S::zero());
    }
    let var = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / S::lit((n - 1) as f64);
    (mean, (var / count).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_and_se_of_constant_sequence() {
        let (m, se) = mean_and_se(&[2.0f64; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
        assert_eq!(mean_and_se::<f64>(&[]), (0.0, 0.0));
    }

    #[test]
    fn exp1_has_unit_mean_in_both_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let m64: f64 = (0..n).map(|_| f64::sample_exp1(&mut rng)).sum::<f64>() / n as f64;
        let m32: f64 = (0..n).map(|_| f32::sample_exp1(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((m64 - 1.0).abs() < 0.01, "{m64}");
        assert!((m32 - 1.0).abs() < 0.01, "{m32}");
    }
}
