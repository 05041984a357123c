//! Scalar helpers and seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `x log x` with the convention `0 log 0 = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Bernoulli entropy in nats.
#[inline]
pub fn bernoulli_entropy(p: f64) -> f64 {
    -(xlogx(p) + xlogx(1.0 - p))
}

/// A deterministic generator for substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Poisson draw returned as a float so astronomically large rates are
/// representable; rates beyond the exact sampler's range use the normal
/// approximation, rounded.
pub fn poisson_f64<R: rand::Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 || rate.is_nan() {
        return 0.0;
    }
    if rate.is_infinite() {
        return f64::INFINITY;
    }
    if rate < 1e15 {
        if let Ok(d) = Poisson::new(rate) {
            return d.sample(rng);
        }
    }
    let z = standard_normal(rng);
    (rate + rate.sqrt() * z).round().max(0.0)
}

/// Poisson draw as an integer count, saturating at `u64::MAX`.
pub fn poisson_u64<R: rand::Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    let v = poisson_f64(rng, rate);
    if v >= u64::MAX as f64 {
        u64::MAX
    } else {
        v as u64
    }
}

/// Order-statistic quantile (inverse empirical CDF) of a sorted sample:
/// the smallest value whose empirical CDF reaches `prob`.
pub fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let b = sorted.len();
    let k = ((prob * b as f64).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}
