//! Skewed and uniform index samplers.
//!
//! Ranks are 1-based: rank `r` out of `n` is drawn with probability
//! `r^-alpha / H(n, alpha)`. Up to [`TABLE_LIMIT`] ranks the sampler
//! inverts an exact cumulative table; above it rejection sampling from
//! `rand_distr` is used so memory stays bounded.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;

pub const TABLE_LIMIT: u64 = 10_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplerError {
    #[error("the index range must contain at least one element")]
    Empty,
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
}

#[derive(Clone, Debug)]
enum Inner {
    Uniform,
    Table(Arc<[f64]>),
    Rejection(rand_distr::Zipf<f64>),
}

/// Shareable description of an index distribution over ranks `1..=n`.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: u64,
    inner: Inner,
}

impl Sampler {
    pub fn uniform(n: u64) -> Result<Sampler, SamplerError> {
        if n == 0 {
            return Err(SamplerError::Empty);
        }
        Ok(Sampler {
            n,
            inner: Inner::Uniform,
        })
    }

    pub fn zipf(n: u64, alpha: f64) -> Result<Sampler, SamplerError> {
        if n == 0 {
            return Err(SamplerError::Empty);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SamplerError::BadAlpha(alpha));
        }
        let inner = if n <= TABLE_LIMIT {
            Inner::Table(cumulative(n, alpha).into())
        } else {
            Inner::Rejection(rand_distr::Zipf::new(n as f64, alpha).expect("validated parameters"))
        };
        Ok(Sampler { n, inner })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Draws a rank in `1..=n`.
    pub fn rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.inner {
            Inner::Uniform => rng.random_range(1..=self.n),
            Inner::Table(cdf) => {
                let u: f64 = rng.random();
                let i = cdf.partition_point(|&c| c <= u);
                (i as u64).min(self.n - 1) + 1
            }
            Inner::Rejection(z) => (z.sample(rng) as u64).clamp(1, self.n),
        }
    }

    /// Deterministic stream of ranks for `seed`.
    pub fn stream(&self, seed: u64) -> Stream {
        Stream {
            sampler: self.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn cumulative(n: u64, alpha: f64) -> Vec<f64> {
    let mut cdf = Vec::with_capacity(n as usize);
    let mut acc = 0.0f64;
    for r in 1..=n {
        acc += (r as f64).powf(-alpha);
        cdf.push(acc);
    }
    let total = acc;
    for c in &mut cdf {
        *c /= total;
    }
    cdf
}

pub struct Stream {
    sampler: Sampler,
    rng: ChaCha8Rng,
}

impl Iterator for Stream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        Some(self.sampler.rank(&mut self.rng))
    }
}

/// Ranks drawn from a Zipf(`alpha`) distribution over `1..=n`.
pub fn zipf_sampler(n: u64, alpha: f64, seed: u64) -> Result<Stream, SamplerError> {
    Ok(Sampler::zipf(n, alpha)?.stream(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rank() {
        assert!(zipf_sampler(1, 1.0, 3).unwrap().take(1000).all(|r| r == 1));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(Sampler::zipf(0, 1.0).unwrap_err(), SamplerError::Empty);
        assert!(matches!(Sampler::zipf(5, 0.0), Err(SamplerError::BadAlpha(_))));
        assert!(matches!(Sampler::zipf(5, f64::NAN), Err(SamplerError::BadAlpha(_))));
        assert_eq!(Sampler::uniform(0).unwrap_err(), SamplerError::Empty);
    }

    #[test]
    fn table_is_monotone_and_ends_at_one() {
        let cdf = cumulative(1000, 0.8);
        assert!(cdf.windows(2).all(|w| w[0] < w[1]));
        assert!((cdf[999] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_range_uses_rejection_within_bounds() {
        let s = Sampler::zipf(TABLE_LIMIT + 5, 1.0).unwrap();
        assert!(matches!(s.inner, Inner::Rejection(_)));
        let ranks: Vec<u64> = s.stream(1).take(10_000).collect();
        assert!(ranks.iter().all(|&r| (1..=TABLE_LIMIT + 5).contains(&r)));
        let ones = ranks.iter().filter(|&&r| r == 1).count();
        // p1 = 1 / H(1e7) ~ 0.0595
        assert!((400..800).contains(&ones), "{ones}");
    }
}
