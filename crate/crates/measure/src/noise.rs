//! Discrete Laplace noise, optionally truncated to a finite support, plus
//! the threshold arithmetic used by key discovery.
//!
//! The pmf is proportional to e^{-a|x|}; truncation restricts the support
//! to [-tau, tau] and renormalizes. Thresholding a noisy count at tau turns
//! "was this key present at all" into an event with probability at most the
//! delta computed here, which is what the tail helpers are for.

use rand::Rng;
use thiserror::Error;

use crate::kahan::KahanSum;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("scale parameter must be finite and positive, got {0}")]
    InvalidScale(f64),
    #[error("truncation bound must be at least 1, got {0}")]
    InvalidTruncation(u64),
    #[error("epsilon must be finite and positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("delta must lie in [0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("budget parameters must be at least 1")]
    InvalidBudget,
    #[error("threshold does not fit in u64 for these parameters")]
    ThresholdOverflow,
    #[error("operation requires a truncated distribution")]
    RequiresTruncated,
    #[error("tail shift must satisfy 1 <= shift <= 2*tau, got {0}")]
    InvalidTailShift(u64),
}

/// Discrete Laplace distribution with scale `a`, truncated to
/// [-tau, tau] when `tau` is finite (`Some`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DLap {
    a: f64,
    tau: Option<u64>,
    /// Cached normalizer: sum of e^{-a|x|} over the support.
    z: f64,
}

impl DLap {
    pub fn new(a: f64, tau: Option<u64>) -> Result<DLap, NoiseError> {
        if !a.is_finite() || a <= 0.0 {
            return Err(NoiseError::InvalidScale(a));
        }
        if let Some(t) = tau {
            if t == 0 || t > i64::MAX as u64 {
                return Err(NoiseError::InvalidTruncation(t));
            }
        }
        let q = (-a).exp();
        let one_minus_q = -(-a).exp_m1(); // 1 - e^{-a}, accurate for small a
        let z = match tau {
            // 1 + 2 * sum_{x=1..tau} q^x = 1 + 2 q (1 - q^tau) / (1 - q)
            Some(t) => 1.0 + 2.0 * q * (-(-a * t as f64).exp_m1()) / one_minus_q,
            // (1 + q) / (1 - q)
            None => (1.0 + q) / one_minus_q,
        };
        Ok(DLap { a, tau, z })
    }

    pub fn untruncated(a: f64) -> Result<DLap, NoiseError> {
        DLap::new(a, None)
    }

    pub fn truncated(a: f64, tau: u64) -> Result<DLap, NoiseError> {
        DLap::new(a, Some(tau))
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn tau(&self) -> Option<u64> {
        self.tau
    }

    /// Support bounds, `None` for the untruncated distribution.
    pub fn support(&self) -> Option<(i64, i64)> {
        self.tau.map(|t| (-(t as i64), t as i64))
    }

    fn in_support(&self, x: i64) -> bool {
        match self.tau {
            Some(t) => x.unsigned_abs() <= t,
            None => true,
        }
    }

    /// Probability mass at `x`; zero outside the support.
    pub fn pmf(&self, x: i64) -> f64 {
        if !self.in_support(x) {
            return 0.0;
        }
        (-self.a * x.unsigned_abs() as f64).exp() / self.z
    }

    /// Pr[X > t], exact up to f64 rounding.
    pub fn tail_above(&self, t: i64) -> f64 {
        match self.tau {
            Some(tau) => {
                let tau = tau as i64;
                if t >= tau {
                    return 0.0;
                }
                if t < -tau {
                    return 1.0;
                }
                // Sum from the far (small-mass) end so compensation has
                // the easy job of adding small terms into small sums.
                let mut acc = KahanSum::new();
                for x in (t + 1..=tau).rev() {
                    acc.add((-self.a * x.unsigned_abs() as f64).exp());
                }
                acc.value() / self.z
            }
            None => {
                if t >= 0 {
                    // sum_{x > t} q^x / z = q^{t+1} / (1 - q) / z
                    let q = (-self.a).exp();
                    (-self.a * (t + 1) as f64).exp() / (1.0 - q) / self.z
                } else {
                    // By symmetry Pr[X <= t] = Pr[X >= -t] for t < 0.
                    1.0 - self.tail_above(-t - 1)
                }
            }
        }
    }

    /// Draw one sample. Truncated: inverse CDF over the finite support.
    /// Untruncated: difference of two geometric draws, which has exactly
    /// this two-sided distribution.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> i64 {
        match self.tau {
            Some(tau) => {
                let tau = tau as i64;
                let u: f64 = rng.random();
                let mut cum = KahanSum::new();
                for x in -tau..=tau {
                    cum.add((-self.a * x.unsigned_abs() as f64).exp() / self.z);
                    if cum.value() > u {
                        return x;
                    }
                }
                tau
            }
            None => {
                let g1 = sample_geometric(self.a, rng);
                let g2 = sample_geometric(self.a, rng);
                g1 - g2
            }
        }
    }
}

/// Geometric on {0, 1, ...} with success probability 1 - e^{-a}, via
/// inversion: floor(ln U / ln q) for U uniform on (0, 1].
fn sample_geometric<R: Rng>(a: f64, rng: &mut R) -> i64 {
    let u = 1.0 - rng.random::<f64>(); // (0, 1]
    (u.ln() / (-a)).floor() as i64
}

/// Release threshold for key discovery: the smallest integer tau with
/// tau >= A1 * (1 + ln(A0/delta) / eps), or `None` (no thresholding,
/// untruncated noise) when delta = 0.
///
/// Computed as ln(A0) - ln(delta) rather than ln(A0/delta) so that exact
/// boundary cases (e.g. delta = e^{-1}) land on the integer instead of one
/// ulp above it.
pub fn compute_tau(a1: u64, a0: u64, eps: f64, delta: f64) -> Result<Option<u64>, NoiseError> {
    if a1 == 0 || a0 == 0 {
        return Err(NoiseError::InvalidBudget);
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(NoiseError::InvalidEpsilon(eps));
    }
    if !delta.is_finite() || !(0.0..=1.0).contains(&delta) {
        return Err(NoiseError::InvalidDelta(delta));
    }
    if delta == 0.0 {
        return Ok(None);
    }
    let t = a1 as f64 * (1.0 + ((a0 as f64).ln() - delta.ln()) / eps);
    if !t.is_finite() || t > i64::MAX as f64 {
        return Err(NoiseError::ThresholdOverflow);
    }
    Ok(Some(t.ceil() as u64))
}

/// Pr[X > tau - shift] for a truncated distribution: the chance that noise
/// alone pushes a sum `shift` below the threshold over it. Requires
/// 1 <= shift <= 2*tau so the event is neither empty nor everything.
pub fn tdlap_tail(p: &DLap, shift: u64) -> Result<f64, NoiseError> {
    let tau = p.tau().ok_or(NoiseError::RequiresTruncated)?;
    if shift == 0 || shift > 2 * tau {
        return Err(NoiseError::InvalidTailShift(shift));
    }
    Ok(p.tail_above(tau as i64 - shift as i64))
}
