//! Predictive distributions: normal (EMOS) and common-scale normal mixture
//! (BMA), plus the CRPS of a raw ensemble's empirical CDF.
//!
//! CRPS values are in closed form. For a normal `N(mu, sigma^2)`:
//!
//! ```text
//! CRPS = sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],  z = (x - mu) / sigma
//! ```
//!
//! and for a mixture the kernel form `E|X - x| - 1/2 E|X - X'|` is expanded
//! pairwise with `E|N(m, s^2)| = m (2 Phi(m/s) - 1) + 2 s phi(m/s)`.

use crate::error::{Error, Result};
use crate::float::Real;
use crate::special::{std_normal_cdf, std_normal_pdf, std_normal_quantile};

/// Operations shared by the continuous predictive families.
pub trait Predictive<T: Real> {
    fn pdf(&self, x: T) -> T;
    fn cdf(&self, x: T) -> T;
    /// Inverse CDF; `p` must lie in `(0, 1)`.
    fn quantile(&self, p: T) -> Result<T>;
    fn crps(&self, x: T) -> T;
    fn mean(&self) -> T;

    fn median(&self) -> T {
        self.quantile(T::lit(0.5)).expect("0.5 is inside (0, 1)")
    }

    /// Probability integral transform of an observation.
    fn pit(&self, x: T) -> T {
        self.cdf(x)
    }
}

fn check_probability<T: Real>(p: T) -> Result<()> {
    if p > T::zero() && p < T::one() {
        Ok(())
    } else {
        Err(Error::Domain(p.to_f64().unwrap_or(f64::NAN)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal<T> {
    mu: T,
    sigma: T,
}

impl<T: Real> Normal<T> {
    pub fn new(mu: T, sigma: T) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= T::zero() {
            return Err(Error::InvalidValue(format!("normal requires finite mu and sigma > 0, got ({mu}, {sigma})")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> T {
        self.mu
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }
}

/// CRPS of `N(mu, sigma^2)` at `x`; also valid as `sigma -> 0` where it
/// tends to `|x - mu|`.
#[inline]
pub fn normal_crps_raw<T: Real>(mu: T, sigma: T, x: T) -> T {
    if sigma <= T::zero() {
        return (x - mu).abs();
    }
    let z = (x - mu) / sigma;
    let two = T::lit(2.0);
    sigma * (z * (two * std_normal_cdf(z) - T::one()) + two * std_normal_pdf(z) - T::FRAC_2_SQRT_PI() * T::lit(0.5))
}

pub fn normal_crps<T: Real>(d: &Normal<T>, x: T) -> T {
    normal_crps_raw(d.mu, d.sigma, x)
}

impl<T: Real> Predictive<T> for Normal<T> {
    fn pdf(&self, x: T) -> T {
        std_normal_pdf((x - self.mu) / self.sigma) / self.sigma
    }

    fn cdf(&self, x: T) -> T {
        std_normal_cdf((x - self.mu) / self.sigma)
    }

    fn quantile(&self, p: T) -> Result<T> {
        check_probability(p)?;
        Ok(self.mu + self.sigma * std_normal_quantile(p))
    }

    fn crps(&self, x: T) -> T {
        normal_crps(self, x)
    }

    fn mean(&self) -> T {
        self.mu
    }

    fn median(&self) -> T {
        self.mu
    }
}

/// Mixture of normals sharing one scale `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMixture<T> {
    weights: Vec<T>,
    means: Vec<T>,
    sigma: T,
}

impl<T: Real> NormalMixture<T> {
    pub fn new(weights: Vec<T>, means: Vec<T>, sigma: T) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::InvalidValue(format!(
                "mixture needs matching nonempty weights and means ({} vs {})",
                weights.len(),
                means.len()
            )));
        }
        if !sigma.is_finite() || sigma <= T::zero() {
            return Err(Error::InvalidValue(format!("mixture sigma must be > 0, got {sigma}")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(Error::InvalidValue("mixture weights must be finite and >= 0".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidValue("mixture means must be finite".into()));
        }
        let total: T = weights.iter().copied().sum();
        let tol = T::lit(1e-12).max(T::epsilon() * T::from_usize_lossy(8 * weights.len()));
        if (total - T::one()).abs() > tol {
            return Err(Error::InvalidValue(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { weights, means, sigma })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        self.sigma.square()
            + self
                .weights
                .iter()
                .zip(&self.means)
                .map(|(&w, &mu)| w * (mu - m).square())
                .sum::<T>()
    }
}

/// `E|Y|` for `Y ~ N(m, s^2)`.
#[inline]
fn abs_normal_mean<T: Real>(m: T, s: T) -> T {
    let two = T::lit(2.0);
    let z = m / s;
    m * (two * std_normal_cdf(z) - T::one()) + two * s * std_normal_pdf(z)
}

pub fn mixture_crps<T: Real>(d: &NormalMixture<T>, x: T) -> T {
    let s = d.sigma;
    let s_pair = s * T::SQRT_2();
    let mut first = T::zero();
    for (&w, &mu) in d.weights.iter().zip(&d.means) {
        first += w * abs_normal_mean(x - mu, s);
    }
    let mut second = T::zero();
    let n = d.weights.len();
    for k in 0..n {
        let wk = d.weights[k];
        if wk == T::zero() {
            continue;
        }
        // diagonal term, E|N(0, 2 s^2)|
        second += wk * wk * abs_normal_mean(T::zero(), s_pair);
        for l in (k + 1)..n {
            let wl = d.weights[l];
            second += T::lit(2.0) * wk * wl * abs_normal_mean(d.means[k] - d.means[l], s_pair);
        }
    }
    (first - T::lit(0.5) * second).max(T::zero())
}

impl<T: Real> Predictive<T> for NormalMixture<T> {
    fn pdf(&self, x: T) -> T {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(&w, &mu)| w * std_normal_pdf((x - mu) / self.sigma))
            .sum::<T>()
            / self.sigma
    }

    fn cdf(&self, x: T) -> T {
        let c: T = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(&w, &mu)| w * std_normal_cdf((x - mu) / self.sigma))
            .sum();
        c.min(T::one()).max(T::zero())
    }

    /// Bisection on the CDF, bracketed by `[min mu - 10 sigma, max mu + 10 sigma]`
    /// and widened if `p` falls outside that bracket.
    fn quantile(&self, p: T) -> Result<T> {
        check_probability(p)?;
        let ten = T::lit(10.0);
        let lo_mu = self.means.iter().copied().fold(T::infinity(), T::min);
        let hi_mu = self.means.iter().copied().fold(T::neg_infinity(), T::max);
        let mut lo = lo_mu - ten * self.sigma;
        let mut hi = hi_mu + ten * self.sigma;
        while self.cdf(lo) > p {
            lo = lo - ten * self.sigma;
        }
        while self.cdf(hi) < p {
            hi = hi + ten * self.sigma;
        }
        let ptol = T::lit(1e-11).max(T::epsilon() * T::lit(4.0));
        for _ in 0..300 {
            let mid = T::lit(0.5) * (lo + hi);
            let f = self.cdf(mid);
            if (f - p).abs() <= ptol {
                return Ok(mid);
            }
            if f < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= T::epsilon() * (T::one() + mid.abs()) {
                break;
            }
        }
        Ok(T::lit(0.5) * (lo + hi))
    }

    fn crps(&self, x: T) -> T {
        mixture_crps(self, x)
    }

    fn mean(&self) -> T {
        self.weights.iter().zip(&self.means).map(|(&w, &mu)| w * mu).sum()
    }
}

/// CRPS of the empirical CDF of `members` at `x`, integrating
/// `(F(y) - 1{y >= x})^2` exactly over the piecewise-constant step function.
pub fn ensemble_crps<T: Real>(members: &[T], x: T) -> T {
    let m = members.len();
    if m == 0 {
        return T::nan();
    }
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite members"));
    let mf = T::from_usize_lossy(m);
    // breakpoints: members and the observation, ascending
    let mut total = T::zero();
    let mut below = 0usize; // members <= current left point
    let mut left = sorted[0].min(x);
    let mut i = 0usize;
    let mut obs_passed = false;
    // consume members equal to the left endpoint
    loop {
        while i < m && sorted[i] <= left {
            below += 1;
            i += 1;
        }
        if !obs_passed && x <= left {
            obs_passed = true;
        }
        let next_member = if i < m { Some(sorted[i]) } else { None };
        let next = match (next_member, obs_passed) {
            (Some(s), false) => s.min(x),
            (Some(s), true) => s,
            (None, false) => x,
            (None, true) => break,
        };
        let f = T::from_usize_lossy(below) / mf;
        let ind = if obs_passed { T::one() } else { T::zero() };
        total += (f - ind).square() * (next - left);
        left = next;
    }
    total
}
