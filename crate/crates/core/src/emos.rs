//! Normal EMOS: `N(a0 + a1 f1 + ... + a9 f9, b0 + b1 S^2)` with
//! `a1..a9, b0, b1 >= 0`, fitted by minimizing mean CRPS over a training
//! window.
//!
//! The non-negative coefficients are optimized as squares of unconstrained
//! variables. Member values enter the objective centered on their window
//! means, which decouples the intercept from the slopes; the intercept is
//! mapped back to the uncentered form afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ForecastCase, TrainingWindow, ENSEMBLE_SIZE};
use crate::distributions::{normal_crps_raw, Normal};
use crate::error::{Error, Result};
use crate::float::{compensated_sum, Real};
use crate::optim::NelderMead;

/// Intercept, nine slopes and two variance coefficients.
pub const EMOS_PARAMETERS: usize = ENSEMBLE_SIZE + 2;

/// Fewest cases `fit_emos` accepts by default: ten per free parameter.
pub const EMOS_MIN_CASES: usize = 10 * EMOS_PARAMETERS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmosCoefficients<T> {
    pub a0: T,
    pub a: [T; ENSEMBLE_SIZE],
    pub b0: T,
    pub b1: T,
}

impl<T: Real> EmosCoefficients<T> {
    pub fn satisfies_constraints(&self) -> bool {
        self.a.iter().all(|&a| a >= T::zero()) && self.b0 >= T::zero() && self.b1 >= T::zero()
    }

    pub fn location(&self, members: &[T; ENSEMBLE_SIZE]) -> T {
        self.a0 + self.a.iter().zip(members).map(|(&a, &f)| a * f).sum::<T>()
    }

    pub fn variance(&self, spread: T) -> T {
        self.b0 + self.b1 * spread
    }

    pub fn predict(&self, case: &ForecastCase<T>) -> Result<Normal<T>> {
        predict_emos(self, case)
    }
}

/// Predictive distribution for one case.
pub fn predict_emos<T: Real>(p: &EmosCoefficients<T>, case: &ForecastCase<T>) -> Result<Normal<T>> {
    let var = p.variance(case.ensemble_variance());
    if !(var > T::zero()) {
        return Err(Error::ZeroVariance(var.to_f64().unwrap_or(f64::NAN)));
    }
    Normal::new(p.location(&case.members), var.sqrt())
}

#[derive(Debug, Clone)]
pub struct EmosOptions {
    pub min_cases: usize,
    /// Additional simplex runs started from a random perturbation of the best point.
    pub restarts: usize,
    /// Convergence tolerance on mean CRPS.
    pub tolerance: f64,
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for EmosOptions {
    fn default() -> Self {
        Self {
            min_cases: EMOS_MIN_CASES,
            restarts: 3,
            tolerance: 1e-8,
            max_evals: 20_000,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmosFit<T> {
    pub params: EmosCoefficients<T>,
    pub mean_crps: T,
    /// Mean CRPS at the starting parameters.
    pub initial_crps: T,
    pub evaluations: usize,
    pub converged: bool,
}

struct Prepared<T> {
    centered: Vec<[T; ENSEMBLE_SIZE]>,
    spread: Vec<T>,
    obs: Vec<T>,
    member_means: [T; ENSEMBLE_SIZE],
}

impl<T: Real> Prepared<T> {
    fn new(window: &TrainingWindow<T>) -> Self {
        let n = T::from_usize_lossy(window.len());
        let mut member_means = [T::zero(); ENSEMBLE_SIZE];
        for (k, mm) in member_means.iter_mut().enumerate() {
            *mm = compensated_sum(window.cases.iter().map(|c| c.members[k])) / n;
        }
        let mut centered = Vec::with_capacity(window.len());
        let mut spread = Vec::with_capacity(window.len());
        let mut obs = Vec::with_capacity(window.len());
        for (members, x) in window.pairs() {
            let mut c = [T::zero(); ENSEMBLE_SIZE];
            for k in 0..ENSEMBLE_SIZE {
                c[k] = members[k] - member_means[k];
            }
            centered.push(c);
            spread.push(crate::data::ensemble_variance(members));
            obs.push(x);
        }
        Self {
            centered,
            spread,
            obs,
            member_means,
        }
    }

    /// Mean CRPS at the transformed parameter vector
    /// `[c0, u1..u9, v0, v1]` with `a_k = u_k^2`, `b0 = v0^2`, `b1 = v1^2`.
    fn objective(&self, theta: &[T]) -> T {
        let c0 = theta[0];
        let mut a = [T::zero(); ENSEMBLE_SIZE];
        for k in 0..ENSEMBLE_SIZE {
            a[k] = theta[1 + k].square();
        }
        let b0 = theta[ENSEMBLE_SIZE + 1].square();
        let b1 = theta[ENSEMBLE_SIZE + 2].square();
        let mut total = T::zero();
        for ((c, &s2), &x) in self.centered.iter().zip(&self.spread).zip(&self.obs) {
            let mut mu = c0;
            for k in 0..ENSEMBLE_SIZE {
                mu += a[k] * c[k];
            }
            let var = b0 + b1 * s2;
            if !(var > T::zero()) {
                return T::infinity();
            }
            total += normal_crps_raw(mu, var.sqrt(), x);
        }
        total / T::from_usize_lossy(self.obs.len())
    }

    fn to_params(&self, theta: &[T]) -> EmosCoefficients<T> {
        let mut a = [T::zero(); ENSEMBLE_SIZE];
        for k in 0..ENSEMBLE_SIZE {
            a[k] = theta[1 + k].square();
        }
        let shift: T = a.iter().zip(&self.member_means).map(|(&ak, &m)| ak * m).sum();
        EmosCoefficients {
            a0: theta[0] - shift,
            a,
            b0: theta[ENSEMBLE_SIZE + 1].square(),
            b1: theta[ENSEMBLE_SIZE + 2].square(),
        }
    }
}

/// Fits EMOS coefficients by minimum mean CRPS over `window`.
pub fn fit_emos<T: Real>(window: &TrainingWindow<T>, opts: &EmosOptions) -> Result<EmosFit<T>> {
    if window.len() < opts.min_cases.max(1) {
        return Err(Error::TooFewCases {
            found: window.len(),
            required: opts.min_cases.max(1),
        });
    }
    let prep = Prepared::new(window);
    let n = T::from_usize_lossy(window.len());
    let obs_mean = compensated_sum(prep.obs.iter().copied()) / n;
    let obs_sd = (compensated_sum(prep.obs.iter().map(|&x| (x - obs_mean).square())) / n).sqrt();

    // a0 = mean(obs) - mean(ensemble mean), a_k = 1/9, b0 = b1 = 1;
    // in centered coordinates the intercept is just mean(obs).
    let dim = EMOS_PARAMETERS + 1;
    let mut x0 = vec![T::zero(); dim];
    x0[0] = obs_mean;
    for k in 0..ENSEMBLE_SIZE {
        x0[1 + k] = (T::one() / T::from_usize_lossy(ENSEMBLE_SIZE)).sqrt();
    }
    x0[ENSEMBLE_SIZE + 1] = T::one();
    x0[ENSEMBLE_SIZE + 2] = T::one();
    let mut steps = vec![T::lit(0.1); dim];
    steps[0] = (T::lit(0.25) * obs_sd).max(T::lit(0.5));
    steps[ENSEMBLE_SIZE + 1] = T::lit(0.3);
    steps[ENSEMBLE_SIZE + 2] = T::lit(0.3);

    let nm = NelderMead {
        f_tol: T::lit(opts.tolerance),
        x_tol: T::lit(1e-5),
        max_evals: opts.max_evals,
        ..NelderMead::default()
    };
    let objective = |theta: &[T]| prep.objective(theta);
    let initial_crps = objective(&x0);

    let mut best = nm.minimize(objective, &x0, &steps);
    let mut evaluations = best.evaluations;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let mut start = best.x.clone();
        let mut rsteps = steps.clone();
        for i in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            start[i] += T::lit(0.5 * z) * steps[i];
            rsteps[i] = steps[i] * T::lit(rng.random_range(0.5..1.5));
        }
        let run = nm.minimize(objective, &start, &rsteps);
        evaluations += run.evaluations;
        if run.value < best.value || !best.value.is_finite() {
            best = run;
        }
    }

    if !best.value.is_finite() {
        return Err(Error::Divergence);
    }
    let params = prep.to_params(&best.x);
    if let Some(&s2) = prep.spread.iter().find(|&&s2| !(params.variance(s2) > T::zero())) {
        return Err(Error::ZeroVariance(params.variance(s2).to_f64().unwrap_or(f64::NAN)));
    }
    Ok(EmosFit {
        params,
        mean_crps: best.value,
        initial_crps,
        evaluations,
        converged: best.converged,
    })
}

/// Mean CRPS of `params` over the cases of `window`.
pub fn window_mean_crps<T: Real>(params: &EmosCoefficients<T>, window: &TrainingWindow<T>) -> T {
    let scores: Vec<T> = window
        .pairs()
        .map(|(members, x)| {
            let var = params.variance(crate::data::ensemble_variance(members));
            if var > T::zero() {
                normal_crps_raw(params.location(members), var.sqrt(), x)
            } else {
                T::infinity()
            }
        })
        .collect();
    compensated_sum(scores.iter().copied()) / T::from_usize_lossy(scores.len().max(1))
}
