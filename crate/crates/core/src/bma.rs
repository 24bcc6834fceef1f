//! Normal BMA with a common component scale:
//! `p(x) = sum_k w_k N(x; beta0_k + beta1_k f_k, sigma^2)`.
//!
//! Bias coefficients come from per-member least squares of the observation
//! on the member; weights and `sigma` are maximum-likelihood estimates from
//! EM with the bias coefficients held fixed.

use std::fmt;
use std::str::FromStr;

use crate::data::{TrainingWindow, ENSEMBLE_SIZE};
use crate::distributions::NormalMixture;
use crate::error::{Error, Result};
use crate::float::{compensated_sum, Real};
use crate::data::ForecastCase;

/// Nine intercepts, nine slopes, nine weights.
pub const BMA_PARAMETERS: usize = 3 * ENSEMBLE_SIZE;

/// Fewest cases `fit_em` accepts by default: ten per free parameter.
pub const BMA_MIN_CASES: usize = 10 * BMA_PARAMETERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// `beta0_k + beta1_k f_k`, both from least squares.
    #[default]
    Full,
    /// `beta0_k + f_k`.
    Additive,
    /// `f_k` unchanged.
    None,
}

impl fmt::Display for BiasMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasMode::Full => "full",
            BiasMode::Additive => "additive",
            BiasMode::None => "none",
        })
    }
}

impl FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(BiasMode::Full),
            "additive" => Ok(BiasMode::Additive),
            "none" => Ok(BiasMode::None),
            other => Err(Error::Config(format!("unknown bias mode `{other}` (full, additive, none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmaCoefficients<T> {
    pub beta0: [T; ENSEMBLE_SIZE],
    pub beta1: [T; ENSEMBLE_SIZE],
    pub weights: [T; ENSEMBLE_SIZE],
    pub sigma: T,
    pub bias_mode: BiasMode,
}

impl<T: Real> BmaCoefficients<T> {
    pub fn component_means(&self, members: &[T; ENSEMBLE_SIZE]) -> [T; ENSEMBLE_SIZE] {
        let mut mu = [T::zero(); ENSEMBLE_SIZE];
        for k in 0..ENSEMBLE_SIZE {
            mu[k] = self.beta0[k] + self.beta1[k] * members[k];
        }
        mu
    }

    pub fn predict(&self, case: &ForecastCase<T>) -> Result<NormalMixture<T>> {
        predict_bma(self, case)
    }
}

pub fn predict_bma<T: Real>(p: &BmaCoefficients<T>, case: &ForecastCase<T>) -> Result<NormalMixture<T>> {
    NormalMixture::new(p.weights.to_vec(), p.component_means(&case.members).to_vec(), p.sigma)
}

/// Member-wise bias coefficients `(beta0, beta1)` for `mode`.
pub fn fit_bias<T: Real>(window: &TrainingWindow<T>, mode: BiasMode) -> Result<([T; ENSEMBLE_SIZE], [T; ENSEMBLE_SIZE])> {
    let mut beta0 = [T::zero(); ENSEMBLE_SIZE];
    let mut beta1 = [T::one(); ENSEMBLE_SIZE];
    match mode {
        BiasMode::None => {}
        BiasMode::Additive => {
            if window.is_empty() {
                return Err(Error::TooFewCases { found: 0, required: 1 });
            }
            let n = T::from_usize_lossy(window.len());
            for (k, b) in beta0.iter_mut().enumerate() {
                *b = compensated_sum(window.pairs().map(|(m, x)| x - m[k])) / n;
            }
        }
        BiasMode::Full => {
            if window.len() < 2 {
                return Err(Error::TooFewCases {
                    found: window.len(),
                    required: 2,
                });
            }
            let n = T::from_usize_lossy(window.len());
            let x_mean = compensated_sum(window.pairs().map(|(_, x)| x)) / n;
            for k in 0..ENSEMBLE_SIZE {
                let f_mean = compensated_sum(window.pairs().map(|(m, _)| m[k])) / n;
                let sxx = compensated_sum(window.pairs().map(|(m, _)| (m[k] - f_mean).square()));
                let sxy = compensated_sum(window.pairs().map(|(m, x)| (m[k] - f_mean) * (x - x_mean)));
                let scale = T::one().max(f_mean.abs());
                if !(sxx > T::epsilon() * T::lit(64.0) * scale * scale * n) {
                    return Err(Error::DegenerateRegressor { member: k + 1 });
                }
                beta1[k] = sxy / sxx;
                beta0[k] = x_mean - beta1[k] * f_mean;
            }
        }
    }
    Ok((beta0, beta1))
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    pub min_cases: usize,
    /// Stop when the log-likelihood gain of an iteration falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Lower bound applied to every weight before renormalization.
    pub weight_floor: f64,
    /// Lower bound on `sigma`, in kelvin.
    pub sigma_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            min_cases: BMA_MIN_CASES,
            tolerance: 1e-6,
            max_iterations: 500,
            weight_floor: 1e-8,
            sigma_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmState<T> {
    pub weights: [T; ENSEMBLE_SIZE],
    pub sigma: T,
}

/// Output of one E-step plus M-step.
#[derive(Debug, Clone)]
pub struct EmStep<T> {
    /// Log-likelihood of the window under the input state.
    pub log_likelihood: T,
    /// E-step responsibilities, one row per case.
    pub responsibilities: Vec<[T; ENSEMBLE_SIZE]>,
    /// M-step update.
    pub next: EmState<T>,
}

/// One EM iteration for fixed bias coefficients.
pub fn em_step<T: Real>(
    window: &TrainingWindow<T>,
    beta0: &[T; ENSEMBLE_SIZE],
    beta1: &[T; ENSEMBLE_SIZE],
    state: &EmState<T>,
    opts: &EmOptions,
) -> EmStep<T> {
    let half_ln_2pi = T::lit(0.918_938_533_204_672_8);
    let ln_sigma = state.sigma.ln();
    let inv_2var = T::one() / (T::lit(2.0) * state.sigma.square());
    let ln_w: Vec<T> = state.weights.iter().map(|w| w.ln()).collect();

    let mut resp = Vec::with_capacity(window.len());
    let mut ll_terms = Vec::with_capacity(window.len());
    let mut weight_sum = [T::zero(); ENSEMBLE_SIZE];
    let mut sq_sum = T::zero();
    for (members, x) in window.pairs() {
        let mut log_terms = [T::zero(); ENSEMBLE_SIZE];
        let mut sq = [T::zero(); ENSEMBLE_SIZE];
        for k in 0..ENSEMBLE_SIZE {
            let r = x - beta0[k] - beta1[k] * members[k];
            sq[k] = r * r;
            log_terms[k] = ln_w[k] - ln_sigma - half_ln_2pi - sq[k] * inv_2var;
        }
        let max = log_terms.iter().copied().fold(T::neg_infinity(), T::max);
        let denom: T = log_terms.iter().map(|&l| (l - max).exp()).sum();
        let ll = max + denom.ln();
        let mut z = [T::zero(); ENSEMBLE_SIZE];
        for k in 0..ENSEMBLE_SIZE {
            z[k] = (log_terms[k] - ll).exp();
            weight_sum[k] += z[k];
            sq_sum += z[k] * sq[k];
        }
        resp.push(z);
        ll_terms.push(ll);
    }

    let n = T::from_usize_lossy(window.len());
    let floor = T::lit(opts.weight_floor);
    let mut weights = [T::zero(); ENSEMBLE_SIZE];
    for k in 0..ENSEMBLE_SIZE {
        weights[k] = weight_sum[k] / n;
    }
    apply_weight_floor(&mut weights, floor);
    let sigma = (sq_sum / n).sqrt().max(T::lit(opts.sigma_floor));

    EmStep {
        log_likelihood: compensated_sum(ll_terms),
        responsibilities: resp,
        next: EmState { weights, sigma },
    }
}

/// Renormalizes to the simplex with every weight at least `floor`: floored
/// weights sit exactly at `floor` and the rest share the remaining mass
/// in proportion.
fn apply_weight_floor<T: Real>(weights: &mut [T; ENSEMBLE_SIZE], floor: T) {
    let mut pinned = [false; ENSEMBLE_SIZE];
    loop {
        let n_pinned = T::from_usize_lossy(pinned.iter().filter(|&&p| p).count());
        let free_mass = T::one() - n_pinned * floor;
        let free_total: T = weights.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(&w, _)| w).sum();
        let mut changed = false;
        for k in 0..ENSEMBLE_SIZE {
            if pinned[k] {
                weights[k] = floor;
            } else {
                weights[k] = weights[k] / free_total * free_mass;
                if weights[k] < floor {
                    pinned[k] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit<T> {
    pub weights: [T; ENSEMBLE_SIZE],
    pub sigma: T,
    /// Log-likelihood at the start of each iteration, ending with the
    /// returned state's value.
    pub log_likelihood: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood weights and common scale for fixed bias coefficients.
///
/// Starts from uniform weights and `sigma` equal to the standard deviation
/// of `obs - ensemble mean`. Reaching the iteration cap is not an error;
/// the last state is returned with `converged = false`.
pub fn fit_em<T: Real>(
    window: &TrainingWindow<T>,
    beta0: &[T; ENSEMBLE_SIZE],
    beta1: &[T; ENSEMBLE_SIZE],
    opts: &EmOptions,
) -> Result<EmFit<T>> {
    let required = opts.min_cases.max(1);
    if window.len() < required {
        return Err(Error::TooFewCases {
            found: window.len(),
            required,
        });
    }
    let n = T::from_usize_lossy(window.len());
    let resid: Vec<T> = window.pairs().map(|(m, x)| x - crate::data::ensemble_mean(m)).collect();
    let r_mean = compensated_sum(resid.iter().copied()) / n;
    let sd = (compensated_sum(resid.iter().map(|&r| (r - r_mean).square())) / n).sqrt();
    let mut state = EmState {
        weights: [T::one() / T::from_usize_lossy(ENSEMBLE_SIZE); ENSEMBLE_SIZE],
        sigma: sd.max(T::lit(1e-3)),
    };

    let tol = T::lit(opts.tolerance);
    let mut trace: Vec<T> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let step = em_step(window, beta0, beta1, &state, opts);
        if let Some(&prev) = trace.last() {
            if step.log_likelihood - prev < tol {
                trace.push(step.log_likelihood);
                converged = true;
                break;
            }
        }
        trace.push(step.log_likelihood);
        state = step.next;
        iterations += 1;
    }
    if !converged {
        let last = em_step(window, beta0, beta1, &state, opts);
        trace.push(last.log_likelihood);
        log::debug!(
            "EM reached {} iterations without converging (window {} {:02}UTC)",
            opts.max_iterations,
            window.target_date,
            window.hour
        );
    }
    Ok(EmFit {
        weights: state.weights,
        sigma: state.sigma,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct BmaFit<T> {
    pub params: BmaCoefficients<T>,
    pub em: EmFit<T>,
}

/// Bias regression followed by EM.
pub fn fit_bma<T: Real>(window: &TrainingWindow<T>, mode: BiasMode, opts: &EmOptions) -> Result<BmaFit<T>> {
    let required = opts.min_cases.max(1);
    if window.len() < required {
        return Err(Error::TooFewCases {
            found: window.len(),
            required,
        });
    }
    let (beta0, beta1) = fit_bias(window, mode)?;
    let em = fit_em(window, &beta0, &beta1, opts)?;
    Ok(BmaFit {
        params: BmaCoefficients {
            beta0,
            beta1,
            weights: em.weights,
            sigma: em.sigma,
            bias_mode: mode,
        },
        em,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Days, NaiveDate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn target() -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, 1, 1).unwrap()
    }

    fn window_from(cases: Vec<([f64; 9], f64)>) -> TrainingWindow<f64> {
        let d = target() - Days::new(1);
        let cases = cases
            .into_iter()
            .enumerate()
            .map(|(i, (m, x))| ForecastCase::new(d, 0, i as u32, m, Some(x)).unwrap())
            .collect();
        TrainingWindow::new(target(), 0, 1, cases).unwrap()
    }

    #[test]
    fn bias_perfect_member_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases: Vec<_> = (0..50)
            .map(|_| {
                let mut m = [0.0; 9];
                for v in m.iter_mut() {
                    *v = rng.random_range(270.0..300.0);
                }
                (m, m[2])
            })
            .collect();
        let w = window_from(cases.clone());
        let (b0, b1) = fit_bias(&w, BiasMode::Full).unwrap();
        assert!(b0[2].abs() < 1e-9 && (b1[2] - 1.0).abs() < 1e-12);

        let shifted: Vec<_> = cases.iter().map(|(m, _)| (*m, m[4] + 3.0)).collect();
        let (b0, b1) = fit_bias(&window_from(shifted), BiasMode::Additive).unwrap();
        assert!((b0[4] - 3.0).abs() < 1e-12);
        assert!(b1.iter().all(|&b| b == 1.0));

        let (b0, b1) = fit_bias(&w, BiasMode::None).unwrap();
        assert_eq!(b0, [0.0; 9]);
        assert_eq!(b1, [1.0; 9]);
    }

    #[test]
    fn bias_constant_member_is_degenerate() {
        let cases: Vec<_> = (0..20)
            .map(|i| {
                let mut m = [280.0 + i as f64; 9];
                m[5] = 281.0;
                (m, 280.0 + i as f64)
            })
            .collect();
        assert!(matches!(
            fit_bias(&window_from(cases), BiasMode::Full),
            Err(Error::DegenerateRegressor { member: 6 })
        ));
    }

    #[test]
    fn bias_regression_recovers_slope() {
        // OLS oracle: slope standard error ~ sd / (sqrt(n) * sd_f) = 1 / (sqrt(2000) * 8.7) ~ 0.003
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases: Vec<_> = (0..2000)
            .map(|_| {
                let mut m = [0.0; 9];
                for v in m.iter_mut() {
                    *v = rng.random_range(265.0..295.0);
                }
                let z: f64 = rng.sample(StandardNormal);
                (m, 0.8 * m[0] + 5.0 + z)
            })
            .collect();
        let (b0, b1) = fit_bias(&window_from(cases), BiasMode::Full).unwrap();
        assert!((b1[0] - 0.8).abs() < 0.015, "slope {}", b1[0]);
        assert!((b0[0] - 5.0).abs() < 4.0, "intercept {}", b0[0]);
        assert!((b0[0] + b1[0] * 280.0 - (0.8 * 280.0 + 5.0)).abs() < 0.15);
    }

    #[test]
    fn em_too_few_cases() {
        let w = window_from(vec![([280.0; 9], 281.0); 10]);
        assert!(matches!(
            fit_em(&w, &[0.0; 9], &[1.0; 9], &EmOptions::default()),
            Err(Error::TooFewCases { found: 10, required: 270 })
        ));
    }

    #[test]
    fn em_identical_members_keep_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases: Vec<_> = (0..300)
            .map(|_| {
                let f: f64 = rng.random_range(270.0..300.0);
                let z: f64 = rng.sample(StandardNormal);
                ([f; 9], f + 1.5 * z)
            })
            .collect();
        let w = window_from(cases.clone());
        let fit = fit_em(&w, &[0.0; 9], &[1.0; 9], &EmOptions::default()).unwrap();
        for &wk in &fit.weights {
            assert!((wk - 1.0 / 9.0).abs() < 1e-12);
        }
        let msr = cases.iter().map(|(m, x)| (x - m[0]).powi(2)).sum::<f64>() / cases.len() as f64;
        assert!((fit.sigma.powi(2) - msr).abs() < 1e-9);
    }

    #[test]
    fn em_single_iteration_by_hand() {
        // Two cases, members 1..9 and obs 1 / 9; uniform weights, sigma = 2.
        let m: [f64; 9] = [1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let w = window_from(vec![(m, 1.0), (m, 9.0)]);
        let state = EmState {
            weights: [1.0 / 9.0; 9],
            sigma: 2.0,
        };
        let step = em_step(&w, &[0.0; 9], &[1.0; 9], &state, &EmOptions::default());

        // hand evaluation: z_{k,t} = exp(-r^2/8) / sum_j exp(-r_j^2/8)
        let g = |r: f64| (-r * r / 8.0).exp();
        let d1: f64 = (0..9).map(|k| g(k as f64)).sum();
        let d2: f64 = (0..9).map(|k| g(8.0 - k as f64)).sum();
        let mut sq = 0.0;
        for k in 0..9 {
            let z1 = g(k as f64) / d1;
            let z2 = g(8.0 - k as f64) / d2;
            assert!((step.responsibilities[0][k] - z1).abs() < 1e-14);
            assert!((step.responsibilities[1][k] - z2).abs() < 1e-14);
            assert!((step.next.weights[k] - 0.5 * (z1 + z2)).abs() < 1e-14);
            sq += z1 * (k as f64).powi(2) + z2 * (8.0 - k as f64).powi(2);
        }
        assert!((step.next.sigma - (sq / 2.0).sqrt()).abs() < 1e-13);
        let ll = (d1 / 9.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt())).ln()
            + (d2 / 9.0 / (2.0 * (2.0 * std::f64::consts::PI).sqrt())).ln();
        assert!((step.log_likelihood - ll).abs() < 1e-12);
    }

    #[test]
    fn em_recovers_two_component_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cases: Vec<_> = (0..5000)
            .map(|_| {
                let mut m = [0.0; 9];
                for v in m.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = 285.0 + 4.0 * z;
                }
                let pick = if rng.random::<f64>() < 0.7 { 0 } else { 1 };
                let z: f64 = rng.sample(StandardNormal);
                (m, m[pick] + z)
            })
            .collect();
        let w = window_from(cases);
        let fit = fit_em(&w, &[0.0; 9], &[1.0; 9], &EmOptions::default()).unwrap();
        assert!((fit.weights[0] - 0.7).abs() < 0.05, "weights {:?}", fit.weights);
        assert!((fit.weights[1] - 0.3).abs() < 0.05);
        for pair in fit.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0));
        }
        let total: f64 = fit.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(fit.weights.iter().all(|&w| w >= 1e-8));
    }

    #[test]
    fn predict_examples() {
        let d = target();
        let case = ForecastCase::<f64>::new(d, 0, 1, [1., 2., 3., 4., 5., 6., 7., 8., 9.], None).unwrap();
        let p = BmaCoefficients {
            beta0: [0.0; 9],
            beta1: [1.0; 9],
            weights: [1.0 / 9.0; 9],
            sigma: 1.0,
            bias_mode: BiasMode::None,
        };
        let mix = predict_bma(&p, &case).unwrap();
        assert_eq!(mix.means(), &case.members);
        use crate::distributions::Predictive;
        assert!((mix.mean() - 5.0).abs() < 1e-12);

        let mut w = [0.0; 9];
        w[0] = 1.0;
        let p = BmaCoefficients {
            beta0: [3.0; 9],
            beta1: [1.0; 9],
            weights: w,
            sigma: 0.5,
            bias_mode: BiasMode::Additive,
        };
        let mix = predict_bma(&p, &case).unwrap();
        for (mu, f) in mix.means().iter().zip(&case.members) {
            assert_eq!(*mu, f + 3.0);
        }
        let n = crate::distributions::Normal::new(4.0, 0.5).unwrap();
        for &x in &[2.0, 4.0, 5.5] {
            assert!((mix.cdf(x) - n.cdf(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_mode_parsing() {
        assert_eq!("Additive".parse::<BiasMode>().unwrap(), BiasMode::Additive);
        assert!("partial".parse::<BiasMode>().is_err());
        assert_eq!(BiasMode::default().to_string(), "full");
    }
}
