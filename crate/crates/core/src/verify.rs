//! Forecast verification: per-case scores, score tables, rank and PIT
//! histograms, the Diebold–Mariano test and subsampled KS uniformity tests.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{CaseKey, ForecastCase};
use crate::distributions::{ensemble_crps, Predictive};
use crate::error::{Error, Result};
use crate::float::{compensated_sum, Real};
use crate::special::{kolmogorov_survival, std_normal_cdf};

/// Coverage level of the central prediction interval.
pub const ALPHA: f64 = 0.2;
pub const PIT_BINS: usize = 10;

/// Nominal coverage of the range of an `m`-member ensemble.
pub fn coverage_nominal(m: usize) -> f64 {
    assert!(m >= 1, "ensemble size must be positive");
    (m - 1) as f64 / (m + 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCase<T> {
    pub key: CaseKey,
    pub observation: T,
    pub mean: T,
    pub median: T,
    /// Lower and upper ends of the central interval. For the raw ensemble
    /// these are the smallest and largest member.
    pub lower: T,
    pub upper: T,
    pub crps: T,
    pub abs_err_median: T,
    pub sq_err_mean: T,
    /// Predictive CDF at the observation; post-processed forecasts only.
    pub pit: Option<T>,
    pub covered: bool,
    /// Verification rank 1..=m+1; raw ensemble only.
    pub rank: Option<u8>,
}

fn observed<T: Real>(case: &ForecastCase<T>) -> Result<T> {
    case.observation.ok_or(Error::MissingObservation {
        date: case.date,
        hour: case.hour,
        station_id: case.station_id,
    })
}

/// Scores a continuous predictive distribution against the case's observation.
pub fn score_case<T: Real, D: Predictive<T>>(d: &D, case: &ForecastCase<T>) -> Result<ScoredCase<T>> {
    let x = observed(case)?;
    let half = T::lit(ALPHA / 2.0);
    let lower = d.quantile(half)?;
    let upper = d.quantile(T::one() - half)?;
    let median = d.quantile(T::lit(0.5))?;
    let mean = d.mean();
    Ok(ScoredCase {
        key: case.key(),
        observation: x,
        mean,
        median,
        lower,
        upper,
        crps: d.crps(x),
        abs_err_median: (x - median).abs(),
        sq_err_mean: (x - mean).square(),
        pit: Some(d.cdf(x).max(T::zero()).min(T::one())),
        covered: lower <= x && x <= upper,
        rank: None,
    })
}

/// Rank of `x` among `members`: one plus the number of members strictly
/// below, with ties spread uniformly over the tied positions.
pub fn verification_rank<T: Real, R: Rng + ?Sized>(members: &[T], x: T, rng: &mut R) -> u8 {
    let below = members.iter().filter(|&&m| m < x).count();
    let ties = members.iter().filter(|&&m| m == x).count();
    let offset = if ties > 0 { rng.random_range(0..=ties) } else { 0 };
    (1 + below + offset) as u8
}

/// Scores the raw ensemble: empirical-CDF CRPS, median member, ensemble
/// mean, and coverage by the ensemble range.
pub fn score_raw<T: Real, R: Rng + ?Sized>(case: &ForecastCase<T>, rng: &mut R) -> Result<ScoredCase<T>> {
    let x = observed(case)?;
    let mut sorted = case.members.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite members"));
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) * T::lit(0.5)
    };
    let mean = case.ensemble_mean();
    let (lower, upper) = (sorted[0], sorted[m - 1]);
    Ok(ScoredCase {
        key: case.key(),
        observation: x,
        mean,
        median,
        lower,
        upper,
        crps: ensemble_crps(&case.members, x),
        abs_err_median: (x - median).abs(),
        sq_err_mean: (x - mean).square(),
        pit: None,
        covered: lower <= x && x <= upper,
        rank: Some(verification_rank(&case.members, x, rng)),
    })
}

/// Rank histogram with `m + 1` bins; ties are randomized with `seed`.
pub fn rank_histogram<'a, T: Real + 'a>(cases: impl IntoIterator<Item = &'a ForecastCase<T>>, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; crate::data::ENSEMBLE_SIZE + 1];
    for c in cases {
        if let Some(x) = c.observation {
            counts[verification_rank(&c.members, x, &mut rng) as usize - 1] += 1;
        }
    }
    counts
}

/// Histogram of stored ranks (bins 1..=`bins`).
pub fn histogram_of_ranks(ranks: impl IntoIterator<Item = u8>, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for r in ranks {
        counts[(r as usize).clamp(1, bins) - 1] += 1;
    }
    counts
}

/// Equal-width histogram on [0, 1]; 1.0 falls in the last bin.
pub fn pit_histogram<T: Real>(pits: impl IntoIterator<Item = T>, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for p in pits {
        let b = (p.as_f64() * bins as f64).floor();
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    counts
}

/// Pearson chi-square statistic against equal expected counts.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `None` for the overall row.
    pub hour: Option<u8>,
    pub crps: f64,
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub coverage_pct: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub hours: Vec<ReportRow>,
    pub overall: ReportRow,
}

impl ScoreReport {
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.hours.iter().chain(std::iter::once(&self.overall))
    }
}

fn summarize<'a, T: Real + 'a>(hour: Option<u8>, cases: impl Iterator<Item = &'a ScoredCase<T>> + Clone) -> ReportRow {
    let n = cases.clone().count();
    if n == 0 {
        return ReportRow {
            hour,
            crps: f64::NAN,
            mse: f64::NAN,
            rmse: f64::NAN,
            mae: f64::NAN,
            coverage_pct: f64::NAN,
            n_cases: 0,
        };
    }
    let nf = n as f64;
    let crps = compensated_sum(cases.clone().map(|c| c.crps.as_f64())) / nf;
    let mse = compensated_sum(cases.clone().map(|c| c.sq_err_mean.as_f64())) / nf;
    let mae = compensated_sum(cases.clone().map(|c| c.abs_err_median.as_f64())) / nf;
    let covered = cases.filter(|c| c.covered).count();
    ReportRow {
        hour,
        crps,
        mse,
        rmse: mse.sqrt(),
        mae,
        coverage_pct: 100.0 * covered as f64 / nf,
        n_cases: n,
    }
}

/// Per-hour and overall means. The overall RMSE is the root of the pooled
/// mean squared error.
pub fn build_report<T: Real>(cases: &[ScoredCase<T>]) -> ScoreReport {
    let mut by_hour: BTreeMap<u8, Vec<&ScoredCase<T>>> = BTreeMap::new();
    for c in cases {
        by_hour.entry(c.key.hour).or_default().push(c);
    }
    let hours = by_hour
        .iter()
        .map(|(&h, cs)| summarize(Some(h), cs.iter().copied()))
        .collect();
    ScoreReport {
        hours,
        overall: summarize(None, cases.iter()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    /// The two series were identical; statistic 0 and p-value 1 by convention.
    pub no_difference: bool,
}

impl DmResult {
    pub fn significant(&self, level: f64) -> bool {
        !self.no_difference && self.p_value < level
    }
}

/// Two-sided Diebold–Mariano test with `horizon_days - 1` autocovariance lags.
pub fn dm_test(a: &[f64], b: &[f64], horizon_days: usize) -> Result<DmResult> {
    dm_test_with_lags(a, b, horizon_days.saturating_sub(1))
}

/// Diebold–Mariano test on `d_t = a_t - b_t` with a truncated (rectangular)
/// kernel over lags `0..=lags`. Negative statistics favour `a`.
pub fn dm_test_with_lags(a: &[f64], b: &[f64], lags: usize) -> Result<DmResult> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("series lengths {} and {}", a.len(), b.len())));
    }
    let t = a.len();
    if t < 10 {
        return Err(Error::TooFewCases { found: t, required: 10 });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = compensated_sum(d.iter().copied()) / t as f64;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let centered: Vec<f64> = d.iter().map(|v| v - mean).collect();
    let autocov = |k: usize| compensated_sum((k..t).map(|i| centered[i] * centered[i - k])) / t as f64;
    let gamma0 = autocov(0);
    let mut var = gamma0;
    for k in 1..=lags.min(t - 1) {
        var += 2.0 * autocov(k);
    }
    if var <= 0.0 {
        var = gamma0;
    }
    if gamma0 <= (f64::EPSILON * scale).powi(2) * 64.0 {
        if mean.abs() <= f64::EPSILON * 64.0 * scale.max(f64::MIN_POSITIVE) || scale == 0.0 {
            return Ok(DmResult {
                statistic: 0.0,
                p_value: 1.0,
                no_difference: true,
            });
        }
        return Err(Error::ZeroVarianceDifferences { mean });
    }
    let statistic = (t as f64).sqrt() * mean / var.sqrt();
    let p_value = 2.0 * std_normal_cdf(-statistic.abs());
    Ok(DmResult {
        statistic,
        p_value: p_value.min(1.0),
        no_difference: false,
    })
}

/// One-sample KS distance to the uniform CDF on [0, 1].
pub fn ks_statistic_uniform(sample: &mut [f64]) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample.iter().enumerate().fold(0.0f64, |d, (i, &u)| {
        let u = u.clamp(0.0, 1.0);
        d.max((i + 1) as f64 / n - u).max(u - i as f64 / n)
    })
}

/// Asymptotic KS p-value for uniformity of `sample`.
pub fn ks_uniform_p_value(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    let d = ks_statistic_uniform(&mut s);
    kolmogorov_survival((s.len() as f64).sqrt() * d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsSubsampling {
    pub mean_p_value: f64,
    pub n_samples: usize,
    pub sample_size: usize,
    /// True when the population was smaller than `sample_size`.
    pub with_replacement: bool,
}

/// Mean KS p-value over `n_samples` random subsamples of `pits`.
pub fn ks_uniform_subsampled(pits: &[f64], n_samples: usize, sample_size: usize, seed: u64) -> Result<KsSubsampling> {
    if pits.is_empty() || n_samples == 0 || sample_size == 0 {
        return Err(Error::InvalidValue("KS subsampling needs PIT values and positive sizes".into()));
    }
    let with_replacement = sample_size > pits.len();
    if with_replacement {
        log::warn!(
            "only {} PIT values for subsamples of {sample_size}; sampling with replacement",
            pits.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; sample_size];
    let mut total = 0.0;
    for _ in 0..n_samples {
        if with_replacement {
            for v in buf.iter_mut() {
                *v = pits[rng.random_range(0..pits.len())];
            }
        } else {
            for (v, i) in buf.iter_mut().zip(index::sample(&mut rng, pits.len(), sample_size)) {
                *v = pits[i];
            }
        }
        let d = ks_statistic_uniform(&mut buf);
        total += kolmogorov_survival((sample_size as f64).sqrt() * d);
    }
    Ok(KsSubsampling {
        mean_p_value: total / n_samples as f64,
        n_samples,
        sample_size,
        with_replacement,
    })
}
