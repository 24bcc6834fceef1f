//! Acceptance criteria. Each prints one PASS/FAIL line; any failure makes
//! the target exit nonzero.
//!
//! `cargo test -p enspost-cli --test acceptance`

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use enspost_core::bma::{fit_em, EmOptions};
use enspost_core::cluster::{expert_altitude_clusters, ClusterMethod};
use enspost_core::config::{Method, RunConfig};
use enspost_core::data::{bundled_stations, ensemble_variance, TrainingWindow};
use enspost_core::distributions::{ensemble_crps, Normal, NormalMixture, Predictive};
use enspost_core::emos::{fit_emos, EmosOptions};
use enspost_core::experiment::run_experiment;
use enspost_core::synthetic::{generate, ScenarioSpec};
use enspost_core::verify::{coverage_nominal, dm_test, ks_uniform_p_value, ks_uniform_subsampled, rank_histogram};
use enspost_core::{Dataset, ForecastCase};

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 11, 1).unwrap()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---- oracles ---------------------------------------------------------------

/// Composite trapezoid rule with `n` panels.
fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
    h * (0.5 * (f(a) + f(b)) + inner)
}

/// CRPS by integrating (F(y) - 1{y >= x})^2, split at the observation.
/// Panel width `h`; the leading error term is `h^2 f(x) / 6`.
fn quadrature_crps(cdf: impl Fn(f64) -> f64, x: f64, lo: f64, hi: f64, h: f64) -> f64 {
    let panels = |a: f64, b: f64| (((b - a) / h).ceil() as usize).max(1);
    trapezoid(|y| cdf(y).powi(2), lo, x, panels(lo, x)) + trapezoid(|y| (1.0 - cdf(y)).powi(2), x, hi, panels(x, hi))
}

/// Upper tail of chi-square with odd degrees of freedom `nu`.
fn chi_square_sf_odd(stat: f64, nu: usize) -> f64 {
    assert!(nu % 2 == 1);
    let r = stat.sqrt();
    let phi = (-0.5 * stat).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let q = upper_normal_tail(r);
    let mut term = r;
    let mut sum = 0.0;
    for k in 1..=(nu - 1) / 2 {
        if k > 1 {
            term *= stat / (2 * k - 1) as f64;
        }
        sum += term;
    }
    2.0 * q + 2.0 * phi * sum
}

/// 1 - Phi(r) by Simpson integration of the density on [r, r + 40].
fn upper_normal_tail(r: f64) -> f64 {
    let n = 200_000;
    let (a, b) = (r, r + 40.0);
    let h = (b - a) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Exact integral of (F(y) - 1{y >= x})^2 for the empirical CDF of `f`.
fn step_cdf_crps(f: &[f64], x: f64) -> f64 {
    let mut knots: Vec<f64> = f.iter().copied().chain(std::iter::once(x)).collect();
    knots.sort_by(f64::total_cmp);
    let m = f.len() as f64;
    knots
        .windows(2)
        .map(|w| {
            let below = f.iter().filter(|&&v| v <= w[0]).count() as f64 / m;
            let step = if w[0] >= x { 1.0 } else { 0.0 };
            (below - step).powi(2) * (w[1] - w[0])
        })
        .sum()
}

fn uniformity_p_value(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    chi_square_sf_odd(stat, counts.len() - 1)
}

// ---- criteria --------------------------------------------------------------

fn crps_oracle() -> Check {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let draws = 1000;
    let worst = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    let mut worst = (0.0f64, 0.0f64);
                    for i in (t..draws).step_by(threads) {
                        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
                        let mu: f64 = rng.random_range(250.0..320.0);
                        let sigma = rng.random_range(0.3..3.0);
                        let x = mu + sigma * rng.random_range(-5.0..5.0);
                        let d = Normal::new(mu, sigma).unwrap();
                        let (lo, hi) = (mu.min(x) - 8.0 * sigma, mu.max(x) + 8.0 * sigma);
                        let q = quadrature_crps(|y| d.cdf(y), x, lo, hi, sigma / 1000.0);
                        worst.0 = worst.0.max((q - d.crps(x)).abs());

                        let c = rng.random_range(250.0..320.0);
                        let s = rng.random_range(0.3..3.0);
                        let means: Vec<f64> = (0..9).map(|_| c + s * rng.random_range(-3.0..3.0)).collect();
                        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..1.0)).collect();
                        let total: f64 = raw.iter().sum();
                        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
                        let x = c + s * rng.random_range(-6.0..6.0);
                        let lo = means.iter().copied().fold(x, f64::min) - 8.0 * s;
                        let hi = means.iter().copied().fold(x, f64::max) + 8.0 * s;
                        let m = NormalMixture::new(weights, means, s).unwrap();
                        let q = quadrature_crps(|y| m.cdf(y), x, lo, hi, s / 1000.0);
                        worst.1 = worst.1.max((q - m.crps(x)).abs());
                    }
                    worst
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)))
    });
    check(
        worst.0 < 1e-6 && worst.1 < 1e-6,
        format!("max |closed form - trapezoid|: normal {:.2e}, mixture {:.2e} (tol 1e-6)", worst.0, worst.1),
    )
}

fn raw_ensemble_crps() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut f = [0.0; 9];
        for v in f.iter_mut() {
            *v = 285.0 + 2.0 * normal(&mut rng);
        }
        if i % 10 == 0 {
            f[3] = f[1]; // exercise ties
        }
        let x = 285.0 + 3.0 * normal(&mut rng);
        let e1: f64 = f.iter().map(|v| (v - x).abs()).sum::<f64>() / 9.0;
        let e2: f64 = f.iter().flat_map(|a| f.iter().map(move |b| (a - b).abs())).sum::<f64>() / 81.0;
        let pairwise = e1 - 0.5 * e2;
        worst = worst.max((ensemble_crps(&f, x) - pairwise).abs());
        worst = worst.max((step_cdf_crps(&f, x) - pairwise).abs());
    }
    check(
        worst <= 1e-12,
        format!("max deviation between step-CDF integral, library and pairwise form {worst:.2e} (tol 1e-12)"),
    )
}

fn emos_recovery() -> Check {
    let (a0, a) = (2.0, [0.25, 0.2, 0.15, 0.1, 0.1, 0.08, 0.05, 0.04, 0.03]);
    let (b0, b1) = (1.0, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = |station: u32, date: NaiveDate| {
        let center = rng.random_range(100.0..400.0);
        let spread = rng.random_range(0.5..2.5);
        let mut f = [0.0; 9];
        for v in f.iter_mut() {
            *v = center + spread * normal(&mut rng);
        }
        let loc = a0 + a.iter().zip(&f).map(|(w, v)| w * v).sum::<f64>();
        let y = loc + (b0 + b1 * ensemble_variance(&f)).sqrt() * normal(&mut rng);
        ForecastCase::new(date, 0, station, f, Some(y)).unwrap()
    };
    let train: Vec<ForecastCase> = (0..5000).map(|s| draw(s, day())).collect();
    let test: Vec<ForecastCase> = (0..5000).map(|s| draw(s, day() + chrono::Days::new(1))).collect();
    let window = TrainingWindow::new(day() + chrono::Days::new(1), 0, 1, train).unwrap();
    let fit = fit_emos(&window, &EmosOptions::default()).unwrap();
    let p = fit.params;
    let sum_a: f64 = p.a.iter().sum();
    let pits: Vec<f64> = test.iter().map(|c| p.predict(c).unwrap().pit(c.observation.unwrap())).collect();
    let ks_p = ks_uniform_p_value(&pits);
    check(
        (p.a0 - a0).abs() <= 0.15 && (sum_a - 1.0).abs() <= 0.15 && ks_p > 0.01,
        format!(
            "a0 {:.3} (truth 2), sum a_k {:.4} (truth 1), b0 {:.3}, b1 {:.3}, out-of-sample PIT KS p {ks_p:.3}",
            p.a0, sum_a, p.b0, p.b1
        ),
    )
}

fn em_correctness() -> Check {
    let mut worst_drop = 0.0f64;
    for w in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + w);
        let n = rng.random_range(270..600);
        let bias: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let scale = rng.random_range(0.5..3.0);
        let cases: Vec<ForecastCase> = (0..n)
            .map(|s| {
                let c = rng.random_range(270.0..300.0);
                let mut f = [0.0; 9];
                for (v, b) in f.iter_mut().zip(&bias) {
                    *v = c + b + scale * normal(&mut rng);
                }
                ForecastCase::new(day(), 0, s, f, Some(c + 1.5 * normal(&mut rng))).unwrap()
            })
            .collect();
        let window = TrainingWindow::new(day() + chrono::Days::new(1), 0, 1, cases).unwrap();
        let fit = fit_em(&window, &[0.0; 9], &[1.0; 9], &EmOptions::default()).unwrap();
        for pair in fit.log_likelihood.windows(2) {
            worst_drop = worst_drop.max((pair[0] - pair[1]) / pair[0].abs().max(1.0));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cases: Vec<ForecastCase> = (0..5000)
        .map(|s| {
            let mut f = [0.0; 9];
            for v in f.iter_mut() {
                *v = 285.0 + 4.0 * normal(&mut rng);
            }
            let pick = if rng.random::<f64>() < 0.7 { 0 } else { 1 };
            let y = f[pick] + normal(&mut rng);
            ForecastCase::new(day(), 0, s, f, Some(y)).unwrap()
        })
        .collect();
    let window = TrainingWindow::new(day() + chrono::Days::new(1), 0, 1, cases).unwrap();
    let fit = fit_em(&window, &[0.0; 9], &[1.0; 9], &EmOptions::default()).unwrap();
    let (w1, w2) = (fit.weights[0], fit.weights[1]);
    check(
        worst_drop <= 1e-12 && (w1 - 0.7).abs() <= 0.05 && (w2 - 0.3).abs() <= 0.05,
        format!("largest relative log-likelihood decrease {worst_drop:.1e} over 100 windows; weights {w1:.3}/{w2:.3} (truth 0.7/0.3)"),
    )
}

fn calibration_direction() -> Check {
    let ds: Dataset = generate(&ScenarioSpec::underdispersed()).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut raw_crps = None;
    for (method, clustering) in [
        (Method::Emos, ClusterMethod::Regional),
        (Method::EmosC, ClusterMethod::ExpertAltitude),
        (Method::Bma, ClusterMethod::Regional),
    ] {
        let cfg = RunConfig {
            method,
            clustering,
            threads: 1,
            ..RunConfig::default()
        };
        let out = run_experiment(&cfg, &ds).unwrap();
        let raw = out.raw_report().overall;
        let model = out.model_report().unwrap().overall;
        if raw_crps.is_none() {
            raw_crps = Some(raw.crps);
            lines.push(format!("raw crps {:.4} cov {:.1}%", raw.crps, raw.coverage_pct));
        }
        pass &= model.crps < raw.crps && (75.0..=85.0).contains(&model.coverage_pct) && raw.coverage_pct < 70.0;
        pass &= out.skipped.is_empty() && model.n_cases == raw.n_cases;
        lines.push(format!("{method} crps {:.4} cov {:.1}%", model.crps, model.coverage_pct));
    }
    check(pass, lines.join("; "))
}

fn expert_fixture() -> Check {
    let stations = bundled_stations();
    let a = expert_altitude_clusters(&stations, day(), 0);
    let got: Vec<BTreeSet<u32>> = a.groups.iter().map(|g| g.stations.clone()).collect();
    let want: Vec<BTreeSet<u32>> = vec![
        [1, 10, 12, 17].into_iter().collect(),
        [2, 3, 4, 5, 6, 7, 8, 13, 15, 16, 18].into_iter().collect(),
        [9, 11, 14, 19].into_iter().collect(),
    ];
    check(got == want, format!("{got:?}"))
}

fn nominal_coverage() -> Check {
    let c = coverage_nominal(9);
    check(c == 0.8, format!("coverage_nominal(9) = {c}"))
}

fn dm_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a: Vec<f64> = (0..102).map(|_| normal(&mut rng).abs()).collect();
        let b: Vec<f64> = (0..102).map(|_| normal(&mut rng).abs() * 1.1).collect();
        let ab = dm_test(&a, &b, 1).unwrap().statistic;
        let ba = dm_test(&b, &a, 1).unwrap().statistic;
        worst = worst.max((ab + ba).abs());
    }
    let reps = 500;
    let mut rejected = 0;
    for _ in 0..reps {
        // CRPS-like positive scores from one process for both forecasts
        let a: Vec<f64> = (0..102).map(|_| 0.5 + normal(&mut rng).abs()).collect();
        let b: Vec<f64> = (0..102).map(|_| 0.5 + normal(&mut rng).abs()).collect();
        if dm_test(&a, &b, 1).unwrap().p_value < 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / reps as f64;
    check(
        worst <= 1e-12 && (0.02..=0.09).contains(&rate),
        format!("antisymmetry error {worst:.1e}; null rejection rate {:.1}% over {reps} replications", 100.0 * rate),
    )
}

fn ks_subsampling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pits: Vec<f64> = (0..15_000).map(|_| rng.random::<f64>()).collect();
    let uniform = ks_uniform_subsampled(&pits, 1000, 1000, 11).unwrap();
    let constant = ks_uniform_subsampled(&vec![0.5; 15_000], 1000, 1000, 11).unwrap();
    check(
        (0.40..=0.60).contains(&uniform.mean_p_value) && constant.mean_p_value < 1e-6,
        format!(
            "uniform PITs mean p {:.3}; constant PITs mean p {:.1e}",
            uniform.mean_p_value, constant.mean_p_value
        ),
    )
}

fn rank_histograms() -> Check {
    let spec = |spread_factor| ScenarioSpec {
        n_days: 66,
        spread_factor,
        ..ScenarioSpec::calibrated()
    };
    let calibrated: Dataset = generate(&spec(1.0)).unwrap();
    let h = rank_histogram(calibrated.cases().take(10_000), 1);
    let p = uniformity_p_value(&h);
    let narrow: Dataset = generate(&spec(0.5)).unwrap();
    let u = rank_histogram(narrow.cases().take(10_000), 1);
    let n: usize = u.iter().sum();
    let ratio = (u[0] + u[9]) as f64 / (2.0 * n as f64 / 10.0);
    check(
        p > 0.01 && ratio > 2.0,
        format!("exchangeable chi-square p {p:.3}; spread 0.5 end bins {ratio:.2}x uniform"),
    )
}

fn determinism() -> Check {
    let exe = env!("CARGO_BIN_EXE_enspost");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(exe).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    run(&["simulate", "--preset", "andes", "--days", "30", "--seed", "7", "-o", data_s]);
    let forecasts = data.join("forecasts.csv");
    let stations = data.join("stations.csv");
    let calibrate = |out: &Path| {
        run(&[
            "calibrate",
            "--forecasts",
            forecasts.to_str().unwrap(),
            "--stations",
            stations.to_str().unwrap(),
            "--method",
            "emos",
            "--hours",
            "0,12",
            "--seed",
            "42",
            "-o",
            out.to_str().unwrap(),
        ]);
        std::fs::read(out.join("scores.csv")).unwrap()
    };
    let first = calibrate(&dir.path().join("run1"));
    let second = calibrate(&dir.path().join("run2"));
    check(
        first == second && !first.is_empty(),
        format!("scores.csv identical across runs ({} bytes)", first.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check, Option<Duration>); 11] = [
        ("CRPS oracle equivalence", crps_oracle, Some(Duration::from_secs(10))),
        ("raw-ensemble CRPS", raw_ensemble_crps, None),
        ("EMOS recovery", emos_recovery, Some(Duration::from_secs(60))),
        ("EM correctness", em_correctness, None),
        ("calibration direction", calibration_direction, Some(Duration::from_secs(600))),
        ("expert clustering fixture", expert_fixture, None),
        ("nominal coverage", nominal_coverage, None),
        ("DM test properties", dm_properties, None),
        ("KS subsampling", ks_subsampling, None),
        ("rank histogram uniformity", rank_histograms, None),
        ("determinism", determinism, None),
    ];
    let mut failures = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed();
        let (mut pass, detail) = match result {
            Ok(c) => (c.pass, c.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let mut timing = format!("{:.1}s", elapsed.as_secs_f64());
        if let Some(limit) = limit {
            timing += &format!(" of {}s", limit.as_secs());
            pass &= elapsed <= *limit;
        }
        failures += usize::from(!pass);
        println!(
            "criterion {:>2} {} {name}: {detail} [{timing}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
