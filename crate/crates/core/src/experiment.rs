//! Rolling-window experiments. Every (verification date, hour) is an
//! independent task: select the training window, group stations, fit one
//! model per group, predict the target cases and score them next to the raw
//! ensemble. A task whose fit fails is skipped for every model, so all
//! models are always scored on the same cases.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bma::{fit_bma, BmaCoefficients, EmOptions, BMA_PARAMETERS};
use crate::cluster::{
    build_features, expert_altitude_clusters, kmeans_cluster, local_clusters, merge_small_groups, regional_clusters,
    ClusterAssignment, ClusterMethod,
};
use crate::config::{Method, RunConfig};
use crate::data::{bundled_stations, load_dataset_with_rejections, read_forecasts, Dataset, ForecastCase, TrainingWindow};
use crate::emos::{fit_emos, EmosCoefficients, EmosOptions, EMOS_PARAMETERS};
use crate::error::{Error, Result};
use crate::output::{
    histogram_svg, write_case_scores, write_clusters, write_histogram, write_rows, write_scores, write_svg, write_text,
};
use crate::verify::{
    build_report, histogram_of_ranks, ks_uniform_subsampled, pit_histogram, score_case, score_raw, ScoreReport,
    ScoredCase, PIT_BINS,
};

/// Loads `cfg.forecasts` with `cfg.stations`, or with the bundled station
/// table when no station file is configured.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset<f64>> {
    let path = cfg
        .forecasts
        .as_ref()
        .ok_or_else(|| Error::Config("no forecast file configured (key `forecasts`)".into()))?;
    let (ds, rejected) = match &cfg.stations {
        Some(s) => load_dataset_with_rejections(path, s)?,
        None => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (cases, rejected) = read_forecasts(file)?;
            (Dataset::new(bundled_stations(), cases)?, rejected)
        }
    };
    for r in &rejected {
        log::warn!("rejected forecast row {}: {}", r.line, r.reason);
    }
    log::info!("loaded {} cases from {}", ds.len(), path.display());
    Ok(ds)
}

/// A (date, hour) left out of every model's scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    pub date: NaiveDate,
    pub hour: u8,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub method: Method,
    pub raw: Vec<ScoredCase<f64>>,
    /// Empty for `method = raw`.
    pub model: Vec<ScoredCase<f64>>,
    pub clusters: Vec<ClusterAssignment>,
    pub skipped: Vec<Skip>,
    /// Fits that stopped at their iteration or evaluation cap.
    pub unconverged_fits: usize,
}

impl RunOutcome {
    pub fn raw_report(&self) -> ScoreReport {
        build_report(&self.raw)
    }

    pub fn model_report(&self) -> Option<ScoreReport> {
        (self.method != Method::Raw).then(|| build_report(&self.model))
    }

    /// Scored cases per model label, raw first.
    pub fn models(&self) -> Vec<(&'static str, &[ScoredCase<f64>])> {
        let mut v = vec![("raw", self.raw.as_slice())];
        if self.method != Method::Raw {
            v.push((self.method.label(), self.model.as_slice()));
        }
        v
    }
}

enum Fitted {
    Emos(EmosCoefficients<f64>),
    Bma(BmaCoefficients<f64>),
}

impl Fitted {
    fn score(&self, case: &ForecastCase<f64>) -> Result<ScoredCase<f64>> {
        match self {
            Fitted::Emos(p) => score_case(&p.predict(case)?, case),
            Fitted::Bma(p) => score_case(&p.predict(case)?, case),
        }
    }
}

fn parameters(method: Method) -> usize {
    match method {
        Method::Bma => BMA_PARAMETERS,
        _ => EMOS_PARAMETERS,
    }
}

fn fit(cfg: &RunConfig, window: &TrainingWindow<f64>, min_cases: Option<usize>) -> Result<(Fitted, bool)> {
    match cfg.method {
        Method::Bma => {
            let mut opts = EmOptions::default();
            if let Some(m) = min_cases {
                opts.min_cases = m;
            }
            let f = fit_bma(window, cfg.bias_mode, &opts)?;
            Ok((Fitted::Bma(f.params), f.em.converged))
        }
        _ => {
            let mut opts = EmosOptions {
                restarts: cfg.emos_restarts,
                seed: cfg.seed,
                ..EmosOptions::default()
            };
            if let Some(m) = min_cases {
                opts.min_cases = m;
            }
            let f = fit_emos(window, &opts)?;
            Ok((Fitted::Emos(f.params), f.converged))
        }
    }
}

/// Groups the stations of `window` according to `cfg.clustering`, merging
/// undersized groups when enabled.
pub fn cluster_window(cfg: &RunConfig, ds: &Dataset<f64>, window: &TrainingWindow<f64>) -> Result<ClusterAssignment> {
    let ids = window.station_ids();
    let (d, h) = (window.target_date, window.hour);
    let altitude = |ids: &BTreeSet<u32>| -> BTreeMap<u32, Vec<f64>> {
        ids.iter()
            .filter_map(|&s| ds.station(s).map(|st| (s, vec![st.altitude])))
            .collect()
    };
    let (assignment, coords) = match cfg.clustering {
        ClusterMethod::Regional => return Ok(regional_clusters(d, h, &ids)),
        ClusterMethod::Local => (local_clusters(d, h, &ids), altitude(&ids)),
        ClusterMethod::ExpertAltitude => (
            expert_altitude_clusters(ds.stations().filter(|s| ids.contains(&s.id)), d, h),
            altitude(&ids),
        ),
        ClusterMethod::KMeans(k) => {
            let mut features = Vec::new();
            for &s in &ids {
                match build_features(ds, s, window) {
                    Ok(f) => features.push(f),
                    Err(e) => log::debug!("{d} {h:02}UTC: station {s} not clustered: {e}"),
                }
            }
            if features.len() < k {
                return Err(Error::InvalidValue(format!(
                    "{} stations have clustering features, k = {k}",
                    features.len()
                )));
            }
            let fc = kmeans_cluster(&features, k, cfg.seed, d, h)?;
            let coords = fc
                .standardized
                .iter()
                .map(|(&s, v)| (s, v.clone()))
                .collect::<BTreeMap<u32, Vec<f64>>>();
            (fc.assignment, coords)
        }
    };
    if !cfg.merge_small_clusters {
        return Ok(assignment);
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &window.cases {
        *counts.entry(c.station_id).or_default() += 1;
    }
    let min_cases = cfg.cluster_cases_per_parameter * parameters(cfg.method);
    let (merged, merges) = merge_small_groups(&assignment, &counts, &coords, min_cases);
    for m in &merges {
        log::info!(
            "{d} {h:02}UTC: cluster {} ({} cases) merged into cluster {}",
            m.from,
            m.cases,
            m.into
        );
    }
    Ok(merged)
}

struct TaskOutput {
    raw: Vec<ScoredCase<f64>>,
    model: Vec<ScoredCase<f64>>,
    clusters: Option<ClusterAssignment>,
    skip: Option<Skip>,
    unconverged: usize,
}

struct Scored {
    cases: Vec<ScoredCase<f64>>,
    clusters: Option<ClusterAssignment>,
    unconverged: usize,
}

fn task_rng(seed: u64, date: NaiveDate, hour: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(date.num_days_from_ce() as u64 * 24 + u64::from(hour));
    rng
}

fn fit_and_score(
    cfg: &RunConfig,
    ds: &Dataset<f64>,
    targets: &[&ForecastCase<f64>],
    window: &TrainingWindow<f64>,
) -> Result<Scored> {
    if cfg.clustering == ClusterMethod::Regional {
        let (fitted, converged) = fit(cfg, window, None)?;
        let cases = targets.iter().map(|c| fitted.score(c)).collect::<Result<Vec<_>>>()?;
        return Ok(Scored {
            cases,
            clusters: None,
            unconverged: usize::from(!converged),
        });
    }
    let assignment = cluster_window(cfg, ds, window)?;
    let min_cases = cfg.cluster_cases_per_parameter * parameters(cfg.method);
    let mut by_station: BTreeMap<u32, usize> = BTreeMap::new();
    let mut fits = Vec::new();
    let mut unconverged = 0;
    for (i, g) in assignment.groups.iter().enumerate() {
        let (fitted, converged) = fit(cfg, &window.restrict(&g.stations), Some(min_cases))?;
        fits.push(fitted);
        unconverged += usize::from(!converged);
        for &s in &g.stations {
            by_station.insert(s, i);
        }
    }
    let mut scored = Vec::with_capacity(targets.len());
    for c in targets {
        match by_station.get(&c.station_id) {
            Some(&i) => scored.push(fits[i].score(c)?),
            None => log::warn!("{}: station has no cluster; case not scored", c.key()),
        }
    }
    Ok(Scored {
        cases: scored,
        clusters: Some(assignment),
        unconverged,
    })
}

fn run_task(cfg: &RunConfig, ds: &Dataset<f64>, length: u32, date: NaiveDate, hour: u8) -> TaskOutput {
    let targets: Vec<&ForecastCase<f64>> = ds.cases_at(date, hour).filter(|c| c.observation.is_some()).collect();
    let mut rng = task_rng(cfg.seed, date, hour);
    let raw: Vec<ScoredCase<f64>> = targets
        .iter()
        .map(|c| score_raw(c, &mut rng).expect("observation present"))
        .collect();
    let empty = TaskOutput {
        raw: Vec::new(),
        model: Vec::new(),
        clusters: None,
        skip: None,
        unconverged: 0,
    };
    if targets.is_empty() {
        return empty;
    }
    if cfg.method == Method::Raw {
        return TaskOutput { raw, ..empty };
    }
    let window = ds.select_window(date, hour, length, None);
    match fit_and_score(cfg, ds, &targets, &window) {
        Ok(s) => {
            let keys: BTreeSet<_> = s.cases.iter().map(|c| c.key).collect();
            TaskOutput {
                raw: raw.into_iter().filter(|c| keys.contains(&c.key)).collect(),
                model: s.cases,
                clusters: s.clusters,
                skip: None,
                unconverged: s.unconverged,
            }
        }
        Err(e) => {
            log::warn!("{date} {hour:02}UTC skipped: {e}");
            TaskOutput {
                skip: Some(Skip {
                    date,
                    hour,
                    reason: e.to_string(),
                }),
                ..empty
            }
        }
    }
}

/// Verification (date, hour) pairs. Without an explicit start the first
/// date with a full training window of `length` days is used.
pub fn verification_tasks(cfg: &RunConfig, ds: &Dataset<f64>, length: u32) -> Vec<(NaiveDate, u8)> {
    let dates = ds.dates();
    let (Some(&first), Some(&last)) = (dates.first(), dates.last()) else {
        return Vec::new();
    };
    let start = cfg.verify_start.unwrap_or(first + Days::new(u64::from(length)));
    let end = cfg.verify_end.unwrap_or(last);
    let hours: BTreeSet<u8> = if cfg.hours.is_empty() {
        ds.cases().map(|c| c.hour).collect()
    } else {
        cfg.hours.iter().copied().collect()
    };
    let mut tasks = Vec::new();
    for &d in dates.iter().filter(|&&d| d >= start && d <= end) {
        for &h in &hours {
            if ds.cases_at(d, h).next().is_some() {
                tasks.push((d, h));
            }
        }
    }
    tasks
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run_with_length(cfg: &RunConfig, ds: &Dataset<f64>, length: u32, tasks: &[(NaiveDate, u8)]) -> Result<RunOutcome> {
    let outputs: Vec<TaskOutput> =
        pool(cfg.threads)?.install(|| tasks.par_iter().map(|&(d, h)| run_task(cfg, ds, length, d, h)).collect());
    let mut out = RunOutcome {
        method: cfg.method,
        raw: Vec::new(),
        model: Vec::new(),
        clusters: Vec::new(),
        skipped: Vec::new(),
        unconverged_fits: 0,
    };
    for t in outputs {
        out.unconverged_fits += t.unconverged;
        out.raw.extend(t.raw);
        out.model.extend(t.model);
        out.clusters.extend(t.clusters);
        out.skipped.extend(t.skip);
    }
    if out.unconverged_fits > 0 {
        log::info!("{} fits stopped at their iteration cap", out.unconverged_fits);
    }
    if !out.skipped.is_empty() {
        log::warn!("{} of {} (date, hour) pairs skipped", out.skipped.len(), tasks.len());
    }
    Ok(out)
}

/// Runs the configured method over every verification (date, hour).
pub fn run_experiment(cfg: &RunConfig, ds: &Dataset<f64>) -> Result<RunOutcome> {
    cfg.validate()?;
    let tasks = verification_tasks(cfg, ds, cfg.training_length_days);
    if tasks.is_empty() {
        return Err(Error::Config("no verification dates in the data for this configuration".into()));
    }
    log::info!(
        "{}: {} verification (date, hour) pairs, {}-day windows",
        cfg.method,
        tasks.len(),
        cfg.training_length_days
    );
    run_with_length(cfg, ds, cfg.training_length_days, &tasks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub length_days: u32,
    pub hour: Option<u8>,
    pub crps: f64,
    pub n_cases: usize,
}

/// Mean CRPS per hour for every training length in `cfg.training_sweep`,
/// all lengths verified on the same dates.
pub fn run_sweep(cfg: &RunConfig, ds: &Dataset<f64>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let longest = cfg
        .training_sweep
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::Config("training_sweep is empty".into()))?;
    let tasks = verification_tasks(cfg, ds, longest);
    if tasks.is_empty() {
        return Err(Error::Config("no verification dates for the longest sweep length".into()));
    }
    let mut rows = Vec::new();
    for &length in &cfg.training_sweep {
        log::info!("sweep: {length}-day windows");
        let out = run_with_length(cfg, ds, length, &tasks)?;
        for (model, cases) in out.models() {
            for r in build_report(cases).rows() {
                rows.push(SweepRow {
                    model: model.to_string(),
                    length_days: length,
                    hour: r.hour,
                    crps: r.crps,
                    n_cases: r.n_cases,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.length_days.to_string(),
                r.hour.map_or_else(|| "overall".into(), |h| h.to_string()),
                format!("{:.6}", r.crps),
                r.n_cases.to_string(),
            ]
        })
        .collect();
    write_rows(path, &["model", "length_days", "hour", "crps", "n_cases"], &rows)
}

/// Cluster assignments for every verification (date, hour).
pub fn cluster_assignments(cfg: &RunConfig, ds: &Dataset<f64>) -> Result<Vec<ClusterAssignment>> {
    let tasks = verification_tasks(cfg, ds, cfg.training_length_days);
    let results: Vec<Result<ClusterAssignment>> = pool(cfg.threads)?.install(|| {
        tasks
            .par_iter()
            .map(|&(d, h)| cluster_window(cfg, ds, &ds.select_window(d, h, cfg.training_length_days, None)))
            .collect()
    });
    let mut out = Vec::new();
    for (r, (d, h)) in results.into_iter().zip(&tasks) {
        match r {
            Ok(a) => out.push(a),
            Err(e) => log::warn!("{d} {h:02}UTC not clustered: {e}"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsRow {
    pub model: String,
    pub mean_p_value: f64,
    pub n_pits: usize,
    pub with_replacement: bool,
}

/// Scores, histograms and KS summaries for a set of scored models.
pub fn write_verification(
    dir: &Path,
    models: &[(&str, &[ScoredCase<f64>])],
    cfg: &RunConfig,
) -> Result<(Vec<(String, ScoreReport)>, Vec<KsRow>)> {
    let reports: Vec<(String, ScoreReport)> = models.iter().map(|(m, c)| (m.to_string(), build_report(c))).collect();
    let refs: Vec<(&str, &ScoreReport)> = reports.iter().map(|(m, r)| (m.as_str(), r)).collect();
    write_scores(&dir.join("scores.csv"), &refs)?;
    let mut ks = Vec::new();
    for (model, cases) in models {
        let ranks: Vec<u8> = cases.iter().filter_map(|c| c.rank).collect();
        let pits: Vec<f64> = cases.iter().filter_map(|c| c.pit).collect();
        let mut hists = Vec::new();
        if !ranks.is_empty() {
            hists.push(("rank", histogram_of_ranks(ranks, crate::data::ENSEMBLE_SIZE + 1)));
        }
        if !pits.is_empty() {
            hists.push(("pit", pit_histogram(pits.iter().copied(), PIT_BINS)));
            let r = ks_uniform_subsampled(&pits, cfg.ks_samples, cfg.ks_sample_size, cfg.seed)?;
            ks.push(KsRow {
                model: model.to_string(),
                mean_p_value: r.mean_p_value,
                n_pits: pits.len(),
                with_replacement: r.with_replacement,
            });
        }
        for (kind, counts) in hists {
            write_histogram(&dir.join(format!("hist_{kind}_{model}.csv")), &counts)?;
            if cfg.svg {
                let title = format!("{} histogram, {model}", if kind == "rank" { "Verification rank" } else { "PIT" });
                write_svg(&dir.join(format!("hist_{kind}_{model}.svg")), &histogram_svg(&title, &counts))?;
            }
        }
    }
    if !ks.is_empty() {
        let rows: Vec<Vec<String>> = ks
            .iter()
            .map(|k| {
                vec![
                    k.model.clone(),
                    format!("{:.6}", k.mean_p_value),
                    cfg.ks_samples.to_string(),
                    cfg.ks_sample_size.to_string(),
                    k.n_pits.to_string(),
                    k.with_replacement.to_string(),
                ]
            })
            .collect();
        write_rows(
            &dir.join("ks.csv"),
            &["model", "mean_p_value", "n_samples", "sample_size", "n_pits", "with_replacement"],
            &rows,
        )?;
    }
    Ok((reports, ks))
}

/// Writes every artifact of a run into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let models = outcome.models();
    write_verification(dir, &models, cfg)?;
    write_case_scores(&dir.join("forecasts.csv"), &models)?;
    if !outcome.clusters.is_empty() {
        write_clusters(&dir.join("clusters.csv"), &outcome.clusters)?;
    }
    let skipped: Vec<Vec<String>> = outcome
        .skipped
        .iter()
        .map(|s| vec![s.date.to_string(), s.hour.to_string(), s.reason.clone()])
        .collect();
    write_rows(&dir.join("skipped.csv"), &["date", "hour", "reason"], &skipped)?;
    write_text(&dir.join("config.txt"), &cfg.to_config_string())
}
