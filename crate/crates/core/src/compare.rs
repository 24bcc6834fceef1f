//! Pairwise Diebold–Mariano comparison of finished runs.
//!
//! Each run contributes its post-processed model (or the raw ensemble for
//! raw runs). Scores are averaged over stations per day, and the test is run
//! on these daily series for each hour and for all hours together.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::data::CaseKey;
use crate::error::{Error, Result};
use crate::output::{read_case_scores, write_rows};
use crate::verify::{dm_test_with_lags, DmResult, ScoredCase};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Score {
    Crps,
    AbsoluteError,
}

impl Score {
    fn value(self, c: &ScoredCase<f64>) -> f64 {
        match self {
            Score::Crps => c.crps,
            Score::AbsoluteError => c.abs_err_median,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Score::Crps => "crps",
            Score::AbsoluteError => "ae",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabelledRun {
    pub label: String,
    pub cases: Vec<ScoredCase<f64>>,
}

/// Loads the compared model of each run directory. Labels are the model
/// names, prefixed by the directory name when two runs share a model.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LabelledRun>> {
    let mut runs = Vec::new();
    for dir in dirs {
        let models = read_case_scores(&dir.join("forecasts.csv"))?;
        let (model, cases) = models
            .iter()
            .find(|(m, _)| m != "raw")
            .or_else(|| models.first())
            .cloned()
            .ok_or_else(|| Error::Alignment(format!("{} has no scored cases", dir.display())))?;
        runs.push((dir.clone(), model, cases));
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (_, m, _) in &runs {
        *seen.entry(m.clone()).or_default() += 1;
    }
    Ok(runs
        .into_iter()
        .map(|(dir, model, cases)| {
            let label = if seen[&model] > 1 {
                let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                format!("{name}/{model}")
            } else {
                model
            };
            LabelledRun { label, cases }
        })
        .collect())
}

/// Fails with the first key present in one run but not another.
pub fn check_alignment(runs: &[LabelledRun]) -> Result<()> {
    let Some(first) = runs.first() else {
        return Ok(());
    };
    let reference: BTreeSet<CaseKey> = first.cases.iter().map(|c| c.key).collect();
    for r in &runs[1..] {
        let keys: BTreeSet<CaseKey> = r.cases.iter().map(|c| c.key).collect();
        if let Some(k) = reference.symmetric_difference(&keys).next() {
            let owner = if reference.contains(k) { &first.label } else { &r.label };
            return Err(Error::Alignment(format!(
                "case {k} is scored by {owner} only ({} vs {})",
                first.label, r.label
            )));
        }
    }
    Ok(())
}

/// Daily means over stations; `hour = None` pools all hours of the day.
pub fn daily_series(cases: &[ScoredCase<f64>], score: Score, hour: Option<u8>) -> Vec<(NaiveDate, f64)> {
    let mut acc: BTreeMap<NaiveDate, (f64, usize)> = BTreeMap::new();
    for c in cases.iter().filter(|c| hour.is_none_or(|h| c.key.hour == h)) {
        let e = acc.entry(c.key.date).or_default();
        e.0 += score.value(c);
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct DmMatrix {
    pub score: Score,
    pub hour: Option<u8>,
    pub labels: Vec<String>,
    /// `entries[i][j]` tests row model `i` against column model `j`;
    /// negative statistics favour the row.
    pub entries: Vec<Vec<DmResult>>,
}

fn zero_variance_entry(mean: f64) -> DmResult {
    DmResult {
        statistic: if mean < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY },
        p_value: 0.0,
        no_difference: false,
    }
}

pub fn dm_matrix(runs: &[LabelledRun], score: Score, hour: Option<u8>, lags: usize) -> Result<DmMatrix> {
    let series: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| daily_series(&r.cases, score, hour).into_iter().map(|(_, v)| v).collect())
        .collect();
    let n = runs.len();
    let mut entries = vec![vec![DmResult { statistic: 0.0, p_value: 1.0, no_difference: true }; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            entries[i][j] = match dm_test_with_lags(&series[i], &series[j], lags) {
                Ok(r) => r,
                Err(Error::ZeroVarianceDifferences { mean }) => zero_variance_entry(mean),
                Err(e) => return Err(e),
            };
        }
    }
    Ok(DmMatrix {
        score,
        hour,
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        entries,
    })
}

fn cell(r: &DmResult) -> String {
    let flag = if r.significant(SIGNIFICANCE_LEVEL) { "*" } else { "" };
    format!("{:.4}{flag}", r.statistic)
}

fn hour_label(hour: Option<u8>) -> String {
    hour.map_or_else(|| "overall".to_string(), |h| h.to_string())
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// Overall matrix first, then one per hour.
    pub crps: Vec<DmMatrix>,
    pub ae: Vec<DmMatrix>,
}

/// Compares the runs in `dirs` and writes `dm_matrix_crps.csv`,
/// `dm_matrix_ae.csv` (one square block per hour) and `dm_matrix.csv`
/// (overall: CRPS above the diagonal, absolute error below).
pub fn compare_runs(dirs: &[PathBuf], out_dir: &Path, lags: usize) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let runs = load_runs(dirs)?;
    check_alignment(&runs)?;
    let hours: BTreeSet<u8> = runs[0].cases.iter().map(|c| c.key.hour).collect();
    let scopes: Vec<Option<u8>> = std::iter::once(None).chain(hours.iter().map(|&h| Some(h))).collect();
    let mut cmp = Comparison {
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        crps: Vec::new(),
        ae: Vec::new(),
    };
    for &scope in &scopes {
        cmp.crps.push(dm_matrix(&runs, Score::Crps, scope, lags)?);
        cmp.ae.push(dm_matrix(&runs, Score::AbsoluteError, scope, lags)?);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut header = vec!["hour".to_string(), "model".to_string()];
    header.extend(cmp.labels.iter().cloned());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    for (name, mats) in [("dm_matrix_crps.csv", &cmp.crps), ("dm_matrix_ae.csv", &cmp.ae)] {
        let mut rows = Vec::new();
        for m in mats {
            for (i, label) in m.labels.iter().enumerate() {
                let mut row = vec![hour_label(m.hour), label.clone()];
                row.extend(m.entries[i].iter().map(cell));
                rows.push(row);
            }
        }
        write_rows(&out_dir.join(name), &header_refs, &rows)?;
    }
    let (crps, ae) = (&cmp.crps[0], &cmp.ae[0]);
    let mut rows = Vec::new();
    for (i, label) in cmp.labels.iter().enumerate() {
        let mut row = vec!["overall".to_string(), label.clone()];
        for j in 0..cmp.labels.len() {
            row.push(match i.cmp(&j) {
                std::cmp::Ordering::Less => cell(&crps.entries[i][j]),
                std::cmp::Ordering::Greater => cell(&ae.entries[i][j]),
                std::cmp::Ordering::Equal => String::new(),
            });
        }
        rows.push(row);
    }
    write_rows(&out_dir.join("dm_matrix.csv"), &header_refs, &rows)?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;

    fn case(day: u64, hour: u8, station: u32, crps: f64) -> ScoredCase<f64> {
        ScoredCase {
            key: CaseKey {
                date: NaiveDate::from_ymd_opt(2017, 11, 1).unwrap() + Days::new(day),
                hour,
                station_id: station,
            },
            observation: 285.0,
            mean: 285.0,
            median: 285.0,
            lower: 284.0,
            upper: 286.0,
            crps,
            abs_err_median: crps * 2.0,
            sq_err_mean: 0.0,
            pit: None,
            covered: true,
            rank: None,
        }
    }

    fn run(label: &str, f: impl Fn(u64, u8, u32) -> f64) -> LabelledRun {
        let mut cases = Vec::new();
        for d in 0..30 {
            for h in [0, 12] {
                for s in 1..=3 {
                    cases.push(case(d, h, s, f(d, h, s)));
                }
            }
        }
        LabelledRun {
            label: label.into(),
            cases,
        }
    }

    #[test]
    fn daily_means_over_stations() {
        let r = run("a", |d, h, s| d as f64 + f64::from(h) + f64::from(s));
        let overall = daily_series(&r.cases, Score::Crps, None);
        assert_eq!(overall.len(), 30);
        assert!((overall[0].1 - 8.0).abs() < 1e-12);
        let noon = daily_series(&r.cases, Score::Crps, Some(12));
        assert!((noon[1].1 - 15.0).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_and_antisymmetry() {
        let a = run("a", |d, h, s| ((d * 7 + u64::from(h) + u64::from(s)) % 5) as f64 * 0.1 + 1.0);
        let b = run("b", |d, _, s| ((d * 3 + u64::from(s)) % 4) as f64 * 0.1 + 1.1);
        let same = dm_matrix(&[a.clone(), a.clone()], Score::Crps, None, 0).unwrap();
        assert!(same.entries[0][1].no_difference && !same.entries[0][1].significant(0.05));
        let m = dm_matrix(&[a, b], Score::Crps, None, 0).unwrap();
        assert_eq!(m.entries[0][1].statistic, -m.entries[1][0].statistic);
        assert!(m.entries[0][0].no_difference);
    }

    #[test]
    fn misaligned_runs_report_first_key() {
        let a = run("a", |_, _, _| 1.0);
        let mut b = run("b", |_, _, _| 1.0);
        b.cases.remove(4);
        match check_alignment(&[a, b]) {
            Err(Error::Alignment(msg)) => assert!(msg.contains("2017-11-01") && msg.contains("station 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
