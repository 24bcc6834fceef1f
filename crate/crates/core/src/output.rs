//! CSV and SVG artifacts written by experiment runs, and the reader for
//! per-case forecast files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::cluster::ClusterAssignment;
use crate::data::CaseKey;
use crate::error::{Error, Result};
use crate::verify::{ScoreReport, ScoredCase};

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn hour_label(hour: Option<u8>) -> String {
    hour.map_or_else(|| "overall".to_string(), |h| h.to_string())
}

/// `model,hour,crps,rmse,mae,coverage_pct,n_cases`, one block per model.
pub fn write_scores(path: &Path, reports: &[(&str, &ScoreReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["model", "hour", "crps", "rmse", "mae", "coverage_pct", "n_cases"])?;
    for (model, report) in reports {
        for row in report.rows() {
            w.write_record([
                model.to_string(),
                hour_label(row.hour),
                format!("{:.6}", row.crps),
                format!("{:.6}", row.rmse),
                format!("{:.6}", row.mae),
                format!("{:.2}", row.coverage_pct),
                row.n_cases.to_string(),
            ])?;
        }
    }
    flush(w, path)
}

const FORECAST_COLUMNS: [&str; 13] = [
    "model",
    "date",
    "hour",
    "station_id",
    "obs",
    "mean",
    "median",
    "q10",
    "q90",
    "pit",
    "rank",
    "crps",
    "abs_err",
];

/// Per-case forecasts and scores. Values are written at full precision so
/// that scores recomputed from the file match the run exactly.
pub fn write_case_scores(path: &Path, models: &[(&str, &[ScoredCase<f64>])]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(FORECAST_COLUMNS)?;
    for (model, cases) in models {
        for c in cases.iter() {
            w.write_record([
                model.to_string(),
                c.key.date.to_string(),
                c.key.hour.to_string(),
                c.key.station_id.to_string(),
                c.observation.to_string(),
                c.mean.to_string(),
                c.median.to_string(),
                c.lower.to_string(),
                c.upper.to_string(),
                c.pit.map_or_else(String::new, |p| p.to_string()),
                c.rank.map_or_else(String::new, |r| r.to_string()),
                c.crps.to_string(),
                c.abs_err_median.to_string(),
            ])?;
        }
    }
    flush(w, path)
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    model: String,
    date: NaiveDate,
    hour: u8,
    station_id: u32,
    obs: f64,
    mean: f64,
    median: f64,
    q10: f64,
    q90: f64,
    pit: Option<f64>,
    rank: Option<u8>,
    crps: f64,
    abs_err: f64,
}

/// Reads a forecasts file back, grouped by model in order of appearance.
pub fn read_case_scores(path: &Path) -> Result<Vec<(String, Vec<ScoredCase<f64>>)>> {
    let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    let headers = r.headers()?.clone();
    if let Some(missing) = FORECAST_COLUMNS.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(Error::Format {
            column: missing.to_string(),
            message: format!("missing from {}", path.display()),
        });
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_model: BTreeMap<String, Vec<ScoredCase<f64>>> = BTreeMap::new();
    for row in r.deserialize::<CaseRow>() {
        let row = row?;
        if !by_model.contains_key(&row.model) {
            order.push(row.model.clone());
        }
        by_model.entry(row.model).or_default().push(ScoredCase {
            key: CaseKey {
                date: row.date,
                hour: row.hour,
                station_id: row.station_id,
            },
            observation: row.obs,
            mean: row.mean,
            median: row.median,
            lower: row.q10,
            upper: row.q90,
            crps: row.crps,
            abs_err_median: row.abs_err,
            sq_err_mean: (row.obs - row.mean).powi(2),
            pit: row.pit,
            covered: row.q10 <= row.obs && row.obs <= row.q90,
            rank: row.rank,
        });
    }
    Ok(order
        .into_iter()
        .map(|m| {
            let cases = by_model.remove(&m).unwrap_or_default();
            (m, cases)
        })
        .collect())
}

/// `bin,count,relative_frequency`; bins are numbered from 1.
pub fn write_histogram(path: &Path, counts: &[usize]) -> Result<()> {
    let total: usize = counts.iter().sum();
    let mut w = csv_writer(path)?;
    w.write_record(["bin", "count", "relative_frequency"])?;
    for (i, &c) in counts.iter().enumerate() {
        let rel = if total > 0 { c as f64 / total as f64 } else { 0.0 };
        w.write_record([(i + 1).to_string(), c.to_string(), format!("{rel:.6}")])?;
    }
    flush(w, path)
}

/// Bar chart of relative frequencies with the uniform level dashed.
pub fn histogram_svg(title: &str, counts: &[usize]) -> String {
    let (width, height, margin) = (400.0, 260.0, 30.0);
    let total: usize = counts.iter().sum::<usize>().max(1);
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let uniform = 1.0 / counts.len().max(1) as f64;
    let top = freqs.iter().copied().fold(uniform, f64::max) * 1.1;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;
    let bar_w = plot_w / counts.len().max(1) as f64;
    let y = |f: f64| margin + plot_h * (1.0 - f / top);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        width / 2.0,
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    for (i, &f) in freqs.iter().enumerate() {
        let x = margin + i as f64 * bar_w;
        s += &format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#7a9cc6\" stroke=\"#2f4b6e\"/>\n",
            x + 1.0,
            y(f),
            bar_w - 2.0,
            margin + plot_h - y(f)
        );
        s += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            height - margin + 14.0,
            i + 1
        );
    }
    s += &format!(
        "<line x1=\"{margin}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"#c0392b\" stroke-dasharray=\"4 3\"/>\n</svg>\n",
        width - margin,
        y(uniform),
        y(uniform)
    );
    s
}

/// `target_date,hour,method,station_id,cluster_id`.
pub fn write_clusters(path: &Path, assignments: &[ClusterAssignment]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["target_date", "hour", "method", "station_id", "cluster_id"])?;
    for a in assignments {
        let mut rows: Vec<(u32, u32)> = a
            .groups
            .iter()
            .flat_map(|g| g.stations.iter().map(move |&s| (s, g.id)))
            .collect();
        rows.sort_unstable();
        for (station, cluster) in rows {
            w.write_record([
                a.target_date.to_string(),
                a.hour.to_string(),
                a.method.to_string(),
                station.to_string(),
                cluster.to_string(),
            ])?;
        }
    }
    flush(w, path)
}

/// Writes `rows` of already formatted fields under `header`.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    flush(w, path)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(svg.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::build_report;

    fn scored(station: u32, pit: Option<f64>, rank: Option<u8>) -> ScoredCase<f64> {
        ScoredCase {
            key: CaseKey {
                date: NaiveDate::from_ymd_opt(2017, 11, 2).unwrap(),
                hour: 3,
                station_id: station,
            },
            observation: 285.123456789,
            mean: 284.9,
            median: 284.95,
            lower: 283.0,
            upper: 286.5,
            crps: 0.3141592653589793,
            abs_err_median: 285.123456789 - 284.95,
            sq_err_mean: (285.123456789f64 - 284.9).powi(2),
            pit,
            covered: true,
            rank,
        }
    }

    #[test]
    fn case_scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forecasts.csv");
        let raw = vec![scored(1, None, Some(4)), scored(2, None, Some(10))];
        let emos = vec![scored(1, Some(0.61), None)];
        write_case_scores(&path, &[("raw", &raw), ("emos", &emos)]).unwrap();
        let back = read_case_scores(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "raw");
        assert_eq!(back[0].1, raw);
        assert_eq!(back[1].1, emos);
        assert_eq!(build_report(&back[0].1), build_report(&raw));
    }

    #[test]
    fn histogram_file_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.csv");
        write_histogram(&path, &[1, 3]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "bin,count,relative_frequency\n1,1,0.250000\n2,3,0.750000\n");
        let svg = histogram_svg("PIT <emos>", &[1, 3]);
        assert!(svg.starts_with("<svg") && svg.contains("PIT &lt;emos>") && svg.matches("<rect").count() == 3);
    }

    #[test]
    fn missing_column_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, "model,date\nraw,2017-11-01\n").unwrap();
        match read_case_scores(&path) {
            Err(Error::Format { column, .. }) => assert_eq!(column, "hour"),
            other => panic!("{other:?}"),
        }
    }
}
