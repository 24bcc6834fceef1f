//! Experiment configuration: a flat `key = value` file with defaults for
//! every key.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use crate::bma::BiasMode;
use crate::cluster::ClusterMethod;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Raw,
    Emos,
    EmosC,
    Bma,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Emos => "emos",
            Method::EmosC => "emos-c",
            Method::Bma => "bma",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "raw" => Ok(Method::Raw),
            "emos" => Ok(Method::Emos),
            "emos-c" | "emosc" => Ok(Method::EmosC),
            "bma" => Ok(Method::Bma),
            other => Err(Error::Config(format!("unknown method `{other}` (raw, emos, emos-c, bma)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub forecasts: Option<PathBuf>,
    /// Station table; the bundled network when unset.
    pub stations: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub method: Method,
    pub bias_mode: BiasMode,
    pub clustering: ClusterMethod,
    pub training_length_days: u32,
    pub training_sweep: Vec<u32>,
    /// Empty means every hour present in the data.
    pub hours: Vec<u8>,
    pub verify_start: Option<NaiveDate>,
    pub verify_end: Option<NaiveDate>,
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub merge_small_clusters: bool,
    /// Minimum training cases per fitted parameter inside a cluster.
    pub cluster_cases_per_parameter: usize,
    pub allow_clustered_bma: bool,
    pub emos_restarts: usize,
    pub svg: bool,
    pub ks_samples: usize,
    pub ks_sample_size: usize,
    pub dm_horizon_days: usize,
    /// Overrides the lag count derived from `dm_horizon_days`.
    pub dm_lags: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            forecasts: None,
            stations: None,
            output_dir: PathBuf::from("out"),
            method: Method::Emos,
            bias_mode: BiasMode::Full,
            clustering: ClusterMethod::Regional,
            training_length_days: 20,
            training_sweep: (10..=60).step_by(5).collect(),
            hours: Vec::new(),
            verify_start: None,
            verify_end: None,
            seed: 0x5EED,
            threads: 0,
            merge_small_clusters: true,
            cluster_cases_per_parameter: 5,
            allow_clustered_bma: false,
            emos_restarts: 3,
            svg: false,
            ks_samples: 1000,
            ks_sample_size: 1000,
            dm_horizon_days: 1,
            dm_lags: None,
        }
    }
}

fn list<T: FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`"))))
        .collect()
}

fn scalar<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn optional<T: FromStr>(value: &str, key: &str) -> Result<Option<T>> {
    let v = value.trim();
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        scalar(v, key).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "forecasts" => self.forecasts = (!v.is_empty()).then(|| PathBuf::from(v)),
            "stations" => self.stations = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "method" => self.method = v.parse()?,
            "bias_mode" => self.bias_mode = v.parse()?,
            "clustering" => self.clustering = v.parse()?,
            "training_length_days" => self.training_length_days = scalar(v, key)?,
            "training_sweep" => self.training_sweep = list(v, key)?,
            "hours" => self.hours = if v == "all" { Vec::new() } else { list(v, key)? },
            "verify_start" => self.verify_start = optional(v, key)?,
            "verify_end" => self.verify_end = optional(v, key)?,
            "seed" => self.seed = scalar(v, key)?,
            "threads" => self.threads = scalar(v, key)?,
            "merge_small_clusters" => self.merge_small_clusters = scalar(v, key)?,
            "cluster_cases_per_parameter" => self.cluster_cases_per_parameter = scalar(v, key)?,
            "allow_clustered_bma" => self.allow_clustered_bma = scalar(v, key)?,
            "emos_restarts" => self.emos_restarts = scalar(v, key)?,
            "svg" => self.svg = scalar(v, key)?,
            "ks_samples" => self.ks_samples = scalar(v, key)?,
            "ks_sample_size" => self.ks_sample_size = scalar(v, key)?,
            "dm_horizon_days" => self.dm_horizon_days = scalar(v, key)?,
            "dm_lags" => self.dm_lags = optional(v, key)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_str(&text)?;
        Ok(cfg)
    }

    /// Every key with its current value, in the file format.
    pub fn to_config_string(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        let hours = if self.hours.is_empty() {
            "all".to_string()
        } else {
            join(&self.hours)
        };
        let entries = [
            ("forecasts", path(&self.forecasts)),
            ("stations", path(&self.stations)),
            ("output_dir", self.output_dir.display().to_string()),
            ("method", self.method.to_string()),
            ("bias_mode", self.bias_mode.to_string()),
            ("clustering", self.clustering.to_string()),
            ("training_length_days", self.training_length_days.to_string()),
            ("training_sweep", join(&self.training_sweep)),
            ("hours", hours),
            ("verify_start", show(&self.verify_start)),
            ("verify_end", show(&self.verify_end)),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("merge_small_clusters", self.merge_small_clusters.to_string()),
            ("cluster_cases_per_parameter", self.cluster_cases_per_parameter.to_string()),
            ("allow_clustered_bma", self.allow_clustered_bma.to_string()),
            ("emos_restarts", self.emos_restarts.to_string()),
            ("svg", self.svg.to_string()),
            ("ks_samples", self.ks_samples.to_string()),
            ("ks_sample_size", self.ks_sample_size.to_string()),
            ("dm_horizon_days", self.dm_horizon_days.to_string()),
            ("dm_lags", show(&self.dm_lags)),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.training_length_days == 0 {
            return bad("training_length_days must be at least 1".into());
        }
        if self.training_sweep.contains(&0) {
            return bad("training_sweep lengths must be at least 1".into());
        }
        if let Some(h) = self.hours.iter().find(|&&h| h > 23) {
            return bad(format!("hour {h} out of range"));
        }
        if let (Some(a), Some(b)) = (self.verify_start, self.verify_end) {
            if a > b {
                return bad(format!("verify_start {a} is after verify_end {b}"));
            }
        }
        let regional = self.clustering == ClusterMethod::Regional;
        match self.method {
            Method::Emos if !regional => {
                return bad(format!("method emos is regional; use emos-c for clustering {}", self.clustering));
            }
            Method::EmosC if regional => {
                return bad("method emos-c needs clustering kmeans:K, expert-altitude or local".into());
            }
            Method::Bma if !regional && !self.allow_clustered_bma => {
                return bad("bma supports regional estimation only unless allow_clustered_bma = true".into());
            }
            _ => {}
        }
        if self.cluster_cases_per_parameter == 0 {
            return bad("cluster_cases_per_parameter must be at least 1".into());
        }
        if self.ks_samples == 0 || self.ks_sample_size == 0 {
            return bad("ks_samples and ks_sample_size must be positive".into());
        }
        if self.dm_horizon_days == 0 {
            return bad("dm_horizon_days must be at least 1".into());
        }
        Ok(())
    }

    pub fn dm_lag_count(&self) -> usize {
        self.dm_lags.unwrap_or(self.dm_horizon_days - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_defaults_parse_back() {
        let cfg = RunConfig::default();
        let mut back = RunConfig {
            method: Method::Bma,
            ..RunConfig::default()
        };
        back.apply_str(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.training_sweep, vec![10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60]);
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_str("# run\nmethod = emos-c\nclustering = kmeans:2 # two groups\nhours = 0,12\nverify_start = 2017-10-21\n")
            .unwrap();
        assert_eq!(cfg.method, Method::EmosC);
        assert_eq!(cfg.clustering, ClusterMethod::KMeans(2));
        assert_eq!(cfg.hours, vec![0, 12]);
        assert_eq!(cfg.verify_start, NaiveDate::from_ymd_opt(2017, 10, 21));
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_combinations() {
        let mut cfg = RunConfig {
            clustering: ClusterMethod::ExpertAltitude,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.method = Method::Bma;
        assert!(cfg.validate().is_err());
        cfg.allow_clustered_bma = true;
        assert!(cfg.validate().is_ok());
        cfg.training_length_days = 0;
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().apply_str("colour = red").is_err());
        assert!(RunConfig::default().apply_str("seed").is_err());
    }

    #[test]
    fn dm_lags_follow_horizon() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.dm_lag_count(), 0);
        cfg.dm_horizon_days = 3;
        assert_eq!(cfg.dm_lag_count(), 2);
        cfg.dm_lags = Some(5);
        assert_eq!(cfg.dm_lag_count(), 5);
    }
}
