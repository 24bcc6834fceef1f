//! `enspost`: calibrate, verify, cluster, simulate, sweep and compare
//! ensemble temperature forecasts.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use enspost_core::bma::BiasMode;
use enspost_core::cluster::ClusterMethod;
use enspost_core::compare::compare_runs;
use enspost_core::config::{Method, RunConfig};
use enspost_core::data::Dataset;
use enspost_core::experiment::{
    cluster_assignments, load_data, run_experiment, run_sweep, write_run, write_sweep, write_verification,
};
use enspost_core::output::{read_case_scores, write_clusters, write_text};
use enspost_core::synthetic::{generate, ScenarioSpec};

#[derive(Parser)]
#[command(name = "enspost", version, about = "Ensemble temperature post-processing (EMOS, BMA) and verification")]
struct Cli {
    /// Log filter, e.g. `info`, `debug`, `enspost_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, predict and score over rolling training windows.
    Calibrate(RunArgs),
    /// Recompute scores, histograms and KS tests from a forecasts.csv file.
    Verify(VerifyArgs),
    /// Write the station clusters used for each (date, hour).
    Cluster(RunArgs),
    /// Generate a synthetic forecast/station data set.
    Simulate(SimulateArgs),
    /// Mean CRPS against training length.
    Sweep(RunArgs),
    /// Pairwise Diebold-Mariano matrices for finished runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    forecasts: Option<PathBuf>,
    /// Station table; defaults to the bundled network.
    #[arg(long)]
    stations: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// raw, emos, emos-c or bma.
    #[arg(long)]
    method: Option<Method>,
    /// full, additive or none.
    #[arg(long)]
    bias_mode: Option<BiasMode>,
    /// regional, kmeans:K, expert-altitude or local.
    #[arg(long)]
    clustering: Option<ClusterMethod>,
    #[arg(long)]
    training_length: Option<u32>,
    /// Comma-separated training lengths for `sweep`.
    #[arg(long)]
    lengths: Option<String>,
    /// Comma-separated forecast hours, or `all`.
    #[arg(long)]
    hours: Option<String>,
    #[arg(long)]
    verify_start: Option<NaiveDate>,
    #[arg(long)]
    verify_end: Option<NaiveDate>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    threads: Option<usize>,
    /// Also write SVG histograms.
    #[arg(long)]
    svg: bool,
    /// Any configuration key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(v) = &self.forecasts {
            set("forecasts", v.display().to_string())?;
        }
        if let Some(v) = &self.stations {
            set("stations", v.display().to_string())?;
        }
        if let Some(v) = &self.output {
            set("output_dir", v.display().to_string())?;
        }
        if let Some(v) = self.method {
            set("method", v.to_string())?;
        }
        if let Some(v) = self.bias_mode {
            set("bias_mode", v.to_string())?;
        }
        if let Some(v) = self.clustering {
            set("clustering", v.to_string())?;
        }
        if let Some(v) = self.training_length {
            set("training_length_days", v.to_string())?;
        }
        if let Some(v) = &self.lengths {
            set("training_sweep", v.clone())?;
        }
        if let Some(v) = &self.hours {
            set("hours", v.clone())?;
        }
        if let Some(v) = self.verify_start {
            set("verify_start", v.to_string())?;
        }
        if let Some(v) = self.verify_end {
            set("verify_end", v.to_string())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.threads {
            set("threads", v.to_string())?;
        }
        if self.svg {
            set("svg", "true".into())?;
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set expects key=value, got `{o}`"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct VerifyArgs {
    /// forecasts.csv written by `calibrate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    ks_samples: usize,
    #[arg(long, default_value_t = 1000)]
    ks_sample_size: usize,
    #[arg(long, default_value_t = 0x5EED)]
    seed: u64,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// calibrated, underdispersed or andes.
    #[arg(long, default_value = "underdispersed")]
    preset: String,
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    spread_factor: Option<f64>,
    /// Kelvin per km added to all members.
    #[arg(long)]
    altitude_bias_slope: Option<f64>,
    #[arg(long)]
    missing_fraction: Option<f64>,
    #[arg(long)]
    start_date: Option<NaiveDate>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories, each holding a forecasts.csv.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    /// Forecast horizon in days; the DM variance uses horizon - 1 lags.
    #[arg(long, default_value_t = 1)]
    horizon_days: usize,
    /// Explicit autocovariance lag count, overriding the horizon.
    #[arg(long)]
    lags: Option<usize>,
}

fn load(cfg: &RunConfig) -> Result<Dataset<f64>> {
    load_data(cfg).context("loading forecast data")
}

fn calibrate(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_config_string());
        return Ok(());
    }
    let ds = load(&cfg)?;
    let outcome = run_experiment(&cfg, &ds)?;
    write_run(&cfg.output_dir, &outcome, &cfg)?;
    let raw = outcome.raw_report().overall;
    println!("raw     crps {:.4}  coverage {:.1}%  n {}", raw.crps, raw.coverage_pct, raw.n_cases);
    if let Some(r) = outcome.model_report() {
        let o = r.overall;
        println!("{:<7} crps {:.4}  coverage {:.1}%  n {}", cfg.method, o.crps, o.coverage_pct, o.n_cases);
    }
    if outcome.unconverged_fits > 0 {
        println!("{} fits stopped at their iteration cap", outcome.unconverged_fits);
    }
    if !outcome.skipped.is_empty() {
        println!("{} (date, hour) pairs skipped; see skipped.csv", outcome.skipped.len());
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let models = read_case_scores(&args.input)?;
    if models.is_empty() {
        bail!("{} holds no scored cases", args.input.display());
    }
    std::fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let cfg = RunConfig {
        ks_samples: args.ks_samples,
        ks_sample_size: args.ks_sample_size,
        seed: args.seed,
        svg: args.svg,
        ..RunConfig::default()
    };
    let refs: Vec<(&str, &[_])> = models.iter().map(|(m, c)| (m.as_str(), c.as_slice())).collect();
    let (reports, ks) = write_verification(&args.output, &refs, &cfg)?;
    for (m, r) in &reports {
        println!(
            "{m:<7} crps {:.4}  rmse {:.4}  mae {:.4}  coverage {:.1}%",
            r.overall.crps, r.overall.rmse, r.overall.mae, r.overall.coverage_pct
        );
    }
    for k in &ks {
        println!("{:<7} KS mean p-value {:.3}", k.model, k.mean_p_value);
    }
    Ok(())
}

fn cluster(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_config_string());
        return Ok(());
    }
    let ds = load(&cfg)?;
    let assignments = cluster_assignments(&cfg, &ds)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_clusters(&cfg.output_dir.join("clusters.csv"), &assignments)?;
    let singletons = assignments
        .iter()
        .filter(|a| a.groups.iter().any(|g| g.stations.len() == 1))
        .count();
    println!(
        "{} assignments written; {singletons} contain a singleton cluster",
        assignments.len()
    );
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mut spec = ScenarioSpec::preset(&args.preset)?;
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.days {
        spec.n_days = v;
    }
    if let Some(v) = args.stations {
        spec.n_stations = v;
    }
    if let Some(v) = args.spread_factor {
        spec.spread_factor = v;
    }
    if let Some(v) = args.altitude_bias_slope {
        spec.altitude_bias_slope = v;
    }
    if let Some(v) = args.missing_fraction {
        spec.missing_fraction = v;
    }
    if let Some(v) = args.start_date {
        spec.start_date = v;
    }
    let ds: Dataset<f64> = generate(&spec)?;
    ds.save(&args.output)?;
    println!(
        "{} cases for {} stations written to {}",
        ds.len(),
        ds.station_ids().len(),
        args.output.display()
    );
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_config_string());
        return Ok(());
    }
    let ds = load(&cfg)?;
    let rows = run_sweep(&cfg, &ds)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_sweep(&cfg.output_dir.join("sweep.csv"), &rows)?;
    write_text(&cfg.output_dir.join("config.txt"), &cfg.to_config_string())?;
    for r in rows.iter().filter(|r| r.hour.is_none()) {
        println!("{:<7} {:>3} days  crps {:.4}", r.model, r.length_days, r.crps);
    }
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    if args.horizon_days == 0 {
        bail!("--horizon-days must be at least 1");
    }
    let lags = args.lags.unwrap_or(args.horizon_days - 1);
    let cmp = compare_runs(&args.runs, &args.output, lags)?;
    let overall = &cmp.crps[0];
    println!("DM statistics (CRPS, overall); negative favours the row, * = 5% significance");
    for (i, label) in cmp.labels.iter().enumerate() {
        let cells: Vec<String> = overall.entries[i]
            .iter()
            .map(|r| {
                let flag = if r.significant(0.05) { "*" } else { " " };
                format!("{:>9.3}{flag}", r.statistic)
            })
            .collect();
        println!("{label:<16}{}", cells.join(""));
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match &cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Verify(a) => verify(a),
        Command::Cluster(a) => cluster(a),
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
    }
}
