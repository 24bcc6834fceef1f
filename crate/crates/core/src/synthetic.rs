//! Synthetic station ensembles with controllable member bias, spread
//! deficiency and altitude-dependent cold bias.
//!
//! For station `s`, day `d` and hour `h` the truth centre is
//!
//! ```text
//! c = base + trend * d + diurnal * cos(2π (h - peak) / 24) + a[s, d] - lapse * alt_km
//! ```
//!
//! with `a` a stationary AR(1) anomaly per station. Each case draws an error
//! scale `σ = error_sd * exp(error_sd_variability * z)`; the observation is
//! `c + σ z0` and member `k` is
//! `c + bias[k] + altitude_bias_slope * alt_km + spread_factor * σ z_k`.
//! With zero biases and unit spread factor the observation is exchangeable
//! with the members.

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{bundled_stations, Dataset, ForecastCase, Station, ENSEMBLE_SIZE, FORECAST_HOURS};
use crate::error::{Error, Result};
use crate::float::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    /// The first stations of the bundled network are used; further stations
    /// get generated altitudes.
    pub n_stations: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub hours: Vec<u8>,
    pub member_biases: [f64; ENSEMBLE_SIZE],
    pub spread_factor: f64,
    /// Kelvin per kilometre added to every member.
    pub altitude_bias_slope: f64,
    pub seed: u64,
    pub base_temperature: f64,
    /// Kelvin per day.
    pub seasonal_trend: f64,
    pub diurnal_amplitude: f64,
    /// UTC hour of the diurnal maximum.
    pub diurnal_peak_hour: f64,
    pub ar_coefficient: f64,
    /// Stationary standard deviation of the AR(1) anomaly.
    pub ar_sd: f64,
    /// Kelvin per kilometre of true temperature decrease with height.
    pub lapse_rate: f64,
    pub error_sd: f64,
    pub error_sd_variability: f64,
    /// Probability that an observation is missing.
    pub missing_fraction: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            name: "calibrated".into(),
            n_stations: 19,
            n_days: 120,
            start_date: NaiveDate::from_ymd_opt(2017, 10, 1).expect("valid date"),
            hours: FORECAST_HOURS.to_vec(),
            member_biases: [0.0; ENSEMBLE_SIZE],
            spread_factor: 1.0,
            altitude_bias_slope: 0.0,
            seed: 2017,
            base_temperature: 286.0,
            seasonal_trend: 0.05,
            diurnal_amplitude: 6.0,
            diurnal_peak_hour: 18.0,
            ar_coefficient: 0.7,
            ar_sd: 2.0,
            lapse_rate: 6.5,
            error_sd: 1.5,
            error_sd_variability: 0.35,
            missing_fraction: 0.0,
        }
    }
}

pub const PRESETS: [&str; 3] = ["calibrated", "underdispersed", "andes"];

impl ScenarioSpec {
    pub fn calibrated() -> Self {
        Self::default()
    }

    /// Ensemble spread half the true error spread, small member biases.
    pub fn underdispersed() -> Self {
        Self {
            name: "underdispersed".into(),
            spread_factor: 0.5,
            member_biases: [-0.6, -0.4, -0.3, -0.1, 0.0, 0.1, 0.2, 0.4, 0.5],
            ..Self::default()
        }
    }

    /// Underdispersion plus a cold bias growing with altitude.
    pub fn andes() -> Self {
        Self {
            name: "andes".into(),
            spread_factor: 0.6,
            altitude_bias_slope: -2.0,
            member_biases: [-0.8, -0.6, -0.5, -0.4, -0.3, -0.2, -0.1, 0.0, 0.1],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "calibrated" => Ok(Self::calibrated()),
            "underdispersed" => Ok(Self::underdispersed()),
            "andes" => Ok(Self::andes()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (calibrated, underdispersed, andes)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.spread_factor > 0.0 && self.spread_factor.is_finite()) {
            return bad("spread_factor must be positive");
        }
        if self.n_days == 0 || self.n_stations == 0 {
            return bad("n_days and n_stations must be at least 1");
        }
        if self.hours.is_empty() || self.hours.iter().any(|&h| h > 23) {
            return bad("hours must be a nonempty list of values 0..=23");
        }
        if !(0.0..1.0).contains(&self.ar_coefficient.abs()) {
            return bad("ar_coefficient must lie in (-1, 1)");
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return bad("missing_fraction must lie in [0, 1)");
        }
        if !(self.error_sd > 0.0) || self.ar_sd < 0.0 || self.error_sd_variability < 0.0 {
            return bad("error_sd must be positive; ar_sd and error_sd_variability nonnegative");
        }
        Ok(())
    }

    /// Station network for the scenario.
    pub fn stations(&self) -> Vec<Station> {
        let mut stations = bundled_stations();
        stations.truncate(self.n_stations);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xA17);
        for id in stations.len() as u32 + 1..=self.n_stations as u32 {
            let altitude = rng.random_range(100.0..3000.0f64).round();
            let lon = -70.0 - rng.random::<f64>();
            let lat = -33.0 - rng.random::<f64>();
            stations.push(Station::new(id, format!("Synthetic {id}"), lon, lat, altitude).expect("valid synthetic station"));
        }
        stations
    }
}

fn station_cases<T: Real>(spec: &ScenarioSpec, station: &Station) -> Vec<ForecastCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::from(station.id));
    let alt_km = station.altitude / 1000.0;
    let innovation_sd = spec.ar_sd * (1.0 - spec.ar_coefficient.powi(2)).sqrt();
    let mut anomaly = spec.ar_sd * rng.sample::<f64, _>(StandardNormal);
    let mut out = Vec::with_capacity(spec.n_days * spec.hours.len());
    for d in 0..spec.n_days {
        if d > 0 {
            anomaly = spec.ar_coefficient * anomaly + innovation_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let date = spec.start_date + Days::new(d as u64);
        for &h in &spec.hours {
            let phase = 2.0 * std::f64::consts::PI * (f64::from(h) - spec.diurnal_peak_hour) / 24.0;
            let center = spec.base_temperature + spec.seasonal_trend * d as f64 + spec.diurnal_amplitude * phase.cos() + anomaly
                - spec.lapse_rate * alt_km;
            let sigma = spec.error_sd * (spec.error_sd_variability * rng.sample::<f64, _>(StandardNormal)).exp();
            let obs = center + sigma * rng.sample::<f64, _>(StandardNormal);
            let mut members = [T::zero(); ENSEMBLE_SIZE];
            for (m, bias) in members.iter_mut().zip(spec.member_biases) {
                let z: f64 = rng.sample(StandardNormal);
                *m = T::lit(center + bias + spec.altitude_bias_slope * alt_km + spec.spread_factor * sigma * z);
            }
            let missing = spec.missing_fraction > 0.0 && rng.random::<f64>() < spec.missing_fraction;
            let observation = (!missing).then(|| T::lit(obs));
            out.push(ForecastCase::new(date, h, station.id, members, observation).expect("synthetic values are finite and positive"));
        }
    }
    out
}

/// Generates the scenario; output is identical for identical specs.
pub fn generate<T: Real>(spec: &ScenarioSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let stations = spec.stations();
    let cases: Vec<ForecastCase<T>> = stations.par_iter().flat_map_iter(|s| station_cases(spec, s)).collect();
    Dataset::new(stations, cases)
}
