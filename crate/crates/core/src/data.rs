//! Stations, forecast cases, datasets, and rolling training windows.
//!
//! Temperatures are kelvin throughout. A [`ForecastCase`] always carries all
//! nine member values; the verifying observation may be missing, in which
//! case the record is kept in the [`Dataset`] but never enters a training
//! window or a verification score.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::float::{compensated_sum, Real};

/// Number of ensemble members (WRF configurations).
pub const ENSEMBLE_SIZE: usize = 9;

/// Forecast hours (UTC) available in each day.
pub const FORECAST_HOURS: [u8; 8] = [0, 3, 6, 9, 12, 15, 18, 21];

pub const FORECAST_HEADER: [&str; 13] = [
    "date",
    "hour",
    "station_id",
    "obs",
    "m1",
    "m2",
    "m3",
    "m4",
    "m5",
    "m6",
    "m7",
    "m8",
    "m9",
];

pub const STATION_HEADER: [&str; 5] = ["station_id", "name", "longitude", "latitude", "altitude_m"];

const BUNDLED_STATIONS: &str = include_str!("../data/stations.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: u32,
    pub name: String,
    pub longitude: f64,
    pub latitude: f64,
    /// Meters above sea level.
    pub altitude: f64,
}

impl Station {
    pub fn new(id: u32, name: impl Into<String>, longitude: f64, latitude: f64, altitude: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::InvalidValue(format!("station {id}: longitude {longitude} outside [-180, 180]")));
        }
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(Error::InvalidValue(format!("station {id}: latitude {latitude} outside [-90, 90]")));
        }
        if !(altitude >= 0.0 && altitude.is_finite()) {
            return Err(Error::InvalidValue(format!("station {id}: altitude {altitude} must be >= 0")));
        }
        Ok(Self {
            id,
            name: name.into(),
            longitude,
            latitude,
            altitude,
        })
    }
}

/// The 19 Santiago monitoring stations with coordinates and altitudes.
pub fn bundled_stations() -> Vec<Station> {
    read_stations(BUNDLED_STATIONS.as_bytes()).expect("bundled station fixture is valid")
}

/// Ordering key of a case: date, then hour, then station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaseKey {
    pub date: NaiveDate,
    pub hour: u8,
    pub station_id: u32,
}

impl std::fmt::Display for CaseKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {:02}UTC station {}", self.date, self.hour, self.station_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCase<T> {
    pub date: NaiveDate,
    pub hour: u8,
    pub station_id: u32,
    pub members: [T; ENSEMBLE_SIZE],
    pub observation: Option<T>,
}

impl<T: Real> ForecastCase<T> {
    pub fn new(
        date: NaiveDate,
        hour: u8,
        station_id: u32,
        members: [T; ENSEMBLE_SIZE],
        observation: Option<T>,
    ) -> Result<Self> {
        if !FORECAST_HOURS.contains(&hour) {
            return Err(Error::InvalidValue(format!("hour {hour} is not a 3-hourly UTC forecast hour")));
        }
        if let Some(k) = members.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidValue(format!("member m{} is not finite", k + 1)));
        }
        if let Some(x) = observation {
            if !(x.is_finite() && x > T::zero()) {
                return Err(Error::InvalidValue(format!("observation {x} must be finite and > 0 K")));
            }
        }
        Ok(Self {
            date,
            hour,
            station_id,
            members,
            observation,
        })
    }

    pub fn key(&self) -> CaseKey {
        CaseKey {
            date: self.date,
            hour: self.hour,
            station_id: self.station_id,
        }
    }

    pub fn ensemble_mean(&self) -> T {
        ensemble_mean(&self.members)
    }

    pub fn ensemble_variance(&self) -> T {
        ensemble_variance(&self.members)
    }
}

/// Arithmetic mean of the members.
pub fn ensemble_mean<T: Real>(members: &[T]) -> T {
    compensated_sum(members.iter().copied()) / T::from_usize_lossy(members.len())
}

/// Unbiased sample variance of the members (divisor `m - 1`).
pub fn ensemble_variance<T: Real>(members: &[T]) -> T {
    if members.len() < 2 {
        return T::zero();
    }
    let mean = ensemble_mean(members);
    let ss = compensated_sum(members.iter().map(|&f| (f - mean).square()));
    ss / T::from_usize_lossy(members.len() - 1)
}

/// Validated collection of stations and forecast cases keyed by
/// (date, hour, station).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    stations: BTreeMap<u32, Station>,
    cases: BTreeMap<CaseKey, ForecastCase<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(stations: Vec<Station>, cases: Vec<ForecastCase<T>>) -> Result<Self> {
        let mut station_map = BTreeMap::new();
        for s in stations {
            let id = s.id;
            if station_map.insert(id, s).is_some() {
                return Err(Error::InvalidValue(format!("duplicate station id {id}")));
            }
        }
        let mut case_map = BTreeMap::new();
        for c in cases {
            if !station_map.contains_key(&c.station_id) {
                return Err(Error::UnknownStation { station_id: c.station_id });
            }
            let key = c.key();
            if case_map.insert(key, c).is_some() {
                return Err(Error::DuplicateRecord {
                    date: key.date,
                    hour: key.hour,
                    station_id: key.station_id,
                });
            }
        }
        Ok(Self {
            stations: station_map,
            cases: case_map,
        })
    }

    pub fn stations(&self) -> impl Iterator<Item = &Station> {
        self.stations.values()
    }

    pub fn station(&self, id: u32) -> Option<&Station> {
        self.stations.get(&id)
    }

    pub fn station_ids(&self) -> Vec<u32> {
        self.stations.keys().copied().collect()
    }

    /// Cases in key order.
    pub fn cases(&self) -> impl Iterator<Item = &ForecastCase<T>> {
        self.cases.values()
    }

    pub fn get(&self, key: &CaseKey) -> Option<&ForecastCase<T>> {
        self.cases.get(key)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Distinct dates with at least one case, ascending.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let set: BTreeSet<NaiveDate> = self.cases.keys().map(|k| k.date).collect();
        set.into_iter().collect()
    }

    /// Cases at one date and hour, across stations.
    pub fn cases_at(&self, date: NaiveDate, hour: u8) -> impl Iterator<Item = &ForecastCase<T>> {
        let lo = CaseKey {
            date,
            hour,
            station_id: 0,
        };
        let hi = CaseKey {
            date,
            hour,
            station_id: u32::MAX,
        };
        self.cases.range(lo..=hi).map(|(_, c)| c)
    }

    /// Training cases for forecasting `target_date` at `hour` from the
    /// preceding `n` days: dates in `[target_date - n, target_date - 1]`,
    /// observation present, station in `station_filter` when given.
    pub fn select_window(
        &self,
        target_date: NaiveDate,
        hour: u8,
        n: u32,
        station_filter: Option<&BTreeSet<u32>>,
    ) -> TrainingWindow<T> {
        let mut cases = Vec::new();
        if n >= 1 {
            let first = target_date - Days::new(u64::from(n));
            let mut day = first;
            while day < target_date {
                for c in self.cases_at(day, hour) {
                    let allowed = station_filter.is_none_or(|f| f.contains(&c.station_id));
                    if allowed && c.observation.is_some() {
                        cases.push(c.clone());
                    }
                }
                day = day + Days::new(1);
            }
        }
        TrainingWindow {
            target_date,
            hour,
            length_days: n,
            cases,
        }
    }

    pub fn load(forecast_file: impl AsRef<Path>, station_file: impl AsRef<Path>) -> Result<Self> {
        let (ds, rejected) = load_dataset_with_rejections(forecast_file, station_file)?;
        for r in &rejected {
            log::warn!("rejected forecast row {}: {}", r.line, r.reason);
        }
        Ok(ds)
    }

    pub fn write_forecasts<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(FORECAST_HEADER)?;
        for c in self.cases.values() {
            let mut row = Vec::with_capacity(FORECAST_HEADER.len());
            row.push(c.date.to_string());
            row.push(c.hour.to_string());
            row.push(c.station_id.to_string());
            row.push(match c.observation {
                Some(x) => x.to_string(),
                None => "NA".to_string(),
            });
            row.extend(c.members.iter().map(|m| m.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<forecast writer>", e))?;
        Ok(())
    }

    pub fn write_stations<W: Write>(&self, writer: W) -> Result<()> {
        write_stations(self.stations.values(), writer)
    }

    /// Writes `forecasts.csv` and `stations.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fpath = dir.join("forecasts.csv");
        let f = File::create(&fpath).map_err(|e| Error::io(&fpath, e))?;
        self.write_forecasts(std::io::BufWriter::new(f))?;
        let spath = dir.join("stations.csv");
        let f = File::create(&spath).map_err(|e| Error::io(&spath, e))?;
        self.write_stations(std::io::BufWriter::new(f))
    }
}

pub fn write_stations<'a, W: Write>(stations: impl IntoIterator<Item = &'a Station>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(STATION_HEADER)?;
    for s in stations {
        w.write_record([
            s.id.to_string(),
            s.name.clone(),
            s.longitude.to_string(),
            s.latitude.to_string(),
            s.altitude.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<station writer>", e))?;
    Ok(())
}

/// A forecast row dropped during loading.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the file, header is line 1.
    pub line: u64,
    pub reason: String,
}

/// Loads and validates a dataset; rows with unparsable or non-finite member
/// values are skipped and reported as [`RejectedRow`]s.
pub fn load_dataset<T: Real>(forecast_file: impl AsRef<Path>, station_file: impl AsRef<Path>) -> Result<Dataset<T>> {
    Dataset::load(forecast_file, station_file)
}

pub fn load_dataset_with_rejections<T: Real>(
    forecast_file: impl AsRef<Path>,
    station_file: impl AsRef<Path>,
) -> Result<(Dataset<T>, Vec<RejectedRow>)> {
    let spath = station_file.as_ref();
    let sfile = File::open(spath).map_err(|e| Error::io(spath, e))?;
    let stations = read_stations(sfile)?;
    let fpath = forecast_file.as_ref();
    let ffile = File::open(fpath).map_err(|e| Error::io(fpath, e))?;
    let (cases, rejected) = read_forecasts(ffile)?;
    Ok((Dataset::new(stations, cases)?, rejected))
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, col) in expected.iter().enumerate() {
        match found.get(i) {
            Some(h) if h.trim() == *col => {}
            Some(h) => {
                return Err(Error::Format {
                    column: (*col).to_string(),
                    message: format!("expected `{col}` at position {}, found `{}`", i + 1, h.trim()),
                })
            }
            None => {
                return Err(Error::Format {
                    column: (*col).to_string(),
                    message: format!("header is missing column `{col}`"),
                })
            }
        }
    }
    if found.len() > expected.len() {
        return Err(Error::Format {
            column: found[expected.len()].to_string(),
            message: "unexpected extra column".to_string(),
        });
    }
    Ok(())
}

#[derive(Deserialize)]
struct StationRow {
    station_id: u32,
    name: String,
    longitude: f64,
    latitude: f64,
    altitude_m: f64,
}

pub fn read_stations<R: Read>(reader: R) -> Result<Vec<Station>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(r.headers()?, &STATION_HEADER)?;
    let mut out = Vec::new();
    for row in r.deserialize::<StationRow>() {
        let row = row?;
        out.push(Station::new(row.station_id, row.name, row.longitude, row.latitude, row.altitude_m)?);
    }
    Ok(out)
}

/// Parses forecast rows. Header or key-field problems are hard errors;
/// member-value problems reject only the offending row.
pub fn read_forecasts<T: Real, R: Read>(reader: R) -> Result<(Vec<ForecastCase<T>>, Vec<RejectedRow>)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_header(r.headers()?, &FORECAST_HEADER)?;
    let mut cases = Vec::new();
    let mut rejected = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(0), "%Y-%m-%d").map_err(|e| Error::Format {
            column: "date".into(),
            message: format!("line {line}: `{}`: {e}", field(0)),
        })?;
        let hour: u8 = field(1).parse().map_err(|_| Error::Format {
            column: "hour".into(),
            message: format!("line {line}: `{}` is not an hour", field(1)),
        })?;
        let station_id: u32 = field(2).parse().map_err(|_| Error::Format {
            column: "station_id".into(),
            message: format!("line {line}: `{}` is not a station id", field(2)),
        })?;
        let obs = match field(3) {
            "NA" | "" => None,
            s => Some(s.parse::<f64>().map_err(|_| Error::Format {
                column: "obs".into(),
                message: format!("line {line}: `{s}` is not a number or NA"),
            })?),
        };
        let mut members = [T::zero(); ENSEMBLE_SIZE];
        let mut bad = None;
        for (k, m) in members.iter_mut().enumerate() {
            match field(4 + k).parse::<f64>() {
                Ok(v) if v.is_finite() => *m = T::lit(v),
                _ => {
                    bad = Some(format!("member m{} value `{}` unusable", k + 1, field(4 + k)));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            rejected.push(RejectedRow { line, reason });
            continue;
        }
        let case = ForecastCase::new(date, hour, station_id, members, obs.map(T::lit)).map_err(|e| Error::Format {
            column: "row".into(),
            message: format!("line {line}: {e}"),
        })?;
        cases.push(case);
    }
    Ok((cases, rejected))
}

/// Cases available for fitting the forecast at (`target_date`, `hour`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow<T> {
    pub target_date: NaiveDate,
    pub hour: u8,
    pub length_days: u32,
    pub cases: Vec<ForecastCase<T>>,
}

impl<T: Real> TrainingWindow<T> {
    /// Builds a window from explicit cases, checking date range, hour, and
    /// observation presence.
    pub fn new(target_date: NaiveDate, hour: u8, length_days: u32, cases: Vec<ForecastCase<T>>) -> Result<Self> {
        if length_days == 0 {
            return Err(Error::InvalidValue("training window length must be >= 1 day".into()));
        }
        let first = target_date - Days::new(u64::from(length_days));
        for c in &cases {
            if c.date < first || c.date >= target_date {
                return Err(Error::InvalidValue(format!("case {} outside window ending {target_date}", c.key())));
            }
            if c.hour != hour {
                return Err(Error::InvalidValue(format!("case {} has hour other than {hour}", c.key())));
            }
            if c.observation.is_none() {
                return Err(Error::MissingObservation {
                    date: c.date,
                    hour: c.hour,
                    station_id: c.station_id,
                });
            }
        }
        Ok(Self {
            target_date,
            hour,
            length_days,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Distinct station ids present in the window.
    pub fn station_ids(&self) -> BTreeSet<u32> {
        self.cases.iter().map(|c| c.station_id).collect()
    }

    /// Sub-window restricted to the given stations.
    pub fn restrict(&self, stations: &BTreeSet<u32>) -> Self {
        Self {
            target_date: self.target_date,
            hour: self.hour,
            length_days: self.length_days,
            cases: self
                .cases
                .iter()
                .filter(|c| stations.contains(&c.station_id))
                .cloned()
                .collect(),
        }
    }

    /// (members, observation) pairs; observation presence is a window invariant.
    pub(crate) fn pairs(&self) -> impl Iterator<Item = (&[T; ENSEMBLE_SIZE], T)> {
        self.cases
            .iter()
            .map(|c| (&c.members, c.observation.expect("window cases carry observations")))
    }
}
