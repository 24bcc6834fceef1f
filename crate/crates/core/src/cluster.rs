//! Station grouping for semi-local parameter estimation.
//!
//! Stations can share one parameter set (regional), each get their own
//! (local), be grouped by altitude band, or be grouped by k-means on a
//! 24-dimensional feature vector: 12 quantiles of the station's observation
//! climatology and 12 quantiles of its ensemble-mean forecast error over
//! the training window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Station, TrainingWindow};
use crate::error::{Error, Result};
use crate::float::Real;

/// Quantiles per feature block.
pub const QUANTILES_PER_BLOCK: usize = 12;

/// Upper altitude bound (exclusive) of the low band, meters.
pub const LOW_BAND_LIMIT: f64 = 400.0;
/// Upper altitude bound (inclusive) of the middle band, meters.
pub const MID_BAND_LIMIT: f64 = 750.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterMethod {
    Regional,
    KMeans(usize),
    ExpertAltitude,
    Local,
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterMethod::Regional => f.write_str("regional"),
            ClusterMethod::KMeans(k) => write!(f, "kmeans:{k}"),
            ClusterMethod::ExpertAltitude => f.write_str("expert-altitude"),
            ClusterMethod::Local => f.write_str("local"),
        }
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "regional" => Ok(ClusterMethod::Regional),
            "expert-altitude" | "expert" => Ok(ClusterMethod::ExpertAltitude),
            "local" => Ok(ClusterMethod::Local),
            _ => {
                let k = s
                    .strip_prefix("kmeans:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("unknown clustering `{s}` (regional, kmeans:K, expert-altitude, local)"))
                    })?;
                if k == 0 {
                    return Err(Error::Config("kmeans needs k >= 1".into()));
                }
                Ok(ClusterMethod::KMeans(k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    /// 1-based cluster label.
    pub id: u32,
    pub stations: BTreeSet<u32>,
}

/// Partition of stations into groups for one (target date, hour).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub target_date: NaiveDate,
    pub hour: u8,
    pub method: ClusterMethod,
    pub groups: Vec<Group>,
}

impl ClusterAssignment {
    /// Builds an assignment, dropping empty groups and rejecting overlaps.
    pub fn new(target_date: NaiveDate, hour: u8, method: ClusterMethod, groups: Vec<Group>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            for &s in &g.stations {
                if !seen.insert(s) {
                    return Err(Error::InvalidValue(format!("station {s} appears in two clusters")));
                }
            }
        }
        Ok(Self {
            target_date,
            hour,
            method,
            groups: groups.into_iter().filter(|g| !g.stations.is_empty()).collect(),
        })
    }

    pub fn cluster_of(&self, station: u32) -> Option<u32> {
        self.groups.iter().find(|g| g.stations.contains(&station)).map(|g| g.id)
    }

    pub fn stations(&self) -> BTreeSet<u32> {
        self.groups.iter().flat_map(|g| g.stations.iter().copied()).collect()
    }

    /// True when the groups are disjoint, nonempty, and cover exactly `ids`.
    pub fn is_partition_of(&self, ids: &BTreeSet<u32>) -> bool {
        let total: usize = self.groups.iter().map(|g| g.stations.len()).sum();
        self.groups.iter().all(|g| !g.stations.is_empty()) && total == ids.len() && &self.stations() == ids
    }

    /// Keeps only the listed stations, dropping groups left empty.
    pub fn restrict_to(&self, ids: &BTreeSet<u32>) -> Self {
        Self {
            target_date: self.target_date,
            hour: self.hour,
            method: self.method,
            groups: self
                .groups
                .iter()
                .map(|g| Group {
                    id: g.id,
                    stations: g.stations.intersection(ids).copied().collect(),
                })
                .filter(|g| !g.stations.is_empty())
                .collect(),
        }
    }
}

pub fn regional_clusters(target_date: NaiveDate, hour: u8, stations: &BTreeSet<u32>) -> ClusterAssignment {
    ClusterAssignment {
        target_date,
        hour,
        method: ClusterMethod::Regional,
        groups: vec![Group {
            id: 1,
            stations: stations.clone(),
        }],
    }
}

pub fn local_clusters(target_date: NaiveDate, hour: u8, stations: &BTreeSet<u32>) -> ClusterAssignment {
    ClusterAssignment {
        target_date,
        hour,
        method: ClusterMethod::Local,
        groups: stations
            .iter()
            .enumerate()
            .map(|(i, &s)| Group {
                id: i as u32 + 1,
                stations: [s].into_iter().collect(),
            })
            .collect(),
    }
}

/// Altitude band: 1 below 400 m, 2 from 400 m to 750 m inclusive, 3 above 750 m.
pub fn altitude_band(altitude: f64) -> u32 {
    if altitude < LOW_BAND_LIMIT {
        1
    } else if altitude <= MID_BAND_LIMIT {
        2
    } else {
        3
    }
}

/// Groups stations into the three altitude bands; empty bands are omitted.
pub fn expert_altitude_clusters<'a>(
    stations: impl IntoIterator<Item = &'a Station>,
    target_date: NaiveDate,
    hour: u8,
) -> ClusterAssignment {
    let mut bands: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for s in stations {
        bands.entry(altitude_band(s.altitude)).or_default().insert(s.id);
    }
    ClusterAssignment {
        target_date,
        hour,
        method: ClusterMethod::ExpertAltitude,
        groups: bands.into_iter().map(|(id, stations)| Group { id, stations }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationFeatures<T> {
    pub station_id: u32,
    /// Climatology quantiles followed by forecast-error quantiles.
    pub features: Vec<T>,
}

/// Quantile levels `i / 13`, `i = 1..=12`.
pub fn feature_levels() -> [f64; QUANTILES_PER_BLOCK] {
    let mut levels = [0.0; QUANTILES_PER_BLOCK];
    for (i, l) in levels.iter_mut().enumerate() {
        *l = (i + 1) as f64 / (QUANTILES_PER_BLOCK + 1) as f64;
    }
    levels
}

/// Empirical quantile of an ascending sample by linear interpolation
/// between order statistics at position `(n - 1) p`.
pub fn empirical_quantile<T: Real>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_quantiles<T: Real>(mut sample: Vec<T>) -> Vec<T> {
    sample.sort_by(|a, b| a.partial_cmp(b).expect("finite sample"));
    feature_levels().iter().map(|&p| empirical_quantile(&sample, p)).collect()
}

/// Features of `station_id` for the window: climatology uses every observed
/// case of the station at the window's hour dated before the target date;
/// the error block uses the window's cases of the station.
pub fn build_features<T: Real>(ds: &Dataset<T>, station_id: u32, window: &TrainingWindow<T>) -> Result<StationFeatures<T>> {
    let climatology: Vec<T> = ds
        .cases()
        .filter(|c| c.station_id == station_id && c.hour == window.hour && c.date < window.target_date)
        .filter_map(|c| c.observation)
        .collect();
    let errors: Vec<T> = window
        .cases
        .iter()
        .filter(|c| c.station_id == station_id)
        .filter_map(|c| c.observation.map(|x| x - c.ensemble_mean()))
        .collect();
    if errors.len() < QUANTILES_PER_BLOCK {
        return Err(Error::InsufficientData {
            station_id,
            message: format!("{} observed cases in window, {QUANTILES_PER_BLOCK} required", errors.len()),
        });
    }
    if climatology.len() < QUANTILES_PER_BLOCK {
        return Err(Error::InsufficientData {
            station_id,
            message: format!("{} climatology observations, {QUANTILES_PER_BLOCK} required", climatology.len()),
        });
    }
    let mut features = sorted_quantiles(climatology);
    features.extend(sorted_quantiles(errors));
    Ok(StationFeatures { station_id, features })
}

/// Per-dimension z-scores; constant dimensions map to zero.
pub fn standardize<T: Real>(points: &[Vec<T>]) -> Vec<Vec<T>> {
    if points.is_empty() {
        return Vec::new();
    }
    let dim = points[0].len();
    let n = T::from_usize_lossy(points.len());
    let mut out = points.to_vec();
    for j in 0..dim {
        let mean = points.iter().map(|p| p[j]).sum::<T>() / n;
        let var = points.iter().map(|p| (p[j] - mean).square()).sum::<T>() / n;
        let sd = var.sqrt();
        for (o, p) in out.iter_mut().zip(points) {
            o[j] = if sd > T::zero() { (p[j] - mean) / sd } else { T::zero() };
        }
    }
    out
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y).square()).sum()
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 25,
            max_iterations: 300,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult<T> {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    /// Within-cluster sum of squared distances.
    pub objective: T,
    /// Objective after each assignment step of the winning restart.
    pub trace: Vec<T>,
}

fn plus_plus_seeds<T: Real>(points: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<T> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().map(|d| d.as_f64()).sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                u -= d.as_f64();
                if u < 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign<T: Real>(points: &[Vec<T>], centroids: &[Vec<T>], labels: &mut [usize]) -> T {
    let mut total = T::zero();
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let mut best = 0;
        let mut best_d = sq_dist(p, &centroids[0]);
        for (j, c) in centroids.iter().enumerate().skip(1) {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        *l = best;
        total += best_d;
    }
    total
}

fn lloyd<T: Real>(points: &[Vec<T>], mut centroids: Vec<Vec<T>>, max_iterations: usize) -> KMeansResult<T> {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; n];
    let mut objective = assign(points, &centroids, &mut labels);
    let mut trace = vec![objective];
    for _ in 0..max_iterations {
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = T::from_usize_lossy(counts[j]);
                centroids[j] = sums[j].iter().map(|&s| s / c).collect();
            }
        }
        // an empty cluster takes over the point farthest from its centroid
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[labels[a]])
                            .partial_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                            .expect("finite distances")
                    })
                    .expect("nonempty");
                centroids[j] = points[far].clone();
                counts[labels[far]] -= 1;
                labels[far] = j;
                counts[j] = 1;
            }
        }
        let previous = labels.clone();
        objective = assign(points, &centroids, &mut labels);
        trace.push(objective);
        if labels == previous {
            break;
        }
    }
    KMeansResult {
        labels,
        centroids,
        objective,
        trace,
    }
}

/// k-means with k-means++ seeding; the restart with the lowest objective wins.
pub fn kmeans<T: Real>(points: &[Vec<T>], k: usize, opts: &KMeansOptions) -> Result<KMeansResult<T>> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidValue(format!("k-means needs 1 <= k <= {} points, got k = {k}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..opts.restarts.max(1) {
        let seeds = plus_plus_seeds(points, k, &mut rng);
        let run = lloyd(points, seeds, opts.max_iterations);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Outcome of clustering station feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureClustering<T> {
    pub assignment: ClusterAssignment,
    /// Standardized feature vector of every clustered station.
    pub standardized: BTreeMap<u32, Vec<T>>,
    pub objective: T,
}

/// k-means on standardized station features. Groups are labelled in order
/// of their smallest station id; singleton groups are logged.
pub fn kmeans_cluster<T: Real>(
    features: &[StationFeatures<T>],
    k: usize,
    seed: u64,
    target_date: NaiveDate,
    hour: u8,
) -> Result<FeatureClustering<T>> {
    let raw: Vec<Vec<T>> = features.iter().map(|f| f.features.clone()).collect();
    let z = standardize(&raw);
    let res = kmeans(
        &z,
        k,
        &KMeansOptions {
            seed,
            ..KMeansOptions::default()
        },
    )?;
    let mut by_label: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for (f, &l) in features.iter().zip(&res.labels) {
        by_label.entry(l).or_default().insert(f.station_id);
    }
    let mut sets: Vec<BTreeSet<u32>> = by_label.into_values().collect();
    sets.sort_by_key(|s| *s.iter().next().expect("nonempty group"));
    let groups: Vec<Group> = sets
        .into_iter()
        .enumerate()
        .map(|(i, stations)| Group {
            id: i as u32 + 1,
            stations,
        })
        .collect();
    for g in groups.iter().filter(|g| g.stations.len() == 1) {
        log::warn!(
            "{target_date} {hour:02}UTC: station {} forms a singleton cluster",
            g.stations.iter().next().expect("singleton")
        );
    }
    let assignment = ClusterAssignment::new(target_date, hour, ClusterMethod::KMeans(k), groups)?;
    let standardized = features.iter().map(|f| f.station_id).zip(z).collect();
    Ok(FeatureClustering {
        assignment,
        standardized,
        objective: res.objective,
    })
}

/// Record of one group absorbed into another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Merge {
    pub from: u32,
    pub into: u32,
    pub cases: usize,
}

/// Repeatedly merges the group with the fewest training cases into the
/// group whose center (mean of member vectors in `coords`) is nearest,
/// until every group has at least `min_cases` or one group remains.
pub fn merge_small_groups(
    assignment: &ClusterAssignment,
    case_counts: &BTreeMap<u32, usize>,
    coords: &BTreeMap<u32, Vec<f64>>,
    min_cases: usize,
) -> (ClusterAssignment, Vec<Merge>) {
    let mut groups = assignment.groups.clone();
    let mut merges = Vec::new();
    let count = |g: &Group| g.stations.iter().map(|s| case_counts.get(s).copied().unwrap_or(0)).sum::<usize>();
    let center = |g: &Group| -> Option<Vec<f64>> {
        let vs: Vec<&Vec<f64>> = g.stations.iter().filter_map(|s| coords.get(s)).collect();
        let first = vs.first()?;
        let mut c = vec![0.0; first.len()];
        for v in &vs {
            for (a, b) in c.iter_mut().zip(v.iter()) {
                *a += b;
            }
        }
        for a in c.iter_mut() {
            *a /= vs.len() as f64;
        }
        Some(c)
    };
    while groups.len() > 1 {
        let (small_idx, small_count) = groups
            .iter()
            .enumerate()
            .map(|(i, g)| (i, count(g)))
            .min_by_key(|&(i, c)| (c, i))
            .expect("nonempty");
        if small_count >= min_cases {
            break;
        }
        let small = groups.remove(small_idx);
        let target_idx = match center(&small) {
            Some(c0) => groups
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let d = center(g).map_or(f64::INFINITY, |c| c.iter().zip(&c0).map(|(a, b)| (a - b).powi(2)).sum());
                    (i, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("another group"),
            None => 0,
        };
        merges.push(Merge {
            from: small.id,
            into: groups[target_idx].id,
            cases: small_count,
        });
        groups[target_idx].stations.extend(small.stations);
    }
    (
        ClusterAssignment {
            target_date: assignment.target_date,
            hour: assignment.hour,
            method: assignment.method,
            groups,
        },
        merges,
    )
}
