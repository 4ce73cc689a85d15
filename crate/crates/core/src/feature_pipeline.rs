//! Turns published frames into model-ready rows: per-channel reductions,
//! standardization, outlier removal, sequence windowing and CSV export.

use crate::cluster_sim::GroundTruth;
use crate::parser::{Channel, Counter, N_CHANNELS, N_COUNTERS};
use crate::telemetry::FeatureFrame;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Per-channel reductions.
pub const N_STATS: usize = 5;
pub const STAT_NAMES: [&str; N_STATS] = ["avg", "p90", "std", "decay_avg", "decay_p90"];
/// Counters plus reduced channels.
pub const N_FEATURES: usize = N_COUNTERS + N_CHANNELS * N_STATS;
pub const GROUND_TRUTH_COLUMNS: [&str; 3] = ["n_cpu", "cpu_usage", "busy_threads"];
/// Exponential moving average factor applied per frame.
pub const DECAY: f64 = 0.9;
pub const DEFAULT_SEQUENCE_LEN: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;
pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.99;
/// Columns whose standard deviation falls below this map to zero.
pub const STD_EPSILON: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub avg: f64,
    pub p90: f64,
    pub std: f64,
    pub decay_avg: f64,
    pub decay_p90: f64,
}

impl Reductions {
    pub fn as_array(&self) -> [f64; N_STATS] {
        [self.avg, self.p90, self.std, self.decay_avg, self.decay_p90]
    }
}

/// Nearest-rank percentile of sorted data: element `ceil(q n) - 1`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let raw = q * sorted.len() as f64;
    // Snap products like 0.99 * 1000 that land a hair off an integer.
    let rank = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    let idx = (rank as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Reduces one reservoir snapshot. An empty snapshot carries `prev` forward
/// unchanged (zeros when there is none).
pub fn reduce_channel(samples: &[f64], prev: Option<&Reductions>) -> Reductions {
    if samples.is_empty() {
        return prev.copied().unwrap_or_default();
    }
    let n = samples.len() as f64;
    let avg = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - avg).powi(2)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p90 = nearest_rank(&sorted, 0.9);
    let (decay_avg, decay_p90) = match prev {
        Some(p) => (DECAY * p.decay_avg + (1.0 - DECAY) * avg, DECAY * p.decay_p90 + (1.0 - DECAY) * p90),
        None => (avg, p90),
    };
    Reductions { avg, p90, std: var.sqrt(), decay_avg, decay_p90 }
}

/// Column names of the 73-feature vector: counters, then
/// `<channel>_<stat>` for every channel and stat.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = Counter::ALL.iter().map(|c| c.name().to_string()).collect();
    for ch in Channel::ALL {
        for stat in STAT_NAMES {
            names.push(format!("{}_{}", ch.name(), stat));
        }
    }
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub n_cpu: f64,
    pub cpu_usage: f64,
    pub busy_threads: f64,
}

impl From<&GroundTruth> for GroundTruthRow {
    fn from(g: &GroundTruth) -> Self {
        GroundTruthRow { n_cpu: g.n_cpu as f64, cpu_usage: g.cpu_usage, busy_threads: g.busy_threads as f64 }
    }
}

impl GroundTruthRow {
    fn as_array(&self) -> [f64; 3] {
        [self.n_cpu, self.cpu_usage, self.busy_threads]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFrame {
    pub time: f64,
    pub vip: u32,
    pub dip: u32,
    /// `N_FEATURES` values in [`feature_names`] order.
    pub features: Vec<f64>,
    pub ground_truth: Option<GroundTruthRow>,
}

/// Per-DIP reduction state, so decay fields only ever see earlier frames of
/// the same server.
#[derive(Debug, Clone, Default)]
pub struct FrameReducer {
    state: BTreeMap<u32, [Option<Reductions>; N_CHANNELS]>,
}

impl FrameReducer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reduce(&mut self, vip: u32, dip: u32, frame: &FeatureFrame) -> ReducedFrame {
        let state = self.state.entry(dip).or_insert([None; N_CHANNELS]);
        let mut features = Vec::with_capacity(N_FEATURES);
        features.extend(frame.counters.iter().map(|&c| c as f64));
        for (i, ch) in frame.channels.iter().enumerate().take(N_CHANNELS) {
            let r = reduce_channel(&ch.values, state[i].as_ref());
            features.extend_from_slice(&r.as_array());
            state[i] = Some(r);
        }
        ReducedFrame { time: frame.window_end, vip, dip, features, ground_truth: None }
    }

    pub fn forget(&mut self, dip: u32) {
        self.state.remove(&dip);
    }
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(rows: &[ReducedFrame]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; N_FEATURES];
        let mut std = vec![0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            let mut m = rows.iter().map(|r| r.features[j]).sum::<f64>() / n;
            // Second pass removes the rounding left by the first.
            m += rows.iter().map(|r| r.features[j] - m).sum::<f64>() / n;
            mean[j] = m;
            std[j] = (rows.iter().map(|r| (r.features[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        }
        NormStats { names: feature_names(), mean, std }
    }

    pub fn identity() -> Self {
        NormStats { names: feature_names(), mean: vec![0.0; N_FEATURES], std: vec![1.0; N_FEATURES] }
    }

    pub fn apply(&self, features: &mut [f64]) {
        for ((x, m), s) in features.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = if *s < STD_EPSILON { 0.0 } else { (*x - m) / s };
        }
    }

    /// Writes `name,mean,std` rows under a header.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut w = csv_writer(path)?;
        let csv_err = |source| DatasetError::Csv { path: path.display().to_string(), source };
        w.write_record(["name", "mean", "std"]).map_err(csv_err)?;
        for ((n, m), s) in self.names.iter().zip(&self.mean).zip(&self.std) {
            w.write_record([n.clone(), fmt_f64(*m), fmt_f64(*s)]).map_err(csv_err)?;
        }
        w.flush().map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
    }

    /// Reads a stats file and orders it by feature name.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let p = path.display().to_string();
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|source| DatasetError::Csv { path: p.clone(), source })?;
        let mut by_name = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|source| DatasetError::Csv { path: p.clone(), source })?;
            let bad = |reason: String| DatasetError::Format { path: p.clone(), reason };
            if rec.len() != 3 {
                return Err(bad(format!("expected name,mean,std, got {} fields", rec.len())));
            }
            let m: f64 = rec[1].trim().parse().map_err(|_| bad(format!("bad mean for {}", &rec[0])))?;
            let s: f64 = rec[2].trim().parse().map_err(|_| bad(format!("bad std for {}", &rec[0])))?;
            by_name.insert(rec[0].trim().to_string(), (m, s));
        }
        let names = feature_names();
        let missing: Vec<&str> = names.iter().filter(|n| !by_name.contains_key(*n)).map(String::as_str).collect();
        if !missing.is_empty() {
            return Err(DatasetError::Format { path: p, reason: format!("missing stats for {}", missing.join(", ")) });
        }
        let mean = names.iter().map(|n| by_name[n].0).collect();
        let std = names.iter().map(|n| by_name[n].1).collect();
        Ok(NormStats { names, mean, std })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<ReducedFrame>,
    /// Stats the feature columns were standardized with, if any.
    pub stats: Option<NormStats>,
    /// Seed for the downstream 80:20 train/test split.
    pub split_seed: u64,
}

impl Dataset {
    pub fn new(rows: Vec<ReducedFrame>) -> Self {
        Dataset { rows, stats: None, split_seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorts rows by time, then DIP.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.dip.cmp(&b.dip)));
    }

    /// Rows of one server, in time order.
    pub fn rows_for(&self, dip: u32) -> Vec<&ReducedFrame> {
        self.rows.iter().filter(|r| r.dip == dip).collect()
    }
}

/// Standardizes every feature column with stats fitted on `ds`. Ground-truth
/// columns are left in their natural units.
pub fn standardize(ds: &Dataset) -> (Dataset, NormStats) {
    let stats = NormStats::fit(&ds.rows);
    (standardize_with(ds, &stats), stats)
}

/// Applies previously fitted stats, e.g. training stats to a test split.
pub fn standardize_with(ds: &Dataset, stats: &NormStats) -> Dataset {
    let mut out = ds.clone();
    for r in &mut out.rows {
        stats.apply(&mut r.features);
    }
    out.stats = Some(stats.clone());
    out
}

/// Per-column upper cut-offs. Index `N_FEATURES + k` holds ground-truth
/// column `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierThresholds(pub Vec<Option<f64>>);

pub fn outlier_thresholds(ds: &Dataset, q: f64) -> OutlierThresholds {
    let mut out = Vec::with_capacity(N_FEATURES + 3);
    for j in 0..N_FEATURES {
        let mut col: Vec<f64> = ds.rows.iter().map(|r| r.features[j]).collect();
        out.push(quantile_of(&mut col, q));
    }
    for k in 0..3 {
        let mut col: Vec<f64> = ds.rows.iter().filter_map(|r| r.ground_truth.map(|g| g.as_array()[k])).collect();
        out.push(quantile_of(&mut col, q));
    }
    OutlierThresholds(out)
}

fn quantile_of(col: &mut [f64], q: f64) -> Option<f64> {
    if col.is_empty() {
        return None;
    }
    col.sort_by(f64::total_cmp);
    Some(nearest_rank(col, q))
}

pub fn drop_above(ds: &Dataset, thresholds: &OutlierThresholds) -> Dataset {
    let th = &thresholds.0;
    let keep = |r: &ReducedFrame| {
        let feats_ok = r.features.iter().zip(th).all(|(x, t)| t.is_none_or(|t| *x <= t));
        let gt_ok = r
            .ground_truth
            .is_none_or(|g| g.as_array().iter().zip(&th[N_FEATURES..]).all(|(x, t)| t.is_none_or(|t| *x <= t)));
        feats_ok && gt_ok
    };
    Dataset { rows: ds.rows.iter().filter(|r| keep(r)).cloned().collect(), ..ds.clone() }
}

/// Drops rows where any feature or ground-truth column exceeds that column's
/// nearest-rank `q`-quantile over `ds`.
pub fn drop_outliers(ds: &Dataset, q: f64) -> Dataset {
    drop_above(ds, &outlier_thresholds(ds, q))
}

/// Overlapping windows `[i * stride, i * stride + len)` fully inside `rows`.
pub fn windowize<T>(rows: &[T], len: usize, stride: usize) -> Vec<&[T]> {
    assert!(len > 0 && stride > 0);
    if rows.len() < len {
        return Vec::new();
    }
    (0..=(rows.len() - len) / stride).map(|i| &rows[i * stride..i * stride + len]).collect()
}

/// Header of the exported dataset: 3 keys, 73 features, 3 ground truth.
pub fn dataset_header() -> Vec<String> {
    let mut h = vec!["time".to_string(), "vip".to_string(), "dip".to_string()];
    h.extend(feature_names());
    h.extend(GROUND_TRUTH_COLUMNS.iter().map(|s| s.to_string()));
    h
}

/// Shortest decimal that round-trips to the same `f64`.
fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, DatasetError> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|source| DatasetError::Csv { path: path.display().to_string(), source })
}

pub fn export_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut w = csv_writer(path)?;
    let csv_err = |source| DatasetError::Csv { path: p.clone(), source };
    w.write_record(dataset_header()).map_err(csv_err)?;
    let mut rec: Vec<String> = Vec::with_capacity(3 + N_FEATURES + 3);
    for r in &ds.rows {
        rec.clear();
        rec.push(fmt_f64(r.time));
        rec.push(r.vip.to_string());
        rec.push(r.dip.to_string());
        rec.extend(r.features.iter().map(|&x| fmt_f64(x)));
        match r.ground_truth {
            Some(g) => rec.extend(g.as_array().iter().map(|&x| fmt_f64(x))),
            None => rec.extend(std::iter::repeat_n(String::new(), 3)),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DatasetError::Io { path: p.clone(), source })
}

pub fn import_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DatasetError::Csv { path: p.clone(), source })?;
    let header: Vec<String> = r
        .headers()
        .map_err(|source| DatasetError::Csv { path: p.clone(), source })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != dataset_header() {
        return Err(DatasetError::Format { path: p, reason: "unexpected header".into() });
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|source| DatasetError::Csv { path: p.clone(), source })?;
        let bad =
            |what: &str| DatasetError::Format { path: p.clone(), reason: format!("row {}: bad {what}", line + 1) };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&header[i]));
        let time = num(0)?;
        let vip = rec[1].parse().map_err(|_| bad("vip"))?;
        let dip = rec[2].parse().map_err(|_| bad("dip"))?;
        let features = (3..3 + N_FEATURES).map(num).collect::<Result<Vec<_>, _>>()?;
        let gt_at = 3 + N_FEATURES;
        let ground_truth = if rec[gt_at].is_empty() {
            None
        } else {
            Some(GroundTruthRow { n_cpu: num(gt_at)?, cpu_usage: num(gt_at + 1)?, busy_threads: num(gt_at + 2)? })
        };
        rows.push(ReducedFrame { time, vip, dip, features, ground_truth });
    }
    Ok(Dataset::new(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(features: Vec<f64>) -> ReducedFrame {
        ReducedFrame { time: 0.0, vip: 0, dip: 0, features, ground_truth: None }
    }

    #[test]
    fn reduce_three_samples() {
        let r = reduce_channel(&[1.0, 2.0, 3.0], None);
        assert_eq!((r.avg, r.p90, r.decay_avg, r.decay_p90), (2.0, 3.0, 2.0, 3.0));
        assert!((r.std - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn decay_blends_previous() {
        let prev = Reductions { decay_avg: 1.0, decay_p90: 1.0, ..Default::default() };
        let r = reduce_channel(&[5.0], Some(&prev));
        assert!((r.decay_avg - 1.4).abs() < 1e-12);
        assert!((r.decay_p90 - 1.4).abs() < 1e-12);
    }

    #[test]
    fn empty_carries_forward() {
        let prev = reduce_channel(&[4.0, 8.0], None);
        assert_eq!(reduce_channel(&[], Some(&prev)), prev);
        assert_eq!(reduce_channel(&[], None), Reductions::default());
    }

    #[test]
    fn nearest_rank_edges() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.99), 990.0);
        assert_eq!(nearest_rank(&v, 1.0), 1000.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&[1.0, 2.0, 3.0], 0.9), 3.0);
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&ten, 0.9), 9.0);
    }

    #[test]
    fn standardize_small_columns() {
        let mut a = vec![0.0; N_FEATURES];
        let mut b = vec![0.0; N_FEATURES];
        a[0] = 0.0;
        b[0] = 2.0;
        a[1] = 5.0;
        b[1] = 5.0;
        let (out, stats) = standardize(&Dataset::new(vec![row(a), row(b)]));
        assert_eq!((out.rows[0].features[0], out.rows[1].features[0]), (-1.0, 1.0));
        assert_eq!((out.rows[0].features[1], out.rows[1].features[1]), (0.0, 0.0));
        assert_eq!(stats.std[0], 1.0);
    }

    #[test]
    fn identical_rows_survive_outlier_drop() {
        let ds = Dataset::new(vec![row(vec![3.0; N_FEATURES]); 50]);
        assert_eq!(drop_outliers(&ds, 0.99).len(), 50);
    }

    #[test]
    fn windows() {
        let rows: Vec<u32> = (0..128).collect();
        assert_eq!(windowize(&rows, 64, 32).len(), 3);
        assert_eq!(windowize(&rows[..63], 64, 32).len(), 0);
        assert_eq!(windowize(&rows[..64], 64, 32).len(), 1);
        assert_eq!(windowize(&rows, 64, 32)[2][0], 64);
    }

    #[test]
    fn header_arity() {
        assert_eq!(feature_names().len(), 73);
        assert_eq!(dataset_header().len(), 79);
        assert!(feature_names().contains(&"fct_avg".to_string()));
    }

    #[test]
    fn empty_export_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        export_dataset(&Dataset::default(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("time,vip,dip,n_syn,"));
        assert!(import_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn stats_file_round_trip_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        let mut s = NormStats::identity();
        s.mean[3] = 0.1 + 0.2;
        s.write_csv(&p).unwrap();
        assert_eq!(NormStats::read_csv(&p).unwrap(), s);
        let text = std::fs::read_to_string(&p).unwrap();
        let trimmed: String = text.lines().filter(|l| !l.starts_with("fct_p90,")).map(|l| format!("{l}\n")).collect();
        std::fs::write(&p, trimmed).unwrap();
        let err = NormStats::read_csv(&p).unwrap_err().to_string();
        assert!(err.contains("fct_p90"), "{err}");
    }
}
