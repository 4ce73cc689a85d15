//! Load-distribution metrics and the per-window series a run emits.

use crate::feature_pipeline::nearest_rank;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Jain's fairness index `(sum x)^2 / (n sum x^2)`; 1.0 for an all-zero or
/// empty input.
pub fn jain_fairness(values: &[f64]) -> f64 {
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|x| x * x).sum();
    if values.is_empty() || sq == 0.0 {
        return 1.0;
    }
    sum * sum / (values.len() as f64 * sq)
}

/// Max-to-mean ratio; 1.0 when the mean is zero.
pub fn overprovision(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean <= 0.0 {
        return 1.0;
    }
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max) / mean
}

/// One frame window of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub time: f64,
    /// Fairness of per-server busy threads, time-averaged over the window.
    pub jain_busy: f64,
    pub overprovision_busy: f64,
    pub mean_cpu: f64,
    /// Flow completion times of flows whose FIN reached the balancer in this
    /// window; zero when none did.
    pub fct_mean: f64,
    pub fct_p90: f64,
    pub fct_p99: f64,
    pub rst_count: u64,
    pub completed: u64,
}

pub const METRICS_HEADER: [&str; 9] =
    ["time", "jain_busy", "overprovision_busy", "mean_cpu", "fct_mean", "fct_p90", "fct_p99", "rst_count", "completed"];

impl WindowMetrics {
    /// Builds a window from per-server busy/cpu averages and the FCTs that
    /// finished inside it. `fcts` is sorted in place.
    pub fn from_window(time: f64, busy: &[f64], cpu: &[f64], fcts: &mut [f64], rst_count: u64) -> Self {
        fcts.sort_by(f64::total_cmp);
        let (fct_mean, fct_p90, fct_p99) = if fcts.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (fcts.iter().sum::<f64>() / fcts.len() as f64, nearest_rank(fcts, 0.9), nearest_rank(fcts, 0.99))
        };
        WindowMetrics {
            time,
            jain_busy: jain_fairness(busy),
            overprovision_busy: overprovision(busy),
            mean_cpu: if cpu.is_empty() { 0.0 } else { cpu.iter().sum::<f64>() / cpu.len() as f64 },
            fct_mean,
            fct_p90,
            fct_p99,
            rst_count,
            completed: fcts.len() as u64,
        }
    }
}

/// Run-level aggregates; every field is a function of the window series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub windows: usize,
    pub mean_jain_busy: f64,
    pub mean_overprovision_busy: f64,
    pub mean_cpu: f64,
    /// Completion-weighted mean FCT.
    pub fct_mean: f64,
    /// Mean of the per-window tails over windows with completions.
    pub fct_p90_mean: f64,
    pub fct_p99_mean: f64,
    pub rst_total: u64,
    pub completed_total: u64,
}

impl Summary {
    pub fn from_series(series: &[WindowMetrics]) -> Self {
        let n = series.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = |f: fn(&WindowMetrics) -> f64| series.iter().map(f).sum::<f64>() / n as f64;
        let completed_total: u64 = series.iter().map(|w| w.completed).sum();
        let with_fct: Vec<&WindowMetrics> = series.iter().filter(|w| w.completed > 0).collect();
        let tail_mean = |f: fn(&WindowMetrics) -> f64| {
            if with_fct.is_empty() {
                0.0
            } else {
                with_fct.iter().map(|w| f(w)).sum::<f64>() / with_fct.len() as f64
            }
        };
        Summary {
            windows: n,
            mean_jain_busy: mean(|w| w.jain_busy),
            mean_overprovision_busy: mean(|w| w.overprovision_busy),
            mean_cpu: mean(|w| w.mean_cpu),
            fct_mean: if completed_total == 0 {
                0.0
            } else {
                series.iter().map(|w| w.fct_mean * w.completed as f64).sum::<f64>() / completed_total as f64
            },
            fct_p90_mean: tail_mean(|w| w.fct_p90),
            fct_p99_mean: tail_mean(|w| w.fct_p99),
            rst_total: series.iter().map(|w| w.rst_count).sum(),
            completed_total,
        }
    }
}

pub fn write_metrics_csv(series: &[WindowMetrics], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", METRICS_HEADER.join(","))?;
    for w in series {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            w.time,
            w.jain_busy,
            w.overprovision_busy,
            w.mean_cpu,
            w.fct_mean,
            w.fct_p90,
            w.fct_p99,
            w.rst_count,
            w.completed
        )?;
    }
    out.flush()
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<WindowMetrics>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    pearson(&ra, &rb)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
