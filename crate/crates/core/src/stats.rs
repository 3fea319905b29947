//! Sign-flip permutation tests and temporal cluster reporting.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_MIN_CLUSTER: usize = 5;
pub const MIN_SLOPE_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub t_obs: f64,
    pub p_null: f64,
    pub cohens_d: f64,
    pub n_iterations: usize,
    pub null_distribution: Vec<f64>,
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-sample t statistic; infinite for constant non-zero input.
fn t_stat(x: &[f64]) -> f64 {
    let (mean, sd) = mean_sd(x);
    if sd == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        }
    } else {
        mean / (sd / (x.len() as f64).sqrt())
    }
}

/// Add-one corrected two-sided p value.
pub fn p_two_sided(t_obs: f64, null: &[f64]) -> f64 {
    let hits = null.iter().filter(|t| t.abs() >= t_obs.abs()).count();
    (hits + 1) as f64 / (null.len() + 1) as f64
}

/// One-sample test against zero by random sign flips of `x`.
///
/// A sample with zero variance but non-zero mean has an infinite t
/// statistic; an all-zero sample is an error.
pub fn perm_test_vs_zero(x: &[f64], n_iter: usize, seed: u64) -> Result<PermTestResult> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 values, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value".into()));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }
    let t_obs = t_stat(x);
    let (mean, sd) = mean_sd(x);
    let cohens_d = if sd == 0.0 { f64::INFINITY.copysign(mean) } else { mean / sd };
    let null_distribution: Vec<f64> = (0..n_iter)
        .map(|i| {
            let mut rng = rng_for(seed, Stream::Permutation, &[i as u64]);
            let flipped: Vec<f64> = x
                .iter()
                .map(|&v| if rng.random::<bool>() { -v } else { v })
                .collect();
            t_stat(&flipped)
        })
        .collect();
    Ok(PermTestResult {
        t_obs,
        p_null: p_two_sided(t_obs, &null_distribution),
        cohens_d,
        n_iterations: n_iter,
        null_distribution,
    })
}

/// Paired test: sign flips of the within-subject differences `a - b`.
pub fn perm_ttest_paired(a: &[f64], b: &[f64], n_iter: usize, seed: u64) -> Result<PermTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    perm_test_vs_zero(&d, n_iter, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub start_s: f64,
    pub end_s: f64,
    pub start_index: usize,
    pub end_index: usize,
    pub n_timepoints: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub alpha: f64,
    pub min_cluster: usize,
    pub clusters: Vec<Cluster>,
    /// Pointwise p values.
    pub p_values: Vec<f64>,
}

impl ClusterReport {
    /// First cluster containing or following `t_s`.
    pub fn first_after(&self, t_s: f64) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.end_s >= t_s)
    }
}

/// Contiguous runs of `p < alpha` at least `min_cluster` samples long.
pub fn find_clusters(p: &[f64], time_s: &[f64], alpha: f64, min_cluster: usize) -> Vec<Cluster> {
    let mut out = Vec::new();
    let mut start = None;
    for i in 0..=p.len() {
        let sig = i < p.len() && p[i] < alpha;
        match (sig, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let n = i - s;
                if n >= min_cluster.max(1) {
                    out.push(Cluster {
                        start_s: time_s[s],
                        end_s: time_s[i - 1],
                        start_index: s,
                        end_index: i - 1,
                        n_timepoints: n,
                    });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum Baseline {
    Scalar(f64),
    /// Subjects x time.
    Matrix(Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub alpha: f64,
    pub min_cluster: usize,
    pub n_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_cluster: DEFAULT_MIN_CLUSTER,
            n_iter: DEFAULT_ITERATIONS,
        }
    }
}

/// Pointwise sign-flip tests of `values - baseline` (subjects x time)
/// followed by cluster extraction. Timepoints where every difference is
/// zero get p = 1.
pub fn timecourse_significance(
    values: &Array2<f64>,
    baseline: &Baseline,
    time_s: &[f64],
    cfg: &ClusterConfig,
    seed: u64,
) -> Result<ClusterReport> {
    let (n_sub, n_t) = values.dim();
    if n_sub < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 subjects, got {n_sub}")));
    }
    if time_s.len() != n_t {
        return Err(Error::InvalidInput(format!("{} times for {n_t} timepoints", time_s.len())));
    }
    let diff = match baseline {
        Baseline::Scalar(b) => values - *b,
        Baseline::Matrix(m) if m.dim() == values.dim() => values - m,
        Baseline::Matrix(m) => {
            return Err(Error::InvalidInput(format!(
                "baseline shape {:?} vs values {:?}",
                m.dim(),
                values.dim()
            )))
        }
    };
    let p_values: Vec<f64> = (0..n_t)
        .into_par_iter()
        .map(|t| {
            let col = diff.column(t).to_vec();
            if col.iter().all(|&v| v == 0.0) {
                return Ok(1.0);
            }
            Ok(perm_test_vs_zero(&col, cfg.n_iter, crate::rng::derive_seed(seed, Stream::Timepoint, &[t as u64]))?.p_null)
        })
        .collect::<Result<_>>()?;
    Ok(ClusterReport {
        alpha: cfg.alpha,
        min_cluster: cfg.min_cluster,
        clusters: find_clusters(&p_values, time_s, cfg.alpha, cfg.min_cluster),
        p_values,
    })
}

/// Group-mean slope against the distribution of permuted group-mean slopes
/// (upper tail, add-one corrected). `slope_perm` is subjects x iterations x
/// time.
pub fn slope_vs_permuted(
    slopes: &Array2<f64>,
    slope_perm: &Array3<f64>,
    time_s: &[f64],
    alpha: f64,
    min_cluster: usize,
) -> Result<ClusterReport> {
    let (n_sub, n_t) = slopes.dim();
    let (ps, n_iter, pt) = slope_perm.dim();
    if ps != n_sub || pt != n_t || time_s.len() != n_t {
        return Err(Error::InvalidInput(format!(
            "slopes {:?}, permuted {:?}, {} times",
            slopes.dim(),
            slope_perm.dim(),
            time_s.len()
        )));
    }
    if n_iter < MIN_SLOPE_ITERATIONS {
        return Err(Error::InsufficientTrials {
            group: "permutation iterations".into(),
            count: n_iter,
            required: MIN_SLOPE_ITERATIONS,
        });
    }
    let observed = slopes.mean_axis(Axis(0)).unwrap();
    let null = slope_perm.mean_axis(Axis(0)).unwrap(); // iterations x time
    let p_values: Vec<f64> = (0..n_t)
        .map(|t| upper_tail_p(observed[t], null.column(t)))
        .collect();
    Ok(ClusterReport {
        alpha,
        min_cluster,
        clusters: find_clusters(&p_values, time_s, alpha, min_cluster),
        p_values,
    })
}

pub fn upper_tail_p(obs: f64, null: ArrayView1<f64>) -> f64 {
    let hits = null.iter().filter(|&&v| v >= obs).count();
    (hits + 1) as f64 / (null.len() + 1) as f64
}

/// Ranks with ties averaged, 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}
