//! Inverted encoding model for location-selective alpha power.
//!
//! Each iteration splits the trials of every location bin into `k` random
//! sets; per timepoint each set is averaged, giving `6 * k` inputs. A weight matrix mapping six
//! location channels to electrodes is trained on `k - 1` sets and inverted on
//! the held-out set. Reconstructed channel responses are circularly shifted
//! so the true location sits at offset 0, folded around 0 and summarised by
//! a slope.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bin_center, wrap_deg, BandPowerSet, Condition, N_BINS};
use crate::erp::csv_err;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Stream};

/// Channel centres in degrees.
pub const CENTERS_DEG: [f64; N_BINS] = [30.0, 90.0, 150.0, 210.0, 270.0, 330.0];
/// Offsets of the centred channel response function.
pub const OFFSETS_DEG: [f64; N_BINS] = [-120.0, -60.0, 0.0, 60.0, 120.0, 180.0];
/// Offsets of the folded function.
pub const FOLDED_OFFSETS_DEG: [f64; 4] = [0.0, 60.0, 120.0, 180.0];
/// Regressor used by [`crf_slope`]: reversed offset steps.
pub const SLOPE_X: [f64; 4] = [3.0, 2.0, 1.0, 0.0];
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IemConfig {
    /// Averaged inputs per bin, also the fold count.
    pub n_averaged_per_bin: usize,
    pub n_trialset_iterations: usize,
    /// Label shuffles per repeat of the permuted model.
    pub n_perm_labelsets: usize,
    pub n_perm_repeats: usize,
    pub exponent: i32,
    /// Electrodes to model; `None` selects all posterior channels that are
    /// not marked bad.
    pub electrodes: Option<Vec<String>>,
}

impl Default for IemConfig {
    fn default() -> Self {
        Self {
            n_averaged_per_bin: 3,
            n_trialset_iterations: 10,
            n_perm_labelsets: 10,
            n_perm_repeats: 5,
            exponent: 7,
            electrodes: None,
        }
    }
}

impl IemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_averaged_per_bin < 2 {
            return Err(Error::Config("n_averaged_per_bin must be >= 2".into()));
        }
        if self.n_trialset_iterations == 0 {
            return Err(Error::Config("n_trialset_iterations must be >= 1".into()));
        }
        if self.exponent < 1 {
            return Err(Error::Config("basis exponent must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_permutations(&self) -> usize {
        self.n_perm_labelsets * self.n_perm_repeats
    }
}

/// `cos(delta / 2)^exponent` with `delta` the wrapped difference in
/// (-180, 180]; exactly 0 at 180.
pub fn basis_response(theta_deg: f64, center_deg: f64, exponent: i32) -> f64 {
    let d = wrap_deg(theta_deg - center_deg);
    if d == 180.0 {
        return 0.0;
    }
    (d / 2.0).to_radians().cos().max(0.0).powi(exponent)
}

/// Channel responses for `angles`, 6 x n.
pub fn basis_matrix(angles_deg: &[f64], exponent: i32) -> DMatrix<f64> {
    DMatrix::from_fn(N_BINS, angles_deg.len(), |j, i| {
        basis_response(angles_deg[i], CENTERS_DEG[j], exponent)
    })
}

/// Averaged IEM inputs for one timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedInputs {
    /// Electrodes x inputs.
    pub b: DMatrix<f64>,
    /// Mean basis response of each input's member trials, 6 x inputs.
    pub c: DMatrix<f64>,
    pub bins: Vec<u8>,
    /// Set index within the bin, used as the fold label.
    pub fold: Vec<usize>,
    /// Trial indices averaged into each input.
    pub members: Vec<Vec<usize>>,
}

impl AveragedInputs {
    pub fn n_inputs(&self) -> usize {
        self.bins.len()
    }

    fn columns(&self, keep: impl Fn(usize) -> bool) -> (DMatrix<f64>, DMatrix<f64>, Vec<u8>) {
        let idx: Vec<usize> = (0..self.n_inputs()).filter(|&i| keep(i)).collect();
        let b = self.b.select_columns(&idx);
        let c = self.c.select_columns(&idx);
        (b, c, idx.iter().map(|&i| self.bins[i]).collect())
    }
}

/// Split every bin's trials into `n_sets` near-equal random sets and average
/// each set electrode-wise. `data` is trials x electrodes at one timepoint.
pub fn make_averaged_trials(
    data: ndarray::ArrayView2<f64>,
    bins: &[u8],
    angles_deg: &[f64],
    n_sets: usize,
    exponent: i32,
    seed: u64,
) -> Result<AveragedInputs> {
    let n_trials = data.nrows();
    if bins.len() != n_trials || angles_deg.len() != n_trials {
        return Err(Error::InvalidInput(format!(
            "{n_trials} trials but {} bins and {} angles",
            bins.len(),
            angles_deg.len()
        )));
    }
    let c_rows: Vec<[f64; N_BINS]> = angles_deg.iter().map(|&a| basis_row(a, exponent)).collect();
    let all: Vec<usize> = (0..n_trials).collect();
    average_sets(data, &split_by_bin(&all, bins), &c_rows, n_sets, seed)
}

/// Members of `trials` grouped by their bin label.
fn split_by_bin(trials: &[usize], bins: &[u8]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); N_BINS];
    for &t in trials {
        out[bins[t] as usize].push(t);
    }
    out
}

fn basis_row(angle_deg: f64, exponent: i32) -> [f64; N_BINS] {
    std::array::from_fn(|j| basis_response(angle_deg, CENTERS_DEG[j], exponent))
}

/// Averaging over rows of `data` listed per bin in `by_bin`; `c_rows` is
/// indexed like `data`.
#[doc(hidden)]
pub fn average_sets(
    data: ndarray::ArrayView2<f64>,
    by_bin: &[Vec<usize>],
    c_rows: &[[f64; N_BINS]],
    n_sets: usize,
    seed: u64,
) -> Result<AveragedInputs> {
    let m = data.ncols();
    let owned;
    let flat = match data.as_slice() {
        Some(f) => f,
        None => {
            owned = data.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut rng = rng_for(seed, Stream::IemPartition, &[]);
    let mut members = Vec::with_capacity(N_BINS * n_sets);
    let mut out_bins = Vec::with_capacity(N_BINS * n_sets);
    let mut fold = Vec::with_capacity(N_BINS * n_sets);
    for (b, members_of_bin) in by_bin.iter().enumerate() {
        let b = b as u8;
        let mut own = members_of_bin.clone();
        if own.len() < n_sets {
            return Err(Error::InsufficientTrials {
                group: format!("bin {b}"),
                count: own.len(),
                required: n_sets,
            });
        }
        own.shuffle(&mut rng);
        for s in 0..n_sets {
            members.push(own.iter().skip(s).step_by(n_sets).copied().collect::<Vec<_>>());
            out_bins.push(b);
            fold.push(s);
        }
    }
    let n = members.len();
    let mut bm = DMatrix::zeros(m, n);
    let mut cm = DMatrix::zeros(N_BINS, n);
    for (col, set) in members.iter().enumerate() {
        let w = 1.0 / set.len() as f64;
        let mut bcol = vec![0.0; m];
        let mut ccol = [0.0; N_BINS];
        for &t in set {
            let row = &flat[t * m..(t + 1) * m];
            for (acc, v) in bcol.iter_mut().zip(row) {
                *acc += v;
            }
            for (acc, v) in ccol.iter_mut().zip(&c_rows[t]) {
                *acc += v;
            }
        }
        for e in 0..m {
            bm[(e, col)] = bcol[e] * w;
        }
        for j in 0..N_BINS {
            cm[(j, col)] = ccol[j] * w;
        }
    }
    Ok(AveragedInputs {
        b: bm,
        c: cm,
        bins: out_bins,
        fold,
        members,
    })
}

fn condition_number_sym(g: &DMatrix<f64>) -> f64 {
    let ev = g.clone().symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

fn inverse_checked(g: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.shape() == (N_BINS, N_BINS) {
        // stack-allocated fast path for the channel Gram matrices
        let s: nalgebra::Matrix6<f64> = g.fixed_view::<6, 6>(0, 0).into_owned();
        let ev = s.symmetric_eigenvalues();
        let (min, max) = (ev.min(), ev.max());
        let cond = if min <= 0.0 || !min.is_finite() { f64::INFINITY } else { max / min };
        if !(cond < MAX_CONDITION) {
            return Err(Error::IllConditioned(cond));
        }
        let inv = s.cholesky().map(|c| c.inverse()).ok_or(Error::IllConditioned(cond))?;
        return Ok(DMatrix::from_column_slice(N_BINS, N_BINS, inv.as_slice()));
    }
    let cond = condition_number_sym(&g);
    if !(cond < MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    g.cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::IllConditioned(cond))
}

/// `W = B1 C1^T (C1 C1^T)^-1`, electrodes x channels.
pub fn train_weights(b1: &DMatrix<f64>, c1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b1.ncols() != c1.ncols() {
        return Err(Error::InvalidInput(format!(
            "B1 has {} columns, C1 has {}",
            b1.ncols(),
            c1.ncols()
        )));
    }
    if b1.nrows() < c1.nrows() {
        return Err(Error::InvalidInput(format!(
            "{} electrodes cannot resolve {} channels",
            b1.nrows(),
            c1.nrows()
        )));
    }
    let g_inv = inverse_checked(c1 * c1.transpose())?;
    Ok(b1 * c1.transpose() * g_inv)
}

/// Left pseudo-inverse of `w`: `(W^T W)^-1 W^T`.
pub fn pseudo_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h_inv = inverse_checked(w.transpose() * w)?;
    Ok(h_inv * w.transpose())
}

/// `C2 = (W^T W)^-1 W^T B2`, channels x trials.
pub fn invert(w: &DMatrix<f64>, b2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != b2.nrows() {
        return Err(Error::InvalidInput(format!(
            "W has {} electrodes, B2 has {}",
            w.nrows(),
            b2.nrows()
        )));
    }
    Ok(pseudo_inverse(w)? * b2)
}

/// Rotate channel responses so the channel at `bin` lands on offset 0.
pub fn center_response(responses: &[f64], bin: u8) -> [f64; N_BINS] {
    let mut out = [0.0; N_BINS];
    for (o, v) in out.iter_mut().enumerate() {
        // OFFSETS_DEG[2] is 0
        *v = responses[(bin as usize + o + N_BINS - 2) % N_BINS];
    }
    out
}

/// k-fold cross-validated, centred channel response function, averaged over
/// all held-out inputs. Returns one centred function per fold as well.
pub fn crossvalidate_timepoint(inputs: &AveragedInputs) -> Result<([f64; N_BINS], Vec<[f64; N_BINS]>)> {
    let k = inputs.fold.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    let mut per_fold = Vec::with_capacity(k);
    let mut total = [0.0; N_BINS];
    let mut n_total = 0usize;
    for f in 0..k {
        let (b_train, c_train, _) = inputs.columns(|i| inputs.fold[i] != f);
        let (b_test, _, test_bins) = inputs.columns(|i| inputs.fold[i] == f);
        let mut seen = [false; N_BINS];
        test_bins.iter().for_each(|&b| seen[b as usize] = true);
        if let Some(b) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("fold {f} has no input for bin {b}")));
        }
        let w = train_weights(&b_train, &c_train)?;
        let c_hat = invert(&w, &b_test)?;
        let mut acc = [0.0; N_BINS];
        for (col, &bin) in test_bins.iter().enumerate() {
            let r: Vec<f64> = c_hat.column(col).iter().copied().collect();
            let centred = center_response(&r, bin);
            for o in 0..N_BINS {
                acc[o] += centred[o];
                total[o] += centred[o];
            }
        }
        n_total += test_bins.len();
        per_fold.push(acc.map(|v| v / test_bins.len() as f64));
    }
    Ok((total.map(|v| v / n_total as f64), per_fold))
}

/// Average symmetric offsets: `[0, (-60, 60), (-120, 120), 180]`.
pub fn fold_crf(offsets_deg: &[f64], values: &[f64]) -> Result<[f64; 4]> {
    if offsets_deg != OFFSETS_DEG || values.len() != N_BINS {
        return Err(Error::InvalidInput(format!(
            "expected offsets {OFFSETS_DEG:?}, got {offsets_deg:?} with {} values",
            values.len()
        )));
    }
    Ok(fold(values.try_into().unwrap()))
}

fn fold(v: &[f64; N_BINS]) -> [f64; 4] {
    [v[2], (v[1] + v[3]) / 2.0, (v[0] + v[4]) / 2.0, v[5]]
}

/// OLS slope of the folded function against `[3, 2, 1, 0]`; positive when
/// the response peaks at the true location.
pub fn crf_slope(folded: &[f64; 4]) -> f64 {
    let xm = SLOPE_X.iter().sum::<f64>() / 4.0;
    let ym = folded.iter().sum::<f64>() / 4.0;
    let sxy: f64 = SLOPE_X.iter().zip(folded).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = SLOPE_X.iter().map(|x| (x - xm).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCrf {
    /// Centred function per timepoint at [`OFFSETS_DEG`].
    pub crf: Vec<[f64; N_BINS]>,
    /// Folded function per timepoint at [`FOLDED_OFFSETS_DEG`].
    pub folded: Vec<[f64; 4]>,
    pub slope: Vec<f64>,
    /// Permutation x time, empty until [`attach_permuted`] is called.
    pub slope_perm: Vec<Vec<f64>>,
    /// Mean centred function over permutations.
    pub crf_perm_mean: Vec<[f64; N_BINS]>,
}

impl ConditionCrf {
    fn from_crf(crf: Vec<[f64; N_BINS]>) -> Self {
        let folded: Vec<[f64; 4]> = crf.iter().map(fold).collect();
        let slope = folded.iter().map(crf_slope).collect();
        Self {
            crf,
            folded,
            slope,
            slope_perm: Vec::new(),
            crf_perm_mean: Vec::new(),
        }
    }

    /// Timecourse at one entry of [`OFFSETS_DEG`].
    pub fn at_offset(&self, offset_index: usize) -> Vec<f64> {
        self.crf.iter().map(|c| c[offset_index]).collect()
    }

    /// Per-timepoint 95th percentile of the permuted slopes.
    pub fn slope_perm_p95(&self) -> Vec<f64> {
        (0..self.slope.len())
            .map(|t| {
                let mut v: Vec<f64> = self.slope_perm.iter().map(|p| p[t]).collect();
                percentile(&mut v, 0.95)
            })
            .collect()
    }
}

/// Linear-interpolated percentile, `q` in [0, 1]. NaN for empty input.
pub fn percentile(v: &mut [f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfTimecourse {
    pub time_s: Vec<f64>,
    pub electrodes: Vec<String>,
    pub n_folds: usize,
    pub n_trialset_iterations: usize,
    /// Trials per condition and bin entering the model.
    pub n_trials_per_bin: usize,
    pub seed: u64,
    pub conditions: BTreeMap<Condition, ConditionCrf>,
}

/// Model input shared by the real and permuted runs.
struct Prepared {
    /// Samples x trials x electrodes, contiguous per timepoint.
    by_time: ndarray::Array3<f64>,
    /// Per condition: trial indices (into `data`) used by the fixed model.
    groups: Vec<(Condition, Vec<usize>)>,
    bins: Vec<u8>,
    angles: Vec<f64>,
    electrodes: Vec<String>,
    n_per_bin: usize,
}

fn model_electrodes(bp: &BandPowerSet, cfg: &IemConfig) -> Vec<String> {
    match &cfg.electrodes {
        Some(e) => e.clone(),
        None => bp.layout.posterior_labels(),
    }
    .into_iter()
    .filter(|l| !bp.bad_channels.contains(l))
    .collect()
}

fn prepare(bp: &BandPowerSet, cfg: &IemConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let electrodes = model_electrodes(bp, cfg);
    if electrodes.len() < N_BINS {
        return Err(Error::InvalidInput(format!(
            "{} usable electrodes, at least {N_BINS} required",
            electrodes.len()
        )));
    }
    let idx = bp.layout.indices_of(&electrodes)?;
    // Equal trial counts per condition and bin for the fixed model.
    let conditions = bp.conditions();
    let mut by_bin: Vec<Vec<Vec<usize>>> = Vec::new();
    for &cond in &conditions {
        let mut bins = vec![Vec::new(); N_BINS];
        for t in bp.trials_of(cond) {
            bins[bp.meta[t].bin_index as usize].push(t);
        }
        if let Some(b) = bins.iter().position(Vec::is_empty) {
            return Err(Error::InsufficientTrials {
                group: format!("{cond} bin {b}"),
                count: 0,
                required: cfg.n_averaged_per_bin,
            });
        }
        by_bin.push(bins);
    }
    let n_per_bin = by_bin.iter().flatten().map(Vec::len).min().unwrap_or(0);
    if n_per_bin < cfg.n_averaged_per_bin {
        return Err(Error::InsufficientTrials {
            group: "smallest condition bin".into(),
            count: n_per_bin,
            required: cfg.n_averaged_per_bin,
        });
    }
    let mut keep = Vec::new();
    let mut groups = Vec::new();
    for (ci, (&cond, bins)) in conditions.iter().zip(&by_bin).enumerate() {
        let mut trials = Vec::new();
        for (b, members) in bins.iter().enumerate() {
            let mut rng = rng_for(seed, Stream::ConditionBalance, &[ci as u64, b as u64]);
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, members.len(), n_per_bin)
                .into_iter()
                .map(|j| members[j])
                .collect();
            chosen.sort_unstable();
            trials.extend(chosen);
        }
        trials.sort_unstable();
        let local: Vec<usize> = (keep.len()..keep.len() + trials.len()).collect();
        keep.extend(trials);
        groups.push((cond, local));
    }
    let data = bp.data.select(Axis(0), &keep).select(Axis(1), &idx);
    let by_time = data.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    Ok(Prepared {
        by_time,
        groups,
        bins: keep.iter().map(|&t| bp.meta[t].bin_index).collect(),
        angles: keep.iter().map(|&t| bp.meta[t].angle_deg).collect(),
        electrodes,
        n_per_bin,
    })
}

/// One iteration's averaged-trial sets, shared by every timepoint.
struct Partition {
    /// Member trials of each input, pooled over groups.
    members: Vec<Vec<usize>>,
    bins: Vec<u8>,
    group_of: Vec<usize>,
    folds: Vec<Fold>,
}

struct Fold {
    test: Vec<usize>,
    /// `C1^T (C1 C1^T)^-1` with zero rows for the test inputs, so that
    /// `W = B * proj`.
    proj: DMatrix<f64>,
}

fn partition(prep: &Prepared, bins: &[u8], c_rows: &[[f64; N_BINS]], n_sets: usize, seed: u64) -> Result<Partition> {
    let mut members = Vec::new();
    let mut out_bins = Vec::new();
    let mut fold_of = Vec::new();
    let mut group_of = Vec::new();
    for (gi, (_, trials)) in prep.groups.iter().enumerate() {
        let mut rng = rng_for(seed, Stream::IemPartition, &[gi as u64]);
        for (b, own) in split_by_bin(trials, bins).into_iter().enumerate() {
            if own.len() < n_sets {
                return Err(Error::InsufficientTrials {
                    group: format!("bin {b}"),
                    count: own.len(),
                    required: n_sets,
                });
            }
            let mut own = own;
            own.shuffle(&mut rng);
            for s in 0..n_sets {
                members.push(own.iter().skip(s).step_by(n_sets).copied().collect::<Vec<_>>());
                out_bins.push(b as u8);
                fold_of.push(s);
                group_of.push(gi);
            }
        }
    }
    let c = DMatrix::from_fn(N_BINS, members.len(), |j, i| {
        members[i].iter().map(|&t| c_rows[t][j]).sum::<f64>() / members[i].len() as f64
    });
    let folds = (0..n_sets)
        .map(|f| {
            let train: Vec<usize> = (0..members.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..members.len()).filter(|&i| fold_of[i] == f).collect();
            let c1 = c.select_columns(&train);
            let p = c1.transpose() * inverse_checked(&c1 * c1.transpose())?;
            let mut proj = DMatrix::zeros(members.len(), N_BINS);
            for (r, &i) in train.iter().enumerate() {
                proj.set_row(i, &p.row(r));
            }
            Ok(Fold { test, proj })
        })
        .collect::<Result<_>>()?;
    Ok(Partition {
        members,
        bins: out_bins,
        group_of,
        folds,
    })
}

/// Centred functions per condition and timepoint for one labelling.
/// `run` distinguishes the real model (0) from permutations (1..).
fn timecourse(
    prep: &Prepared,
    bins: &[u8],
    angles: &[f64],
    cfg: &IemConfig,
    seed: u64,
    run: u64,
) -> Result<Vec<Vec<[f64; N_BINS]>>> {
    let n_t = prep.by_time.len_of(Axis(0));
    let n_groups = prep.groups.len();
    let c_rows: Vec<[f64; N_BINS]> = angles.iter().map(|&a| basis_row(a, cfg.exponent)).collect();
    let parts: Vec<Partition> = (0..cfg.n_trialset_iterations)
        .map(|it| {
            let s = derive_seed(seed, Stream::IemPartition, &[run, it as u64]);
            partition(prep, bins, &c_rows, cfg.n_averaged_per_bin, s)
        })
        .collect::<Result<_>>()?;
    let m = prep.by_time.len_of(Axis(2));
    let per_t: Vec<Vec<[f64; N_BINS]>> = (0..n_t)
        .into_par_iter()
        .map(|t| -> Result<Vec<[f64; N_BINS]>> {
            let slice = prep.by_time.index_axis(Axis(0), t);
            let flat = slice.as_slice().expect("standard layout");
            let mut acc = vec![[0.0; N_BINS]; n_groups];
            for part in &parts {
                let n = part.members.len();
                let mut b = DMatrix::<f64>::zeros(m, n);
                for (col, set) in b.as_mut_slice().chunks_exact_mut(m).zip(&part.members) {
                    for &tr in set {
                        for (a, v) in col.iter_mut().zip(&flat[tr * m..(tr + 1) * m]) {
                            *a += v;
                        }
                    }
                    let w = 1.0 / set.len() as f64;
                    col.iter_mut().for_each(|a| *a *= w);
                }
                let mut sums = vec![[0.0; N_BINS]; n_groups];
                let mut counts = vec![0usize; n_groups];
                for fold in &part.folds {
                    let w = &b * &fold.proj;
                    let r = pseudo_inverse(&w)? * &b;
                    for &i in &fold.test {
                        let centred = center_response(r.column(i).as_slice(), part.bins[i]);
                        let g = part.group_of[i];
                        counts[g] += 1;
                        for o in 0..N_BINS {
                            sums[g][o] += centred[o];
                        }
                    }
                }
                for ((a, s), n) in acc.iter_mut().zip(&sums).zip(&counts) {
                    for o in 0..N_BINS {
                        a[o] += s[o] / *n as f64;
                    }
                }
            }
            let n = cfg.n_trialset_iterations as f64;
            Ok(acc.into_iter().map(|a| a.map(|v| v / n)).collect())
        })
        .collect::<Result<_>>()?;
    // transpose to condition x time
    Ok((0..n_groups).map(|g| per_t.iter().map(|v| v[g]).collect()).collect())
}

/// Time-resolved IEM with a fixed encoding model over all conditions in
/// `bp`. Permuted slopes are not computed; see [`run_permuted_iem`].
pub fn run_iem_timecourse(bp: &BandPowerSet, cfg: &IemConfig, seed: u64) -> Result<CrfTimecourse> {
    let prep = prepare(bp, cfg, seed)?;
    let crfs = timecourse(&prep, &prep.bins, &prep.angles, cfg, seed, 0)?;
    let conditions = prep
        .groups
        .iter()
        .zip(crfs)
        .map(|((c, _), crf)| (*c, ConditionCrf::from_crf(crf)))
        .collect();
    Ok(CrfTimecourse {
        time_s: bp.time_axis(),
        electrodes: prep.electrodes.clone(),
        n_folds: cfg.n_averaged_per_bin,
        n_trialset_iterations: cfg.n_trialset_iterations,
        n_trials_per_bin: prep.n_per_bin,
        seed,
        conditions,
    })
}

/// Permuted null: for each of `n_perm_labelsets * n_perm_repeats`
/// permutations, bin labels (with their angles) are shuffled across trials
/// within each condition and the full pipeline is rerun.
pub fn run_permuted_iem(
    bp: &BandPowerSet,
    cfg: &IemConfig,
    seed: u64,
) -> Result<BTreeMap<Condition, PermutedCrf>> {
    let prep = prepare(bp, cfg, seed)?;
    let n_perm = cfg.n_permutations();
    let n_t = prep.by_time.len_of(Axis(0));
    let mut out: BTreeMap<Condition, PermutedCrf> = prep
        .groups
        .iter()
        .map(|(c, _)| {
            (
                *c,
                PermutedCrf {
                    slope_perm: Vec::with_capacity(n_perm),
                    crf_mean: vec![[0.0; N_BINS]; n_t],
                },
            )
        })
        .collect();
    for p in 0..n_perm {
        let mut bins = prep.bins.clone();
        let mut angles = prep.angles.clone();
        for (gi, (_, trials)) in prep.groups.iter().enumerate() {
            let mut order = trials.clone();
            let mut rng = rng_for(seed, Stream::IemLabels, &[p as u64, gi as u64]);
            order.shuffle(&mut rng);
            for (&dst, &src) in trials.iter().zip(&order) {
                bins[dst] = prep.bins[src];
                angles[dst] = prep.angles[src];
            }
        }
        let crfs = timecourse(&prep, &bins, &angles, cfg, seed, p as u64 + 1)?;
        for ((cond, _), crf) in prep.groups.iter().zip(crfs) {
            let entry = out.get_mut(cond).unwrap();
            entry.slope_perm.push(crf.iter().map(|c| crf_slope(&fold(c))).collect());
            for (m, c) in entry.crf_mean.iter_mut().zip(&crf) {
                for o in 0..N_BINS {
                    m[o] += c[o] / n_perm as f64;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutedCrf {
    /// Permutation x time.
    pub slope_perm: Vec<Vec<f64>>,
    pub crf_mean: Vec<[f64; N_BINS]>,
}

/// Store permuted results alongside the real ones.
pub fn attach_permuted(tc: &mut CrfTimecourse, perm: BTreeMap<Condition, PermutedCrf>) {
    for (cond, p) in perm {
        if let Some(c) = tc.conditions.get_mut(&cond) {
            c.slope_perm = p.slope_perm;
            c.crf_perm_mean = p.crf_mean;
        }
    }
}

/// `time_s,condition,offset_deg,crf_power`
pub fn write_crf_csv(tc: &CrfTimecourse, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time_s", "condition", "offset_deg", "crf_power"])
        .map_err(|e| csv_err(path, e))?;
    for (cond, c) in &tc.conditions {
        for (t, crf) in tc.time_s.iter().zip(&c.crf) {
            for (o, v) in OFFSETS_DEG.iter().zip(crf) {
                w.write_record(&[format!("{t:.6}"), cond.to_string(), o.to_string(), v.to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `time_s,condition,slope,slope_perm_p95`; the percentile column is empty
/// without permutations.
pub fn write_slope_csv(tc: &CrfTimecourse, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time_s", "condition", "slope", "slope_perm_p95"])
        .map_err(|e| csv_err(path, e))?;
    for (cond, c) in &tc.conditions {
        let p95 = if c.slope_perm.is_empty() { None } else { Some(c.slope_perm_p95()) };
        for (i, (t, s)) in tc.time_s.iter().zip(&c.slope).enumerate() {
            w.write_record(&[
                format!("{t:.6}"),
                cond.to_string(),
                s.to_string(),
                p95.as_ref().map(|p| p[i].to_string()).unwrap_or_default(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Bin centres as trial angles, for callers without jitter information.
pub fn bin_angles(bins: &[u8]) -> Vec<f64> {
    bins.iter().map(|&b| bin_center(b)).collect()
}
