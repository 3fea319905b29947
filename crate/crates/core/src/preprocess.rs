//! Cleaning chain from raw continuous data to artifact-free epochs and
//! alpha-band power.
//!
//! Order used by [`clean_continuous`]: event lag correction, decimation,
//! mastoid re-reference, 0.1-30 Hz cleaning filters, ocular regression,
//! bad-channel detection and interpolation. Epoch-level steps
//! ([`epoch`], [`reject_epochs`], [`equalize_bins`], [`alpha_power`]) are
//! called separately because the ERP and alpha branches diverge there.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array2, Array3, Axis, Zip};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::{BandPowerSet, Condition, EpochSet, Event, RawRecording, N_BINS};
use crate::error::{Error, Result};
use crate::filter::{self, BandKind};
use crate::hilbert::{hilbert_power, AnalyticPlan};
use crate::layout::{EOG_CHANNELS, MASTOIDS};
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub lag_ms: f64,
    pub target_rate_hz: f64,
    pub hp_hz: f64,
    pub lp_hz: f64,
    pub epoch_window_s: (f64, f64),
    pub baseline_window_s: (f64, f64),
    pub reject_uv: f64,
    pub flatline_s: f64,
    pub sd_criterion: f64,
    pub corr_criterion: f64,
    pub alpha_band_hz: (f64, f64),
    pub butter_order: usize,
    pub reference: Vec<String>,
    pub eog: Vec<String>,
    pub rls: RlsConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            lag_ms: 25.56,
            target_rate_hz: 250.0,
            hp_hz: 0.1,
            lp_hz: 30.0,
            epoch_window_s: (-0.5, 2.0),
            baseline_window_s: (-0.2, 0.0),
            reject_uv: 150.0,
            flatline_s: 5.0,
            sd_criterion: 4.0,
            corr_criterion: 0.85,
            alpha_band_hz: (8.0, 12.0),
            butter_order: 3,
            reference: MASTOIDS.iter().map(|s| s.to_string()).collect(),
            eog: EOG_CHANNELS.iter().map(|s| s.to_string()).collect(),
            rls: RlsConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (e0, e1) = self.epoch_window_s;
        let (b0, b1) = self.baseline_window_s;
        let (a0, a1) = self.alpha_band_hz;
        if !(self.target_rate_hz > 0.0) {
            return bad(format!("target rate {}", self.target_rate_hz));
        }
        if !(e0 < e1) {
            return bad(format!("epoch window ({e0}, {e1}) is not ordered"));
        }
        if !(b0 < b1 && b0 >= e0 && b1 <= e1) {
            return bad(format!(
                "baseline window ({b0}, {b1}) must be ordered and inside the epoch"
            ));
        }
        if !(0.0 < a0 && a0 < a1 && a1 < self.target_rate_hz / 2.0) {
            return bad(format!(
                "alpha band ({a0}, {a1}) must satisfy 0 < low < high < {}",
                self.target_rate_hz / 2.0
            ));
        }
        if !(0.0 < self.hp_hz && self.hp_hz < self.lp_hz && self.lp_hz < self.target_rate_hz / 2.0)
        {
            return bad(format!(
                "cleaning band ({}, {}) is invalid",
                self.hp_hz, self.lp_hz
            ));
        }
        if !(self.reject_uv > 0.0) {
            return bad(format!("rejection threshold {}", self.reject_uv));
        }
        if self.butter_order == 0 {
            return bad("Butterworth order must be >= 1".into());
        }
        self.rls.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlsConfig {
    /// Taps per reference channel.
    pub order: usize,
    pub forgetting: f64,
}

impl Default for RlsConfig {
    fn default() -> Self {
        Self {
            order: 3,
            forgetting: 0.9999,
        }
    }
}

impl RlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.forgetting > 0.9 && self.forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "RLS forgetting factor {} outside (0.9, 1]",
                self.forgetting
            )));
        }
        if self.order == 0 {
            return Err(Error::Config("RLS order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Shift event onsets by the display lag. Events pushed outside the
/// recording are dropped with a warning.
pub fn correct_event_lag(
    events: &[Event],
    lag_ms: f64,
    rate_hz: f64,
    n_samples: usize,
) -> Result<Vec<Event>> {
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidInput(format!("rate {rate_hz} Hz")));
    }
    let shift = (lag_ms / 1000.0 * rate_hz).round() as i64;
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        let s = e.sample_index as i64 + shift;
        if s < 0 || s >= n_samples as i64 {
            log::warn!(
                "event at sample {} shifted to {s}, outside recording; dropped",
                e.sample_index
            );
            continue;
        }
        out.push(Event {
            sample_index: s as usize,
            ..e.clone()
        });
    }
    Ok(out)
}

/// Integer-factor decimation after a zero-phase order-8 Butterworth
/// anti-alias low-pass at 80% of the new Nyquist frequency.
pub fn downsample(rec: &RawRecording, target_rate_hz: f64) -> Result<RawRecording> {
    let ratio = rec.rate_hz / target_rate_hz;
    let factor = ratio.round();
    if !(target_rate_hz > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "cannot decimate {} Hz to {target_rate_hz} Hz by an integer factor",
            rec.rate_hz
        )));
    }
    let factor = factor as usize;
    if factor == 1 {
        return Ok(rec.clone());
    }
    let sos = filter::butterworth(8, BandKind::LowPass(0.4 * target_rate_hz), rec.rate_hz)?;
    let pad = filter::default_padlen(rec.rate_hz, 0.4 * target_rate_hz);
    let smooth = filter::apply_rows(&sos, &rec.data, true, pad);
    let data = smooth.slice(s![.., ..;factor]).to_owned();
    let n = data.ncols();
    let events = rec
        .events
        .iter()
        .map(|e| Event {
            sample_index: (e.sample_index / factor).min(n.saturating_sub(1)),
            ..e.clone()
        })
        .collect();
    Ok(RawRecording {
        data,
        rate_hz: target_rate_hz,
        layout: rec.layout.clone(),
        events,
        bad_channels: rec.bad_channels.clone(),
    })
}

/// Subtract the mean of `reference_labels` from every channel.
pub fn rereference<S: AsRef<str>>(rec: &RawRecording, reference_labels: &[S]) -> Result<RawRecording> {
    if reference_labels.is_empty() {
        return Err(Error::Config("empty reference".into()));
    }
    let idx = rec.layout.indices_of(reference_labels)?;
    let reference = rec.data.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap();
    let mut out = rec.clone();
    for mut row in out.data.outer_iter_mut() {
        row -= &reference;
    }
    Ok(out)
}

/// 0.1-30 Hz cleaning: order-`butter_order` Butterworth high-pass then
/// low-pass, both zero-phase.
pub fn cleaning_filters(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<RawRecording> {
    let hp = filter::butterworth(cfg.butter_order, BandKind::HighPass(cfg.hp_hz), rec.rate_hz)?;
    let lp = filter::butterworth(cfg.butter_order, BandKind::LowPass(cfg.lp_hz), rec.rate_hz)?;
    let hp_pad = filter::default_padlen(rec.rate_hz, cfg.hp_hz);
    let lp_pad = filter::default_padlen(rec.rate_hz, cfg.lp_hz);
    let data = filter::apply_rows(&hp, &rec.data, true, hp_pad);
    let data = filter::apply_rows(&lp, &data, true, lp_pad);
    Ok(RawRecording {
        data,
        ..rec.clone()
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelFlags {
    pub label: String,
    pub flatline: bool,
    pub amplitude_sd: bool,
    pub low_correlation: bool,
    pub interpolated: bool,
}

impl ChannelFlags {
    pub fn is_flagged(&self) -> bool {
        self.flatline || self.amplitude_sd || self.low_correlation
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channels: Vec<ChannelFlags>,
}

impl ChannelReport {
    pub fn flagged_labels(&self) -> Vec<String> {
        self.channels
            .iter()
            .filter(|c| c.is_flagged())
            .map(|c| c.label.clone())
            .collect()
    }
}

fn longest_flat_run(x: ndarray::ArrayView1<f64>) -> usize {
    let (mut best, mut run) = (0, 0);
    for w in x.windows(2) {
        if (w[1] - w[0]).abs() < 1e-8 {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

/// Flag flatlined, high-amplitude and unpredictable channels.
///
/// The correlation criterion is the Pearson correlation between a channel
/// and its least-squares reconstruction from all other channels that were
/// not already flagged as flat or high-amplitude.
pub fn detect_bad_channels(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<ChannelReport> {
    let n_ch = rec.n_channels();
    if n_ch < 8 {
        return Err(Error::InvalidInput(format!(
            "bad-channel detection needs at least 8 channels, got {n_ch}"
        )));
    }
    let mut flags: Vec<ChannelFlags> = rec
        .layout
        .labels()
        .iter()
        .map(|l| ChannelFlags {
            label: l.clone(),
            ..Default::default()
        })
        .collect();

    let min_run = (cfg.flatline_s * rec.rate_hz).round() as usize;
    let sds: Vec<f64> = rec.data.outer_iter().map(|r| r.std(0.0)).collect();
    let mut sorted = sds.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if n_ch % 2 == 1 {
        sorted[n_ch / 2]
    } else {
        0.5 * (sorted[n_ch / 2 - 1] + sorted[n_ch / 2])
    };
    for (c, row) in rec.data.outer_iter().enumerate() {
        flags[c].flatline = min_run > 0 && longest_flat_run(row) >= min_run;
        flags[c].amplitude_sd = sds[c] > cfg.sd_criterion * median;
    }

    // Gram matrix of centred data over a strided subsample.
    let stride = rec.n_samples().div_ceil(100_000).max(1);
    let sub = rec.data.slice(s![.., ..;stride]);
    let means = sub.mean_axis(Axis(1)).unwrap();
    let centred = &sub - &means.insert_axis(Axis(1));
    let gram = centred.dot(&centred.t());

    let candidates: Vec<usize> = (0..n_ch)
        .filter(|&c| !flags[c].flatline && !flags[c].amplitude_sd)
        .collect();
    for &c in &candidates {
        let predictors: Vec<usize> = candidates.iter().copied().filter(|&o| o != c).collect();
        let var = gram[[c, c]];
        let r = if predictors.is_empty() || var <= 0.0 {
            0.0
        } else {
            let k = predictors.len();
            let mut g = DMatrix::from_fn(k, k, |i, j| gram[[predictors[i], predictors[j]]]);
            let ridge = 1e-10 * (0..k).map(|i| g[(i, i)]).sum::<f64>() / k as f64;
            for i in 0..k {
                g[(i, i)] += ridge.max(f64::MIN_POSITIVE);
            }
            let rhs = DVector::from_fn(k, |i, _| gram[[predictors[i], c]]);
            match g.cholesky() {
                Some(ch) => {
                    let beta = ch.solve(&rhs);
                    let explained = rhs.dot(&beta);
                    (explained / var).clamp(0.0, 1.0).sqrt()
                }
                None => 0.0,
            }
        };
        flags[c].low_correlation = r < cfg.corr_criterion;
    }
    Ok(ChannelReport { channels: flags })
}

/// Replace flagged channels with the inverse great-circle-distance weighted
/// mean of their four nearest unflagged neighbours. Replaced channels are
/// added to `bad_channels` and marked interpolated in `report`.
pub fn interpolate_channels(rec: &RawRecording, report: &mut ChannelReport) -> Result<RawRecording> {
    const K: usize = 4;
    let n_ch = rec.n_channels();
    let flagged: Vec<usize> = report
        .channels
        .iter()
        .filter(|c| c.is_flagged())
        .map(|c| rec.layout.index_of(&c.label))
        .collect::<Result<_>>()?;
    if flagged.is_empty() {
        return Ok(rec.clone());
    }
    if flagged.len() * 4 >= n_ch {
        return Err(Error::TooManyBadChannels {
            flagged: flagged.len(),
            total: n_ch,
        });
    }
    let good: Vec<usize> = (0..n_ch).filter(|c| !flagged.contains(c)).collect();
    let mut out = rec.clone();
    for &c in &flagged {
        let mut near: Vec<(f64, usize)> = good
            .iter()
            .map(|&g| (rec.layout.angular_distance(c, g), g))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(K);
        let weights: Vec<f64> = if let Some(&(_, g)) = near.iter().find(|(d, _)| *d < 1e-12) {
            near.iter().map(|&(_, o)| if o == g { 1.0 } else { 0.0 }).collect()
        } else {
            near.iter().map(|(d, _)| 1.0 / d).collect()
        };
        let total: f64 = weights.iter().sum();
        let mut row = out.data.row_mut(c);
        row.fill(0.0);
        for (w, &(_, g)) in weights.iter().zip(&near) {
            row.scaled_add(w / total, &rec.data.row(g));
        }
        out.bad_channels.insert(rec.layout.labels()[c].clone());
    }
    for f in report.channels.iter_mut() {
        if f.is_flagged() {
            f.interpolated = true;
        }
    }
    Ok(out)
}

/// Adaptive removal of ocular activity by recursive least squares with the
/// EOG channels (current and `order - 1` past samples each) as regressors.
/// The EOG channels themselves pass through unchanged.
pub fn remove_ocular<S: AsRef<str>>(
    rec: &RawRecording,
    eog_labels: &[S],
    rls: &RlsConfig,
) -> Result<RawRecording> {
    rls.validate()?;
    let eog = rec.layout.indices_of(eog_labels)?;
    let n = rec.n_samples();
    let order = rls.order;
    let dim = eog.len() * order;
    let lambda = rls.forgetting;

    let eog_power: f64 =
        eog.iter().map(|&e| rec.data.row(e).mapv(|v| v * v).mean().unwrap_or(0.0)).sum::<f64>()
            / eog.len().max(1) as f64;
    if dim == 0 || eog_power <= 0.0 {
        return Ok(rec.clone());
    }

    let targets: Vec<usize> = (0..rec.n_channels()).filter(|c| !eog.contains(c)).collect();
    let mut weights = vec![vec![0.0; dim]; targets.len()];
    let mut p = DMatrix::<f64>::identity(dim, dim) / (0.01 * eog_power);
    let mut u = DVector::<f64>::zeros(dim);
    let mut out = rec.data.clone();

    for t in 0..n {
        for (r, &e) in eog.iter().enumerate() {
            for lag in 0..order {
                u[r * order + lag] = if t >= lag { rec.data[[e, t - lag]] } else { 0.0 };
            }
        }
        let pu = &p * &u;
        let denom = lambda + u.dot(&pu);
        let gain = &pu / denom;
        for (w, &c) in weights.iter_mut().zip(&targets) {
            let pred: f64 = w.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            let err = rec.data[[c, t]] - pred;
            out[[c, t]] = err;
            for (wi, gi) in w.iter_mut().zip(gain.iter()) {
                *wi += gi * err;
            }
        }
        // P <- (P - g u^T P) / lambda, kept symmetric
        p -= &gain * pu.transpose();
        p /= lambda;
        p = (&p + p.transpose()) * 0.5;
    }
    Ok(RawRecording {
        data: out,
        ..rec.clone()
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub n_events: usize,
    pub dropped_miss: usize,
    pub dropped_edge: usize,
    pub n_epochs: usize,
}

/// Cut `[start, end)` windows around every successful trial and subtract the
/// per-channel baseline mean.
pub fn epoch(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<(EpochSet, EpochReport)> {
    let rate = rec.rate_hz;
    let (w0, w1) = cfg.epoch_window_s;
    let start = (w0 * rate).round() as isize;
    let len = ((w1 - w0) * rate).round() as usize;
    let b0 = ((cfg.baseline_window_s.0 - w0) * rate).round() as usize;
    let b1 = ((cfg.baseline_window_s.1 - w0) * rate).round() as usize;
    if len == 0 || b1 <= b0 || b1 > len {
        return Err(Error::Config("epoch or baseline window is empty".into()));
    }

    let mut report = EpochReport {
        n_events: rec.events.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for e in &rec.events {
        if !e.hit {
            report.dropped_miss += 1;
            continue;
        }
        let s0 = e.sample_index as isize + start;
        if s0 < 0 || s0 as usize + len > rec.n_samples() {
            report.dropped_edge += 1;
            continue;
        }
        kept.push((s0 as usize, e.clone()));
    }
    if report.dropped_edge > 0 {
        log::warn!("{} trials too close to the recording edge", report.dropped_edge);
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput("no epochs could be extracted".into()));
    }

    let mut data = Array3::zeros((kept.len(), rec.n_channels(), len));
    Zip::from(data.axis_iter_mut(Axis(0)))
        .and(&ndarray::Array1::from_iter(kept.iter().map(|k| k.0)))
        .par_for_each(|mut ep, &s0| {
            ep.assign(&rec.data.slice(s![.., s0..s0 + len]));
            for mut row in ep.outer_iter_mut() {
                let base = row.slice(s![b0..b1]).mean().unwrap();
                row -= base;
            }
        });
    report.n_epochs = kept.len();
    let meta = kept.into_iter().map(|k| k.1).collect();
    let ep = EpochSet::new(
        data,
        rate,
        start as f64 / rate,
        meta,
        rec.layout.clone(),
        rec.bad_channels.clone(),
    )?;
    Ok((ep, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionRejection {
    pub n_before: usize,
    pub n_rejected: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub threshold_uv: f64,
    pub per_condition: BTreeMap<Condition, ConditionRejection>,
}

/// Drop epochs where any non-bad channel leaves `[-threshold, +threshold]`.
pub fn reject_epochs(ep: &EpochSet, threshold_uv: f64) -> Result<(EpochSet, RejectionReport)> {
    if !(threshold_uv > 0.0) {
        return Err(Error::Config(format!("threshold {threshold_uv} uV")));
    }
    let channels: Vec<usize> = (0..ep.n_channels())
        .filter(|&c| !ep.bad_channels.contains(&ep.layout.labels()[c]))
        .collect();
    let mut report = RejectionReport {
        threshold_uv,
        ..Default::default()
    };
    let mut keep = Vec::new();
    for (i, trial) in ep.data.outer_iter().enumerate() {
        let peak = channels
            .iter()
            .flat_map(|&c| trial.row(c).iter().map(|v| v.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let entry = report.per_condition.entry(ep.meta[i].condition).or_default();
        entry.n_before += 1;
        if peak > threshold_uv {
            entry.n_rejected += 1;
        } else {
            keep.push(i);
        }
    }
    for r in report.per_condition.values_mut() {
        r.percent = 100.0 * r.n_rejected as f64 / r.n_before as f64;
    }
    if keep.is_empty() {
        return Err(Error::AllEpochsRejected(threshold_uv));
    }
    Ok((ep.select_trials(&keep), report))
}

/// "C1 = 5.6 ± 7.5 %" style summary across recordings.
pub fn format_rejection_summary(rates: &BTreeMap<Condition, Vec<f64>>) -> String {
    rates
        .iter()
        .map(|(c, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            format!("{c} = {mean:.1} ± {sd:.1} %")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Within each condition, reduce every location bin to `n - 1` trials, where
/// `n` is the smallest bin count of that condition. Kept trials stay in
/// their original order.
pub fn equalize_bins<K>(ep: &crate::dataset::Trials<K>, seed: u64) -> Result<crate::dataset::Trials<K>> {
    let mut keep = Vec::new();
    for cond in ep.conditions() {
        let mut bins: Vec<Vec<usize>> = vec![Vec::new(); N_BINS];
        for (i, e) in ep.meta.iter().enumerate() {
            if e.condition == cond {
                bins[e.bin_index as usize].push(i);
            }
        }
        for (b, members) in bins.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::InsufficientTrials {
                    group: format!("{cond} bin {b}"),
                    count: members.len(),
                    required: 2,
                });
            }
        }
        let n = bins.iter().map(Vec::len).min().unwrap() - 1;
        for (b, members) in bins.iter().enumerate() {
            let mut rng = rng_for(seed, Stream::Equalize, &[cond.index() as u64, b as u64]);
            keep.extend(sample(&mut rng, members.len(), n).into_iter().map(|j| members[j]));
        }
    }
    keep.sort_unstable();
    Ok(ep.select_trials(&keep))
}

/// Zero-phase alpha band-pass of every epoch (reflection padded by four
/// cycles of the lower band edge) followed by Hilbert power.
pub fn alpha_power(ep: &EpochSet, cfg: &PreprocessConfig) -> Result<BandPowerSet> {
    let (lo, hi) = cfg.alpha_band_hz;
    let sos = filter::butterworth(cfg.butter_order, BandKind::BandPass(lo, hi), ep.rate_hz)?;
    let pad = filter::default_padlen(ep.rate_hz, lo);
    let plan = AnalyticPlan::new(ep.n_samples())?;
    let mut out = Array3::zeros(ep.data.raw_dim());
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(ep.data.axis_iter(Axis(0)))
        .par_for_each(|mut o, trial| {
            for (mut orow, row) in o.outer_iter_mut().zip(trial.outer_iter()) {
                let filtered = sos.filtfilt(row, pad);
                let p = plan.power(&filtered);
                orow.iter_mut().zip(p).for_each(|(d, v)| *d = v);
            }
        });
    ep.with_data(out)
}

/// Band-pass only (no Hilbert), exposed for inspection.
pub fn alpha_filter(ep: &EpochSet, cfg: &PreprocessConfig) -> Result<EpochSet> {
    let (lo, hi) = cfg.alpha_band_hz;
    let mut out = Array3::zeros(ep.data.raw_dim());
    for (mut o, trial) in out.outer_iter_mut().zip(ep.data.outer_iter()) {
        let f = filter::butterworth_bandpass(&trial.to_owned(), lo, hi, cfg.butter_order, ep.rate_hz, true)?;
        o.assign(&f);
    }
    ep.with_data(out)
}

#[doc(hidden)]
pub fn hilbert_power_of(ep: &EpochSet) -> Result<BandPowerSet> {
    hilbert_power(ep)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuousReport {
    pub n_events_in: usize,
    pub n_events_after_lag: usize,
    pub lag_samples_at_input_rate: i64,
    pub decimation_factor: usize,
    pub channels: ChannelReport,
}

/// Continuous-data chain: lag, decimation, re-reference, cleaning filters,
/// ocular regression, bad channels, interpolation.
pub fn clean_continuous(
    rec: &RawRecording,
    cfg: &PreprocessConfig,
) -> Result<(RawRecording, ContinuousReport)> {
    cfg.validate()?;
    let mut report = ContinuousReport {
        n_events_in: rec.events.len(),
        lag_samples_at_input_rate: (cfg.lag_ms / 1000.0 * rec.rate_hz).round() as i64,
        decimation_factor: (rec.rate_hz / cfg.target_rate_hz).round() as usize,
        ..Default::default()
    };
    let mut r = rec.clone();
    r.events = correct_event_lag(&rec.events, cfg.lag_ms, rec.rate_hz, rec.n_samples())?;
    report.n_events_after_lag = r.events.len();
    let r = downsample(&r, cfg.target_rate_hz)?;
    let r = rereference(&r, &cfg.reference)?;
    let r = cleaning_filters(&r, cfg)?;
    let r = remove_ocular(&r, &cfg.eog, &cfg.rls)?;
    let mut channels = detect_bad_channels(&r, cfg)?;
    let r = interpolate_channels(&r, &mut channels)?;
    report.channels = channels;
    Ok((r, report))
}

pub fn bad_channel_set(report: &ChannelReport) -> BTreeSet<String> {
    report.flagged_labels().into_iter().collect()
}

/// Equal-length channel rows helper for tests and callers building toy data.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let n = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::bin_center;
    use crate::layout::ElectrodeLayout;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn ev(sample: usize, cond: Condition, bin: u8, hit: bool) -> Event {
        Event {
            sample_index: sample,
            code: Event::code_for(cond, bin),
            condition: cond,
            bin_index: bin,
            angle_deg: bin_center(bin),
            hit,
            rt_ms: None,
        }
    }

    fn std_rec(n: usize, rate: f64, events: Vec<Event>) -> RawRecording {
        RawRecording::new(
            Array2::zeros((64, n)),
            rate,
            ElectrodeLayout::standard_64(),
            events,
        )
        .unwrap()
    }

    fn noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn lag_correction() {
        let e = vec![ev(10_000, Condition::StaticSingle, 0, true)];
        let at1000 = correct_event_lag(&e, 25.56, 1000.0, 20_000).unwrap();
        assert_eq!(at1000[0].sample_index, 10_026);
        let at250 = correct_event_lag(&e, 25.56, 250.0, 20_000).unwrap();
        assert_eq!(at250[0].sample_index, 10_006);
        assert_eq!(correct_event_lag(&e, 0.0, 1000.0, 20_000).unwrap(), e);
        // Pushed past the end: dropped.
        assert!(correct_event_lag(&e, 25.56, 1000.0, 10_010).unwrap().is_empty());
        assert!(correct_event_lag(&e, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn downsample_shapes_and_events() {
        let rec = std_rec(4000, 1000.0, vec![ev(1003, Condition::StaticSingle, 1, true)]);
        let d = downsample(&rec, 250.0).unwrap();
        assert_eq!(d.n_samples(), 1000);
        assert_eq!(d.rate_hz, 250.0);
        assert_eq!(d.events[0].sample_index, 250);
        assert!(downsample(&rec, 300.0).is_err());
    }

    fn decimated_sine_ratio(freq: f64) -> f64 {
        let layout = ElectrodeLayout::new(
            vec!["Cz".into()],
            vec![[0.0, 0.0, 1.0]],
            vec![crate::layout::Hemisphere::Midline],
            vec![],
        )
        .unwrap();
        let n = 8000;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq * i as f64 / 1000.0).sin()).collect();
        let rec = RawRecording::new(matrix_from_rows(&[x.clone()]), 1000.0, layout, vec![]).unwrap();
        let d = downsample(&rec, 250.0).unwrap();
        let y = d.data.row(0).to_vec();
        // interior only, away from edge effects
        rms(&y[250..1750]) / rms(&x[1000..7000])
    }

    #[test]
    fn anti_alias_passband_and_stopband() {
        assert!(decimated_sine_ratio(5.0) >= 0.99);
        let atten_db = 20.0 * decimated_sine_ratio(200.0).log10();
        assert!(atten_db <= -40.0, "{atten_db} dB");
    }

    #[test]
    fn rereference_cases() {
        let mut rec = std_rec(2, 250.0, vec![]);
        // zero reference
        rec.data.row_mut(5).assign(&ndarray::arr1(&[3.0, -1.0]));
        let out = rereference(&rec, &["M1", "M2"]).unwrap();
        assert_eq!(out.data, rec.data);
        // common mode
        let mut rec2 = std_rec(2, 250.0, vec![]);
        rec2.data.fill(4.0);
        let out = rereference(&rec2, &["M1", "M2"]).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        // arithmetic mean of [1,1] and [3,3]
        let mut rec3 = std_rec(2, 250.0, vec![]);
        let m1 = rec3.layout.index_of("M1").unwrap();
        let m2 = rec3.layout.index_of("M2").unwrap();
        rec3.data.row_mut(m1).fill(1.0);
        rec3.data.row_mut(m2).fill(3.0);
        rec3.data.row_mut(0).assign(&ndarray::arr1(&[5.0, 7.0]));
        let out = rereference(&rec3, &["M1", "M2"]).unwrap();
        assert_eq!(out.data.row(0).to_vec(), vec![3.0, 5.0]);
        assert_eq!(out.data.row(m1).to_vec(), vec![-1.0, -1.0]);
        assert!(rereference(&rec3, &["M9"]).is_err());
    }

    #[test]
    fn flatline_detection() {
        let mut rng = rng_for(1, Stream::Misc, &[]);
        let n = 8000;
        let mut rec = std_rec(n, 1000.0, vec![]);
        for c in 0..64 {
            rec.data.row_mut(c).assign(&ndarray::Array1::from(noise(&mut rng, n)));
        }
        rec.data.slice_mut(s![10, 1000..7000]).fill(2.5); // 6 s constant
        rec.data.slice_mut(s![11, 1000..5000]).fill(2.5); // 4 s constant
        let rep = detect_bad_channels(&rec, &PreprocessConfig::default()).unwrap();
        assert!(rep.channels[10].flatline);
        assert!(!rep.channels[11].flatline);
    }

    #[test]
    fn iid_noise_rarely_flags_amplitude() {
        let mut flagged = 0;
        let mut total = 0;
        for trial in 0..20 {
            let mut rng = rng_for(trial, Stream::Misc, &[]);
            let mut rec = std_rec(2000, 250.0, vec![]);
            for c in 0..64 {
                rec.data.row_mut(c).assign(&ndarray::Array1::from(noise(&mut rng, 2000)));
            }
            let rep = detect_bad_channels(&rec, &PreprocessConfig::default()).unwrap();
            flagged += rep.channels.iter().filter(|c| c.amplitude_sd).count();
            total += 64;
        }
        assert!((flagged as f64) / (total as f64) < 0.01);
    }

    #[test]
    fn correlation_criterion() {
        // Shared sources make every channel predictable; channel 20 is
        // independent noise and channel 30 duplicates channel 31.
        let mut rng = rng_for(2, Stream::Misc, &[]);
        let n = 3000;
        let sources: Vec<Vec<f64>> = (0..4).map(|_| noise(&mut rng, n)).collect();
        let mut rec = std_rec(n, 250.0, vec![]);
        for c in 0..64 {
            let mix: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let own = noise(&mut rng, n);
            let row: Vec<f64> = (0..n)
                .map(|t| (0..4).map(|k| mix[k] * sources[k][t]).sum::<f64>() + 0.05 * own[t])
                .collect();
            rec.data.row_mut(c).assign(&ndarray::Array1::from(row));
        }
        let indep = noise(&mut rng, n);
        rec.data.row_mut(20).assign(&ndarray::Array1::from(indep));
        let dup: Vec<f64> = rec.data.row(31).iter().map(|v| v + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
        rec.data.row_mut(30).assign(&ndarray::Array1::from(dup));
        let rep = detect_bad_channels(&rec, &PreprocessConfig::default()).unwrap();
        assert!(rep.channels[20].low_correlation);
        assert!(!rep.channels[30].low_correlation);
        assert!(!rep.channels[31].low_correlation);
    }

    #[test]
    fn interpolation_of_equal_neighbours() {
        let mut rec = std_rec(10, 250.0, vec![]);
        rec.data.fill(3.25);
        let bad = rec.layout.index_of("Cz").unwrap();
        rec.data.row_mut(bad).fill(-100.0);
        let mut report = ChannelReport {
            channels: rec
                .layout
                .labels()
                .iter()
                .map(|l| ChannelFlags {
                    label: l.clone(),
                    amplitude_sd: l == "Cz",
                    ..Default::default()
                })
                .collect(),
        };
        let out = interpolate_channels(&rec, &mut report).unwrap();
        assert!(out.data.row(bad).iter().all(|v| (v - 3.25).abs() < 1e-12));
        assert!(out.bad_channels.contains("Cz"));
        assert!(report.channels[bad].interpolated);
        assert!(report.channels.iter().all(|c| !c.interpolated || c.is_flagged()));
    }

    #[test]
    fn interpolation_identity_and_limits() {
        let rec = std_rec(10, 250.0, vec![]);
        let mut clean = ChannelReport {
            channels: rec
                .layout
                .labels()
                .iter()
                .map(|l| ChannelFlags { label: l.clone(), ..Default::default() })
                .collect(),
        };
        assert_eq!(interpolate_channels(&rec, &mut clean).unwrap(), rec);
        let mut many = clean.clone();
        for f in many.channels.iter_mut().take(16) {
            f.flatline = true;
        }
        assert!(matches!(
            interpolate_channels(&rec, &mut many),
            Err(Error::TooManyBadChannels { flagged: 16, total: 64 })
        ));
    }

    #[test]
    fn interpolated_channel_tracks_common_sine() {
        let mut rng = rng_for(3, Stream::Misc, &[]);
        let n = 1000;
        let sine: Vec<f64> = (0..n).map(|i| (2.0 * PI * 10.0 * i as f64 / 250.0).sin()).collect();
        let mut rec = std_rec(n, 250.0, vec![]);
        for c in 0..64 {
            let row: Vec<f64> = sine.iter().map(|s| s + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect();
            rec.data.row_mut(c).assign(&ndarray::Array1::from(row));
        }
        let bad = rec.layout.index_of("PO7").unwrap();
        rec.data.row_mut(bad).assign(&ndarray::Array1::from(noise(&mut rng, n)));
        let mut report = ChannelReport {
            channels: rec
                .layout
                .labels()
                .iter()
                .map(|l| ChannelFlags { label: l.clone(), low_correlation: l == "PO7", ..Default::default() })
                .collect(),
        };
        let out = interpolate_channels(&rec, &mut report).unwrap();
        assert!(corr(&out.data.row(bad).to_vec(), &sine) > 0.99);
    }

    fn ocular_rec(mixing: f64, seed: u64) -> (RawRecording, Vec<f64>, Vec<f64>) {
        let mut rng = rng_for(seed, Stream::Misc, &[]);
        let n = 20_000;
        let layout = ElectrodeLayout::standard_64().subset(&["Fp1", "Fp2", "PO7", "PO8", "Cz"]).unwrap();
        // Slow, large ocular signal: smoothed random walk with blinks.
        let mut eog = vec![0.0; n];
        let mut level = 0.0;
        for (t, v) in eog.iter_mut().enumerate() {
            level = 0.995 * level + rng.sample::<f64, _>(StandardNormal);
            let blink = if t % 1500 < 60 { 80.0 * (PI * (t % 1500) as f64 / 60.0).sin() } else { 0.0 };
            *v = 5.0 * level + blink;
        }
        let clean = noise(&mut rng, n);
        let mixed: Vec<f64> = clean.iter().zip(&eog).map(|(c, e)| c + mixing * e).collect();
        let eog2: Vec<f64> = eog.iter().map(|e| 0.7 * e + rng.sample::<f64, _>(StandardNormal)).collect();
        let data = matrix_from_rows(&[eog.clone(), eog2, mixed, clean.clone(), noise(&mut rng, n)]);
        (RawRecording::new(data, 250.0, layout, vec![]).unwrap(), eog, clean)
    }

    #[test]
    fn ocular_regression_removes_mixing() {
        let (rec, eog, _) = ocular_rec(0.8, 4);
        let out = remove_ocular(&rec, &["Fp1", "Fp2"], &RlsConfig::default()).unwrap();
        let cleaned = out.data.row(2).to_vec();
        let settle = 2000;
        let r = corr(&cleaned[settle..], &eog[settle..]);
        assert!(r.abs() < 0.1, "residual correlation {r}");
        // EOG passes through
        assert_eq!(out.data.row(0), rec.data.row(0));
        assert_eq!(out.data.row(1), rec.data.row(1));
    }

    #[test]
    fn ocular_regression_leaves_clean_channels() {
        let (rec, _, clean) = ocular_rec(0.8, 5);
        let out = remove_ocular(&rec, &["Fp1", "Fp2"], &RlsConfig::default()).unwrap();
        let after = out.data.row(3).to_vec();
        let change = (rms(&after[2000..]) - rms(&clean[2000..])).abs() / rms(&clean[2000..]);
        assert!(change < 0.05, "rms change {change}");
    }

    #[test]
    fn ocular_zero_reference_and_bad_config() {
        let (mut rec, _, _) = ocular_rec(0.8, 6);
        rec.data.row_mut(0).fill(0.0);
        rec.data.row_mut(1).fill(0.0);
        let out = remove_ocular(&rec, &["Fp1", "Fp2"], &RlsConfig::default()).unwrap();
        assert_eq!(out.data, rec.data);
        let bad = RlsConfig { order: 3, forgetting: 0.85 };
        assert!(matches!(remove_ocular(&rec, &["Fp1", "Fp2"], &bad), Err(Error::Config(_))));
        let bad = RlsConfig { order: 3, forgetting: 1.01 };
        assert!(remove_ocular(&rec, &["Fp1", "Fp2"], &bad).is_err());
    }

    #[test]
    fn epoching_length_baseline_and_misses() {
        let events = vec![
            ev(50, Condition::StaticSingle, 0, true), // too early
            ev(500, Condition::StaticSingle, 1, true),
            ev(1200, Condition::StaticSingle, 2, false),
            ev(2000, Condition::StaticSingle, 3, true),
            ev(2900, Condition::StaticSingle, 4, true), // too late
        ];
        let mut rec = std_rec(3000, 250.0, events);
        rec.data.fill(42.0);
        let (ep, report) = epoch(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(ep.n_samples(), 625);
        assert_eq!(ep.n_trials(), 2);
        assert_eq!(ep.t0_offset_s, -0.5);
        assert_eq!(report.dropped_miss, 1);
        assert_eq!(report.dropped_edge, 2);
        assert!(ep.meta.iter().all(|e| e.hit));
        assert!(ep.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_mean_is_zero() {
        let mut rng = rng_for(7, Stream::Misc, &[]);
        let mut rec = std_rec(1500, 250.0, vec![ev(600, Condition::StaticSingle, 0, true)]);
        for c in 0..64 {
            rec.data.row_mut(c).assign(&ndarray::Array1::from(noise(&mut rng, 1500)));
        }
        let (ep, _) = epoch(&rec, &PreprocessConfig::default()).unwrap();
        for row in ep.data.index_axis(Axis(0), 0).outer_iter() {
            let m = row.slice(s![75..125]).mean().unwrap();
            assert!(m.abs() < 1e-9);
        }
    }

    fn toy_epochs(values: &[f64]) -> EpochSet {
        let layout = ElectrodeLayout::standard_64().subset(&["PO7", "PO8"]).unwrap();
        let n = values.len();
        let mut data = Array3::zeros((n, 2, 10));
        for (i, v) in values.iter().enumerate() {
            data[[i, 1, 4]] = *v;
        }
        let meta = (0..n).map(|i| ev(i, Condition::StaticSingle, (i % 6) as u8, true)).collect();
        EpochSet::new(data, 250.0, -0.5, meta, layout, BTreeSet::new()).unwrap()
    }

    #[test]
    fn rejection_threshold_boundary() {
        let ep = toy_epochs(&[151.0, 149.0, -151.0, 0.0]);
        let (kept, report) = reject_epochs(&ep, 150.0).unwrap();
        assert_eq!(kept.n_trials(), 2);
        let r = &report.per_condition[&Condition::StaticSingle];
        assert_eq!((r.n_before, r.n_rejected), (4, 2));
        assert_eq!(r.percent, 50.0);
        let zeros = toy_epochs(&[0.0; 5]);
        assert_eq!(reject_epochs(&zeros, 150.0).unwrap().0.n_trials(), 5);
        assert!(matches!(reject_epochs(&toy_epochs(&[200.0]), 150.0), Err(Error::AllEpochsRejected(_))));
    }

    #[test]
    fn rejection_ignores_bad_channels() {
        let mut ep = toy_epochs(&[500.0]);
        ep.bad_channels.insert("PO8".into());
        assert_eq!(reject_epochs(&ep, 150.0).unwrap().0.n_trials(), 1);
    }

    fn binned_epochs(counts: &[usize]) -> EpochSet {
        let layout = ElectrodeLayout::standard_64().subset(&["PO7"]).unwrap();
        let mut meta = Vec::new();
        for (b, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                meta.push(ev(meta.len(), Condition::StaticSingle, b as u8, true));
            }
        }
        let n = meta.len();
        let data = Array3::from_shape_fn((n, 1, 8), |(i, _, _)| i as f64);
        EpochSet::new(data, 250.0, 0.0, meta, layout, BTreeSet::new()).unwrap()
    }

    fn bin_counts(ep: &EpochSet) -> Vec<usize> {
        let mut c = vec![0; 6];
        ep.meta.iter().for_each(|e| c[e.bin_index as usize] += 1);
        c
    }

    #[test]
    fn equalization_keeps_n_minus_one() {
        let ep = binned_epochs(&[20, 18, 25, 19, 22, 21]);
        assert_eq!(bin_counts(&equalize_bins(&ep, 1).unwrap()), vec![17; 6]);
        let ep = binned_epochs(&[10; 6]);
        assert_eq!(bin_counts(&equalize_bins(&ep, 1).unwrap()), vec![9; 6]);
    }

    #[test]
    fn equalization_is_seeded() {
        let ep = binned_epochs(&[20, 18, 25, 19, 22, 21]);
        let a = equalize_bins(&ep, 9).unwrap();
        let b = equalize_bins(&ep, 9).unwrap();
        let c = equalize_bins(&ep, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn equalization_needs_two_per_bin() {
        let ep = binned_epochs(&[5, 5, 1, 5, 5, 5]);
        match equalize_bins(&ep, 1) {
            Err(Error::InsufficientTrials { group, count: 1, .. }) => assert!(group.contains("bin 2")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let mut c = PreprocessConfig::default();
        c.alpha_band_hz = (12.0, 8.0);
        assert!(c.validate().is_err());
        let mut c = PreprocessConfig::default();
        c.baseline_window_s = (-0.7, 0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejection_summary_format() {
        let mut m = BTreeMap::new();
        m.insert(Condition::StaticSingle, vec![0.0, 10.0]);
        assert_eq!(format_rejection_summary(&m), "SS = 5.0 ± 7.1 %");
    }
}
