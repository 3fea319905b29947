//! Trial plans and a forward-model simulator with known spatial tuning.
//!
//! Every electrode carries a 10 Hz oscillation whose amplitude is
//! `signal_uv * (W_true c(theta)) * modulation(t)`, where `c` is the
//! six-channel basis response to the target angle. Background activity is a
//! mixture of spatially smooth pink-noise and alpha-band sources plus white
//! sensor noise. Static conditions can add a contralateral negativity.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{bin_center, write_dataset_rows, Condition, Event, RawRecording, N_BINS};
use crate::erp::{hemifield_of, Hemifield};
use crate::error::{Error, Result};
use crate::iem::{basis_response, CENTERS_DEG};
use crate::layout::{is_posterior, ElectrodeLayout, Hemisphere};
use crate::rng::{rng_for, Stream};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRUTH_FILE: &str = "truth.json";

/// Condition orders used for counterbalancing.
pub const COUNTERBALANCE: [[Condition; 4]; 4] = {
    use Condition::*;
    [
        [StaticSingle, StaticMultiple, DynamicSingle, DynamicMultiple],
        [StaticMultiple, StaticSingle, DynamicMultiple, DynamicSingle],
        [DynamicSingle, DynamicMultiple, StaticSingle, StaticMultiple],
        [DynamicMultiple, DynamicSingle, StaticMultiple, StaticSingle],
    ]
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOverrides {
    pub conditions: Option<Vec<Condition>>,
    pub blocks_per_condition: Option<usize>,
    pub trials_per_block: Option<usize>,
    /// Restrict targets to these bins.
    pub bins: Option<Vec<u8>>,
    pub isi_s: Option<f64>,
    pub counterbalance: Option<usize>,
    pub lead_in_s: Option<f64>,
    pub jitter_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub condition: Condition,
    pub block: usize,
    pub bin_index: u8,
    pub angle_deg: f64,
    pub onset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub blocks_per_condition: usize,
    pub trials_per_block: usize,
    pub isi_s: f64,
    pub lead_in_s: f64,
    pub jitter_deg: f64,
    pub counterbalance: usize,
    pub condition_order: Vec<Condition>,
    pub bins: Vec<u8>,
    pub entries: Vec<PlanEntry>,
}

impl TrialPlan {
    /// Lead-in, all trials, and a tail as long as the lead-in.
    pub fn duration_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.onset_s) + self.isi_s + self.lead_in_s
    }

    /// Trials per (condition, bin).
    pub fn counts(&self) -> Vec<(Condition, [usize; N_BINS])> {
        self.condition_order
            .iter()
            .map(|&c| {
                let mut n = [0; N_BINS];
                self.entries
                    .iter()
                    .filter(|e| e.condition == c)
                    .for_each(|e| n[e.bin_index as usize] += 1);
                (c, n)
            })
            .collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let seq: Vec<(Condition, u8)> = self.entries.iter().map(|e| (e.condition, e.bin_index)).collect();
        let mut v = sequence_violations(&seq, self.trials_per_block, &self.bins);
        for (i, e) in self.entries.iter().enumerate() {
            let off = (e.angle_deg - bin_center(e.bin_index)).abs();
            if off > self.jitter_deg + 1e-9 {
                v.push(format!("trial {i}: angle {} is {off} deg from its bin centre", e.angle_deg));
            }
        }
        v
    }
}

/// Plan-constraint violations in a trial sequence: repeated bins on
/// consecutive trials, and per-block bin counts differing by more than one.
/// Blocks are consecutive runs of `trials_per_block` trials of a condition.
pub fn sequence_violations(seq: &[(Condition, u8)], trials_per_block: usize, bins: &[u8]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, w) in seq.windows(2).enumerate() {
        if w[0].1 == w[1].1 {
            out.push(format!("trials {i} and {}: bin {} repeated", i + 1, w[1].1));
        }
    }
    if trials_per_block == 0 {
        return out;
    }
    for cond in Condition::ALL {
        let own: Vec<u8> = seq.iter().filter(|(c, _)| *c == cond).map(|(_, b)| *b).collect();
        for (blk, chunk) in own.chunks(trials_per_block).enumerate() {
            if chunk.len() < trials_per_block {
                continue;
            }
            let counts: Vec<usize> = bins.iter().map(|b| chunk.iter().filter(|x| *x == b).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            if hi - lo > 1 {
                out.push(format!("{cond} block {blk}: bin counts {counts:?} differ by more than 1"));
            }
        }
    }
    out
}

/// Whether `counts` can be laid out with no equal neighbours and a first
/// element different from `last`.
fn arrangeable(counts: &[usize], last: Option<usize>) -> bool {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return true;
    }
    let cap = total.div_ceil(2);
    if counts.iter().any(|&c| c > cap) {
        return false;
    }
    !matches!(last, Some(l) if total % 2 == 1 && counts[l] == cap)
}

pub fn generate_trial_plan(seed: u64, overrides: &PlanOverrides) -> Result<TrialPlan> {
    let blocks = overrides.blocks_per_condition.unwrap_or(6);
    let per_block = overrides.trials_per_block.unwrap_or(102);
    let isi = overrides.isi_s.unwrap_or(2.5);
    let lead_in = overrides.lead_in_s.unwrap_or(2.0);
    let jitter = overrides.jitter_deg.unwrap_or(10.0);
    let bins: Vec<u8> = overrides.bins.clone().unwrap_or_else(|| (0..N_BINS as u8).collect());
    if blocks == 0 || per_block == 0 {
        return Err(Error::Config("blocks and trials per block must be positive".into()));
    }
    if !(isi > 0.0) || !(lead_in >= 0.0) || !(0.0..=10.0).contains(&jitter) {
        return Err(Error::Config(format!(
            "invalid timing: isi {isi}, lead-in {lead_in}, jitter {jitter}"
        )));
    }
    let mut sorted = bins.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if bins.is_empty() || sorted.len() != bins.len() || bins.iter().any(|&b| b as usize >= N_BINS) {
        return Err(Error::Config(format!("invalid bin list {bins:?}")));
    }

    let mut rng = rng_for(seed, Stream::Plan, &[]);
    let counterbalance = match overrides.counterbalance {
        Some(c) if c < 4 => c,
        Some(c) => return Err(Error::Config(format!("counterbalance order {c} not in 0..4"))),
        None => rng.random_range(0..4),
    };
    let condition_order: Vec<Condition> = match &overrides.conditions {
        Some(list) if list.is_empty() => return Err(Error::Config("empty condition list".into())),
        Some(list) => COUNTERBALANCE[counterbalance]
            .iter()
            .copied()
            .filter(|c| list.contains(c))
            .collect(),
        None => COUNTERBALANCE[counterbalance].to_vec(),
    };

    let nb = bins.len();
    let mut entries = Vec::with_capacity(condition_order.len() * blocks * per_block);
    let mut prev: Option<usize> = None;
    for &cond in &condition_order {
        for block in 0..blocks {
            let mut counts = vec![per_block / nb; nb];
            let base = per_block / nb;
            for extra in sample(&mut rng, nb, per_block % nb) {
                counts[extra] += 1;
            }
            // An extra trial on the previous block's last bin can make the
            // block impossible to start; move it elsewhere.
            if let Some(p) = prev {
                if !arrangeable(&counts, prev) && counts[p] > base {
                    if let Some(q) = (0..nb).find(|&q| q != p && counts[q] == base) {
                        counts[p] -= 1;
                        counts[q] += 1;
                    }
                }
            }
            if !arrangeable(&counts, prev) {
                return Err(Error::Unsatisfiable(format!(
                    "{per_block} trials over {nb} bin(s) cannot avoid consecutive repeats"
                )));
            }
            for _ in 0..per_block {
                let mut candidates = Vec::with_capacity(nb);
                for b in 0..nb {
                    if counts[b] == 0 || Some(b) == prev {
                        continue;
                    }
                    counts[b] -= 1;
                    if arrangeable(&counts, Some(b)) {
                        candidates.push(b);
                    }
                    counts[b] += 1;
                }
                let total: usize = candidates.iter().map(|&b| counts[b]).sum();
                let mut pick = rng.random_range(0..total);
                let chosen = *candidates
                    .iter()
                    .find(|&&b| {
                        if pick < counts[b] {
                            true
                        } else {
                            pick -= counts[b];
                            false
                        }
                    })
                    .unwrap();
                counts[chosen] -= 1;
                prev = Some(chosen);
                let bin = bins[chosen];
                let angle = bin_center(bin) + if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                entries.push(PlanEntry {
                    condition: cond,
                    block,
                    bin_index: bin,
                    angle_deg: angle,
                    onset_s: lead_in + entries.len() as f64 * isi,
                });
            }
        }
    }
    Ok(TrialPlan {
        blocks_per_condition: blocks,
        trials_per_block: per_block,
        isi_s: isi,
        lead_in_s: lead_in,
        jitter_deg: jitter,
        counterbalance,
        condition_order,
        bins,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationParams {
    /// Time for dynamic targets to reach full modulation.
    pub ramp_duration_s: f64,
    /// Onset delay in conditions with distractors.
    pub distractor_delay_s: f64,
    pub dip_start_s: f64,
    pub dip_end_s: f64,
    /// Fractional reduction during the dip, distractor conditions only.
    pub dip_depth: f64,
    /// Modulation ends here; must not exceed the inter-stimulus interval.
    pub active_end_s: f64,
}

impl Default for ModulationParams {
    fn default() -> Self {
        Self {
            ramp_duration_s: 1.25,
            distractor_delay_s: 0.35,
            dip_start_s: 1.2,
            dip_end_s: 1.9,
            dip_depth: 0.5,
            active_end_s: 1.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// RMS of background alpha per channel.
    pub alpha_uv: f64,
    pub pink_uv: f64,
    /// Power spectrum exponent of the pink sources.
    pub pink_exponent: f64,
    pub white_uv: f64,
    pub n_pink_sources: usize,
    pub n_alpha_sources: usize,
    /// Spatial spread of sources on the unit sphere.
    pub source_width: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            alpha_uv: 10.0,
            pink_uv: 10.0,
            pink_exponent: 1.0,
            white_uv: 2.0,
            n_pink_sources: 8,
            n_alpha_sources: 4,
            source_width: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvokedParams {
    /// Size of the contralateral negativity; 0 disables it.
    pub amplitude_uv: f64,
    pub latency_s: f64,
    pub width_s: f64,
}

impl Default for EvokedParams {
    fn default() -> Self {
        Self {
            amplitude_uv: 4.0,
            latency_s: 0.2,
            width_s: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub tuning_exponent: i32,
    pub alpha_freq_hz: f64,
    /// Oscillation amplitude at an electrode's preferred location.
    pub signal_uv: f64,
    pub structured_weight: f64,
    pub random_weight: f64,
    /// Event markers precede the stimulus by this much.
    pub marker_lag_ms: f64,
    pub modulation: ModulationParams,
    pub noise: NoiseParams,
    pub evoked: EvokedParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            tuning_exponent: 7,
            alpha_freq_hz: 10.0,
            signal_uv: 10.0,
            structured_weight: 1.0,
            random_weight: 0.5,
            marker_lag_ms: 25.56,
            modulation: ModulationParams::default(),
            noise: NoiseParams::default(),
            evoked: EvokedParams::default(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        let m = &self.modulation;
        let nonneg = [n.alpha_uv, n.pink_uv, n.white_uv, self.signal_uv, self.evoked.amplitude_uv, self.marker_lag_ms];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("amplitudes and lag must be non-negative".into()));
        }
        if self.tuning_exponent < 1 || !(self.alpha_freq_hz > 0.0) {
            return Err(Error::Config("tuning exponent and alpha frequency must be positive".into()));
        }
        if !(m.ramp_duration_s > 0.0) || !(0.0..=1.0).contains(&m.dip_depth) || !(m.active_end_s > 0.0) {
            return Err(Error::Config("invalid modulation parameters".into()));
        }
        if !(self.evoked.width_s > 0.0) || !(n.source_width > 0.0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }
}

/// Tuning depth in [0, 1] at `tau` seconds after onset.
pub fn modulation(condition: Condition, tau: f64, p: &ModulationParams) -> f64 {
    let delay = if condition.has_distractors() { p.distractor_delay_s } else { 0.0 };
    if tau < delay || tau >= p.active_end_s {
        return 0.0;
    }
    let base = if condition.is_static() {
        1.0
    } else {
        ((tau - delay) / p.ramp_duration_s).min(1.0)
    };
    if condition.has_distractors() && tau >= p.dip_start_s && tau < p.dip_end_s {
        base * (1.0 - p.dip_depth)
    } else {
        base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGroundTruth {
    pub schema_version: u32,
    pub seed: u64,
    pub electrodes: Vec<String>,
    /// Electrodes x 6 mixing weights; rows of non-posterior channels are 0.
    pub w_true: Vec<Vec<f64>>,
    pub params: SimParams,
}

impl SimGroundTruth {
    /// Weights prefer target angles on the electrode's own side, so alpha
    /// power rises over the hemisphere ipsilateral to the target.
    pub fn generate(params: SimParams, layout: &ElectrodeLayout, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = rng_for(seed, Stream::Weights, &[0]);
        let c_bins = crate::iem::basis_matrix(&CENTERS_DEG, params.tuning_exponent);
        let mut w_true = Vec::with_capacity(layout.len());
        for (label, pos) in layout.labels().iter().zip(layout.positions()) {
            let random: Vec<f64> = (0..N_BINS).map(|_| rng.random::<f64>()).collect();
            if !is_posterior(label) {
                w_true.push(vec![0.0; N_BINS]);
                continue;
            }
            let pref = (2.0 * (pos[2] - 0.3)).atan2(pos[0]).to_degrees();
            let mut row: Vec<f64> = (0..N_BINS)
                .map(|j| {
                    params.structured_weight * basis_response(CENTERS_DEG[j], pref, 2)
                        + params.random_weight * random[j]
                })
                .collect();
            let peak = (0..N_BINS)
                .map(|b| (0..N_BINS).map(|j| row[j] * c_bins[(j, b)]).sum::<f64>())
                .fold(0.0, f64::max);
            if peak > 0.0 {
                row.iter_mut().for_each(|v| *v /= peak);
            }
            w_true.push(row);
        }
        let active: Vec<&Vec<f64>> = w_true.iter().filter(|r| r.iter().any(|&v| v != 0.0)).collect();
        let m = DMatrix::from_fn(active.len(), N_BINS, |i, j| active[i][j]);
        if active.len() < N_BINS || m.rank(1e-9) < N_BINS {
            return Err(Error::Config(format!(
                "layout has {} posterior electrodes; mixing matrix is not full column rank",
                active.len()
            )));
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            seed,
            electrodes: layout.labels().to_vec(),
            w_true,
            params,
        })
    }

    /// Tuned amplitude of every electrode for a target at `angle_deg`.
    pub fn amplitudes(&self, angle_deg: f64) -> Vec<f64> {
        let c: Vec<f64> = CENTERS_DEG
            .iter()
            .map(|&ctr| basis_response(angle_deg, ctr, self.params.tuning_exponent))
            .collect();
        self.w_true
            .iter()
            .map(|row| self.params.signal_uv * row.iter().zip(&c).map(|(w, c)| w * c).sum::<f64>())
            .collect()
    }
}

pub fn export_ground_truth(truth: &SimGroundTruth, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(truth)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_ground_truth(path: &Path) -> Result<SimGroundTruth> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let truth: SimGroundTruth = serde_json::from_str(&text)?;
    if truth.schema_version != SCHEMA_VERSION {
        return Err(Error::UnknownVersion {
            found: truth.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(truth)
}

/// Unit-RMS Gaussian noise with power spectrum shaped by `gain(f)^2`.
fn shaped_noise(n: usize, rate_hz: f64, seed: u64, path: &[u64], gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut rng = rng_for(seed, Stream::Noise, path);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate_hz / n as f64;
        *v *= gain(f);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

const NO_TRIAL: u32 = u32::MAX;

/// Precomputed sources from which channel rows are assembled on demand.
pub struct Synthesizer {
    rate_hz: f64,
    n_samples: usize,
    layout: ElectrodeLayout,
    seed: u64,
    white_uv: f64,
    events: Vec<Event>,
    /// Unit-amplitude tuned oscillation and the trial it belongs to.
    carrier: Vec<f64>,
    carrier_trial: Vec<u32>,
    /// Trials x channels tuned amplitudes.
    amps: Array2<f64>,
    evoked: Vec<f64>,
    evoked_trial: Vec<u32>,
    /// Trials x channels evoked gains.
    evoked_gain: Array2<f64>,
    sources: Vec<Vec<f64>>,
    /// Channels x sources, already scaled to microvolts.
    mixing: Array2<f64>,
}

impl Synthesizer {
    pub fn new(plan: &TrialPlan, truth: &SimGroundTruth, layout: &ElectrodeLayout, rate_hz: f64) -> Result<Self> {
        let p = &truth.params;
        p.validate()?;
        if rate_hz < 250.0 {
            return Err(Error::Config(format!("simulation rate {rate_hz} Hz is below 250 Hz")));
        }
        if truth.electrodes != layout.labels() {
            return Err(Error::Config("ground truth was generated for a different layout".into()));
        }
        if p.modulation.active_end_s > plan.isi_s {
            return Err(Error::Config("modulation outlasts the inter-stimulus interval".into()));
        }
        let n = (plan.duration_s() * rate_hz).round() as usize;
        let n_ch = layout.len();
        let n_tr = plan.entries.len();
        let lag_s = p.marker_lag_ms / 1000.0;

        let mut events = Vec::with_capacity(n_tr);
        let mut carrier = vec![0.0; n];
        let mut carrier_trial = vec![NO_TRIAL; n];
        let mut evoked = vec![0.0; n];
        let mut evoked_trial = vec![NO_TRIAL; n];
        let mut amps = Array2::zeros((n_tr, n_ch));
        let mut evoked_gain = Array2::zeros((n_tr, n_ch));

        for (k, e) in plan.entries.iter().enumerate() {
            let mut rng = rng_for(truth.seed, Stream::Trial, &[k as u64]);
            let phase = rng.random_range(0.0..2.0 * PI);
            let rt = if e.condition.is_static() {
                500.0 + 300.0 * rng.random::<f64>()
            } else {
                1200.0 + 500.0 * rng.random::<f64>()
            };
            events.push(Event {
                sample_index: ((e.onset_s - lag_s) * rate_hz).round().max(0.0) as usize,
                code: Event::code_for(e.condition, e.bin_index),
                condition: e.condition,
                bin_index: e.bin_index,
                angle_deg: e.angle_deg,
                hit: true,
                rt_ms: Some(rt.round()),
            });

            let s0 = (e.onset_s * rate_hz).round() as usize;
            let s1 = (((e.onset_s + p.modulation.active_end_s) * rate_hz).round() as usize).min(n);
            for s in s0..s1 {
                let tau = (s - s0) as f64 / rate_hz;
                let m = modulation(e.condition, tau, &p.modulation);
                carrier[s] = m * (2.0 * PI * p.alpha_freq_hz * tau + phase).sin();
                carrier_trial[s] = k as u32;
            }
            amps.row_mut(k).assign(&ndarray::Array1::from(truth.amplitudes(e.angle_deg)));

            let field = hemifield_of(e.angle_deg);
            if e.condition.is_static() && p.evoked.amplitude_uv > 0.0 && field != Hemifield::Midline {
                let contra = if field == Hemifield::Left { Hemisphere::Right } else { Hemisphere::Left };
                for (c, (label, h)) in layout.labels().iter().zip(layout.hemispheres()).enumerate() {
                    if is_posterior(label) && *h == contra {
                        evoked_gain[[k, c]] = 1.0;
                    }
                }
                let half = 5.0 * p.evoked.width_s;
                let a = ((e.onset_s + p.evoked.latency_s - half) * rate_hz).round().max(0.0) as usize;
                let b = (((e.onset_s + p.evoked.latency_s + half) * rate_hz).round() as usize).min(n);
                for s in a..b {
                    let tau = s as f64 / rate_hz - e.onset_s - p.evoked.latency_s;
                    evoked[s] = -p.evoked.amplitude_uv * (-tau * tau / (2.0 * p.evoked.width_s.powi(2))).exp();
                    evoked_trial[s] = k as u32;
                }
            }
        }

        // Spatially smooth background sources.
        let np = p.noise.n_pink_sources;
        let na = p.noise.n_alpha_sources;
        let beta = p.noise.pink_exponent;
        let f_alpha = p.alpha_freq_hz;
        let sources: Vec<Vec<f64>> = (0..np + na)
            .into_par_iter()
            .map(|i| {
                if i < np {
                    shaped_noise(n, rate_hz, truth.seed, &[0, i as u64], |f| {
                        if f == 0.0 { 0.0 } else { f.powf(-beta / 2.0) }
                    })
                } else {
                    shaped_noise(n, rate_hz, truth.seed, &[1, i as u64], |f| {
                        (-(f - f_alpha).powi(2) / 2.0).exp()
                    })
                }
            })
            .collect();
        let mut rng = rng_for(truth.seed, Stream::Weights, &[1]);
        let centres: Vec<[f64; 3]> = (0..np + na)
            .map(|_| {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                [v[0] / norm, v[1] / norm, v[2].abs() / norm]
            })
            .collect();
        let width2 = 2.0 * p.noise.source_width.powi(2);
        let mut mixing = Array2::zeros((n_ch, np + na));
        for (c, pos) in layout.positions().iter().enumerate() {
            for (range, scale) in [(0..np, p.noise.pink_uv), (np..np + na, p.noise.alpha_uv)] {
                let w: Vec<f64> = range
                    .clone()
                    .map(|s| {
                        let d2: f64 = (0..3).map(|i| (pos[i] - centres[s][i]).powi(2)).sum();
                        (-d2 / width2).exp()
                    })
                    .collect();
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (s, v) in range.zip(w) {
                    mixing[[c, s]] = if norm > 0.0 { scale * v / norm } else { 0.0 };
                }
            }
        }

        Ok(Self {
            rate_hz,
            n_samples: n,
            layout: layout.clone(),
            seed: truth.seed,
            white_uv: p.noise.white_uv,
            events,
            carrier,
            carrier_trial,
            amps,
            evoked,
            evoked_trial,
            evoked_gain,
            sources,
            mixing,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        let mut rng = rng_for(self.seed, Stream::Noise, &[2, c as u64]);
        let mut row: Vec<f64> = (0..self.n_samples)
            .map(|_| self.white_uv * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (s, src) in self.sources.iter().enumerate() {
            let g = self.mixing[[c, s]];
            if g != 0.0 {
                row.iter_mut().zip(src).for_each(|(r, v)| *r += g * v);
            }
        }
        for (i, r) in row.iter_mut().enumerate() {
            let k = self.carrier_trial[i];
            if k != NO_TRIAL {
                *r += self.amps[[k as usize, c]] * self.carrier[i];
            }
            let k = self.evoked_trial[i];
            if k != NO_TRIAL {
                *r += self.evoked_gain[[k as usize, c]] * self.evoked[i];
            }
        }
        row
    }

    pub fn recording(&self) -> Result<RawRecording> {
        let all = self.layout.labels().to_vec();
        self.recording_of(&all)
    }

    /// Only the listed channels. Values match the full recording exactly.
    pub fn recording_of<S: AsRef<str>>(&self, labels: &[S]) -> Result<RawRecording> {
        let idx = self.layout.indices_of(labels)?;
        let mut data = Array2::zeros((idx.len(), self.n_samples));
        Zip::indexed(data.axis_iter_mut(Axis(0))).par_for_each(|i, mut row| {
            row.assign(&ndarray::Array1::from(self.channel(idx[i])));
        });
        RawRecording::new(data, self.rate_hz, self.layout.subset(labels)?, self.events.clone())
    }

    /// Stream channels straight to a dataset directory and add `truth.json`.
    pub fn write(&self, truth: &SimGroundTruth, dir: &Path) -> Result<()> {
        write_dataset_rows(
            dir,
            self.rate_hz,
            self.n_samples,
            &self.layout,
            &Default::default(),
            &self.events,
            |c| Ok(self.channel(c)),
        )?;
        export_ground_truth(truth, &dir.join(TRUTH_FILE))
    }
}

pub fn synthesize_recording(
    plan: &TrialPlan,
    truth: &SimGroundTruth,
    layout: &ElectrodeLayout,
    rate_hz: f64,
) -> Result<RawRecording> {
    Synthesizer::new(plan, truth, layout, rate_hz)?.recording()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_plan_counts() {
        let plan = generate_trial_plan(1, &PlanOverrides::default()).unwrap();
        assert_eq!(plan.entries.len(), 2448);
        for (cond, counts) in plan.counts() {
            assert_eq!(counts, [102; 6], "{cond}");
        }
        for cond in Condition::ALL {
            for block in 0..6 {
                let mut n = [0; 6];
                plan.entries
                    .iter()
                    .filter(|e| e.condition == cond && e.block == block)
                    .for_each(|e| n[e.bin_index as usize] += 1);
                assert_eq!(n, [17; 6]);
            }
        }
        assert!(plan.violations().is_empty());
        assert!(COUNTERBALANCE.iter().any(|o| o.as_slice() == plan.condition_order));
    }

    #[test]
    fn plans_are_seeded() {
        let a = generate_trial_plan(3, &PlanOverrides::default()).unwrap();
        assert_eq!(a, generate_trial_plan(3, &PlanOverrides::default()).unwrap());
        assert_ne!(a, generate_trial_plan(4, &PlanOverrides::default()).unwrap());
    }

    #[test]
    fn single_bin_is_unsatisfiable() {
        let o = PlanOverrides { bins: Some(vec![2]), ..Default::default() };
        assert!(matches!(generate_trial_plan(1, &o), Err(Error::Unsatisfiable(_))));
        let one = PlanOverrides { bins: Some(vec![2]), trials_per_block: Some(1), blocks_per_condition: Some(1), conditions: Some(vec![Condition::StaticSingle]), ..Default::default() };
        assert!(generate_trial_plan(1, &one).is_ok());
    }

    #[test]
    fn two_bins_alternate() {
        let o = PlanOverrides { bins: Some(vec![0, 3]), trials_per_block: Some(11), ..Default::default() };
        let plan = generate_trial_plan(5, &o).unwrap();
        assert!(plan.violations().is_empty());
    }

    #[test]
    fn arrangeable_criterion() {
        assert!(arrangeable(&[2, 1], None));
        assert!(!arrangeable(&[2, 1], Some(0)));
        assert!(arrangeable(&[1, 1], Some(0)));
        assert!(!arrangeable(&[3, 1], None));
        assert!(arrangeable(&[0, 0], Some(1)));
    }

    #[test]
    fn violations_detect_repeats_and_imbalance() {
        let seq = vec![(Condition::StaticSingle, 0u8), (Condition::StaticSingle, 0), (Condition::StaticSingle, 1)];
        let v = sequence_violations(&seq, 0, &[0, 1]);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("repeated"));
        let seq: Vec<(Condition, u8)> = [0u8, 1, 0, 1, 0, 2].iter().map(|&b| (Condition::StaticSingle, b)).collect();
        assert_eq!(sequence_violations(&seq, 6, &[0, 1, 2]).len(), 1);
    }

    #[test]
    fn modulation_profiles() {
        let p = ModulationParams::default();
        assert_eq!(modulation(Condition::StaticSingle, -0.1, &p), 0.0);
        assert_eq!(modulation(Condition::StaticSingle, 0.0, &p), 1.0);
        assert_eq!(modulation(Condition::StaticSingle, 1.95, &p), 0.0);
        assert!((modulation(Condition::DynamicSingle, 0.625, &p) - 0.5).abs() < 1e-12);
        assert_eq!(modulation(Condition::DynamicSingle, 1.3, &p), 1.0);
        assert_eq!(modulation(Condition::StaticMultiple, 0.3, &p), 0.0);
        assert_eq!(modulation(Condition::StaticMultiple, 0.5, &p), 1.0);
        assert_eq!(modulation(Condition::StaticMultiple, 1.5, &p), 0.5);
        for i in 0..200 {
            let tau = i as f64 * 0.01;
            for c in Condition::ALL {
                let m = modulation(c, tau, &p);
                assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn ground_truth_is_lateralized_and_full_rank() {
        let layout = ElectrodeLayout::standard_64();
        let truth = SimGroundTruth::generate(SimParams::default(), &layout, 3).unwrap();
        let po7 = layout.index_of("PO7").unwrap();
        let po8 = layout.index_of("PO8").unwrap();
        let left_target = truth.amplitudes(150.0);
        let right_target = truth.amplitudes(30.0);
        assert!(left_target[po7] > left_target[po8]);
        assert!(right_target[po8] > right_target[po7]);
        assert!(truth.w_true[layout.index_of("Cz").unwrap()].iter().all(|&v| v == 0.0));
        assert!(truth.w_true.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn bin_centre_signals_span_six_dimensions() {
        let layout = ElectrodeLayout::standard_64();
        let truth = SimGroundTruth::generate(SimParams::default(), &layout, 8).unwrap();
        let cols: Vec<Vec<f64>> = CENTERS_DEG.iter().map(|&a| truth.amplitudes(a)).collect();
        let m = DMatrix::from_fn(layout.len(), 6, |i, j| cols[j][i]);
        assert_eq!(m.rank(1e-9), 6);
    }

    #[test]
    fn truth_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = ElectrodeLayout::standard_64();
        let truth = SimGroundTruth::generate(SimParams::default(), &layout, 21).unwrap();
        let path = dir.path().join(TRUTH_FILE);
        export_ground_truth(&truth, &path).unwrap();
        let back = load_ground_truth(&path).unwrap();
        assert_eq!(back, truth);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"seed\": 21"));
        assert!(text.contains("\"schema_version\": 1"));
    }

    fn small_plan(seed: u64, cond: Condition) -> TrialPlan {
        generate_trial_plan(
            seed,
            &PlanOverrides {
                conditions: Some(vec![cond]),
                blocks_per_condition: Some(1),
                trials_per_block: Some(12),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn synthesis_is_deterministic() {
        let layout = ElectrodeLayout::standard_64().subset(&ElectrodeLayout::standard_64().posterior_labels()).unwrap();
        let truth = SimGroundTruth::generate(SimParams::default(), &layout, 4).unwrap();
        let plan = small_plan(4, Condition::StaticSingle);
        let a = synthesize_recording(&plan, &truth, &layout, 250.0).unwrap();
        let b = synthesize_recording(&plan, &truth, &layout, 250.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.events.len(), 12);
        assert!(a.events.iter().all(|e| e.hit));
        // markers precede the stimulus by the display lag
        let onset = (plan.entries[0].onset_s * 250.0).round() as usize;
        assert_eq!(a.events[0].sample_index, onset - 6);
    }

    #[test]
    fn low_rates_rejected() {
        let layout = ElectrodeLayout::standard_64();
        let truth = SimGroundTruth::generate(SimParams::default(), &layout, 4).unwrap();
        assert!(synthesize_recording(&small_plan(1, Condition::StaticSingle), &truth, &layout, 200.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plan_constraints_hold(seed in any::<u64>(), per_block in 6usize..60, n_bins in 2usize..=6) {
            let o = PlanOverrides {
                trials_per_block: Some(per_block),
                blocks_per_condition: Some(2),
                bins: Some((0..n_bins as u8).collect()),
                ..Default::default()
            };
            match generate_trial_plan(seed, &o) {
                Ok(plan) => prop_assert!(plan.violations().is_empty()),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
