//! Per-subject stages and group statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use ndarray::{Array2, Array3};
use saber_core::dataset::META_FILE;
use saber_core::erp::{average_erp, mean_amplitude, write_erp_csv, ErpResult, WindowAmplitude};
use saber_core::iem::{attach_permuted, run_iem_timecourse, run_permuted_iem, write_crf_csv, write_slope_csv, CrfTimecourse};
use saber_core::layout::ERP_PAIRS;
use saber_core::lateralization::{
    hemifield_null, lateralization_timecourse_with, write_lateralization_csv, LateralizationTimecourse, Rois,
};
use saber_core::preprocess::{
    alpha_power, clean_continuous, epoch, equalize_bins, reject_epochs, ContinuousReport, EpochReport,
    RejectionReport,
};
use saber_core::rng::{derive_seed, Stream};
use saber_core::stats::{
    perm_test_vs_zero, perm_ttest_paired, slope_vs_permuted, timecourse_significance, Baseline, ClusterConfig,
    ClusterReport, PermTestResult,
};
use saber_core::{read_dataset, write_dataset, BandPowerSet, Condition, EpochSet, RawRecording};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::PipelineConfig;

pub const CLEAN_DIR: &str = "clean";
pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const ERP_FILE: &str = "erp.json";
pub const LATERALIZATION_FILE: &str = "lateralization.json";
pub const IEM_FILE: &str = "iem.json";
pub const STATS_FILE: &str = "stats.json";

pub fn subject_name(index: usize) -> String {
    format!("sub-{:02}", index + 1)
}

pub fn subject_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, Stream::Misc, &[index as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub continuous: ContinuousReport,
    pub epochs: EpochReport,
    pub rejection: RejectionReport,
    pub bad_channels: Vec<String>,
    /// Trials per condition after bin equalisation.
    pub trials: BTreeMap<Condition, usize>,
}

/// Cleaned data and analysis-ready epochs of one subject.
pub struct Prepared {
    pub clean: RawRecording,
    pub epochs: EpochSet,
    pub summary: PreprocessSummary,
}

/// A raw dataset, or the output directory of `saber preprocess` whose
/// cleaned data can be reused.
pub fn load_input(path: &Path) -> anyhow::Result<(RawRecording, Option<ContinuousReport>)> {
    let clean = path.join(CLEAN_DIR);
    if clean.join(META_FILE).is_file() {
        let rec = read_dataset(&clean)?;
        let summary: PreprocessSummary = read_json(&path.join(PREPROCESS_FILE))?;
        return Ok((rec, Some(summary.continuous)));
    }
    Ok((read_dataset(path)?, None))
}

pub fn prepare(rec: &RawRecording, cleaned: Option<ContinuousReport>, cfg: &PipelineConfig, seed: u64) -> anyhow::Result<Prepared> {
    let (clean, continuous) = match cleaned {
        Some(report) => (rec.clone(), report),
        None => clean_continuous(rec, &cfg.preprocess).context("continuous preprocessing")?,
    };
    let (ep, epochs) = epoch(&clean, &cfg.preprocess).context("epoching")?;
    let (ep, rejection) = reject_epochs(&ep, cfg.preprocess.reject_uv).context("epoch rejection")?;
    let ep = equalize_bins(&ep, derive_seed(seed, Stream::Equalize, &[])).context("bin equalisation")?;
    let trials = ep.conditions().into_iter().map(|c| (c, ep.trials_of(c).len())).collect();
    let summary = PreprocessSummary {
        continuous,
        epochs,
        rejection,
        bad_channels: clean.bad_channels.iter().cloned().collect(),
        trials,
    };
    Ok(Prepared { clean, epochs: ep, summary })
}

pub fn write_preprocess(prep: &Prepared, dir: &Path, write_clean: bool) -> anyhow::Result<Vec<String>> {
    let mut outputs = vec![PREPROCESS_FILE.to_string()];
    write_json(&dir.join(PREPROCESS_FILE), &prep.summary)?;
    if write_clean {
        write_dataset(&prep.clean, &dir.join(CLEAN_DIR))?;
        for f in saber_core::dataset::DATASET_FILES {
            outputs.push(format!("{CLEAN_DIR}/{f}"));
        }
    }
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpOutput {
    pub window_s: (f64, f64),
    pub amplitude: BTreeMap<Condition, WindowAmplitude>,
    pub erp: ErpResult,
}

pub fn run_erp(prep: &Prepared, cfg: &PipelineConfig, dir: &Path) -> anyhow::Result<(ErpOutput, Vec<String>)> {
    let erp = average_erp(&prep.epochs, &ERP_PAIRS).context("ERP averaging")?;
    let amplitude = mean_amplitude(&erp, cfg.erp_window_s)?;
    let out = ErpOutput {
        window_s: cfg.erp_window_s,
        amplitude,
        erp,
    };
    write_erp_csv(&out.erp, &dir.join("erp.csv"))?;
    write_json(&dir.join(ERP_FILE), &out)?;
    Ok((out, vec!["erp.csv".into(), ERP_FILE.into()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralizationOutput {
    pub timecourse: LateralizationTimecourse,
    pub n_null: usize,
    /// 95th percentile of |index| under shuffled hemifield labels, per
    /// timepoint.
    pub null_p95: BTreeMap<Condition, Vec<f64>>,
}

pub fn run_lateralization(
    power: &BandPowerSet,
    cfg: &PipelineConfig,
    seed: u64,
    dir: &Path,
) -> anyhow::Result<(LateralizationOutput, Vec<String>)> {
    let rois = Rois::default();
    let timecourse = lateralization_timecourse_with(power, &rois, None).context("lateralization index")?;
    let null = hemifield_null(
        power,
        &rois,
        cfg.lateralization_null_perms,
        derive_seed(seed, Stream::Permutation, &[1]),
    )?;
    let null_p95 = null
        .into_iter()
        .map(|(c, perms)| {
            let n_t = perms.first().map_or(0, Vec::len);
            let bound = (0..n_t)
                .map(|t| {
                    let mut v: Vec<f64> = perms.iter().filter_map(|p| p[t]).map(f64::abs).collect();
                    if v.is_empty() {
                        f64::NAN
                    } else {
                        saber_core::iem::percentile(&mut v, 0.95)
                    }
                })
                .collect();
            (c, bound)
        })
        .collect();
    let out = LateralizationOutput {
        timecourse,
        n_null: cfg.lateralization_null_perms,
        null_p95,
    };
    write_lateralization_csv(&out.timecourse, &dir.join("lateralization.csv"))?;
    write_json(&dir.join(LATERALIZATION_FILE), &out)?;
    Ok((out, vec!["lateralization.csv".into(), LATERALIZATION_FILE.into()]))
}

pub fn run_iem(
    power: &BandPowerSet,
    cfg: &PipelineConfig,
    seed: u64,
    dir: &Path,
) -> anyhow::Result<(CrfTimecourse, Vec<String>)> {
    let iem_seed = derive_seed(seed, Stream::Misc, &[1]);
    let mut tc = run_iem_timecourse(power, &cfg.iem, iem_seed).context("IEM")?;
    if cfg.analyses.iem_permutations {
        let perm = run_permuted_iem(power, &cfg.iem, iem_seed).context("permuted IEM")?;
        attach_permuted(&mut tc, perm);
    }
    write_crf_csv(&tc, &dir.join("crf.csv"))?;
    write_slope_csv(&tc, &dir.join("slope.csv"))?;
    write_json(&dir.join(IEM_FILE), &tc)?;
    Ok((tc, vec!["crf.csv".into(), "slope.csv".into(), IEM_FILE.into()]))
}

/// Everything one subject contributes to group statistics and the report.
#[derive(Debug, Clone, Default)]
pub struct SubjectResults {
    pub name: String,
    pub dataset_sha256: String,
    pub n_events: usize,
    pub preprocess: Option<PreprocessSummary>,
    pub erp: Option<ErpOutput>,
    pub lateralization: Option<LateralizationOutput>,
    pub iem: Option<CrfTimecourse>,
}

impl SubjectResults {
    /// Results previously written by the stage subcommands.
    pub fn load(dir: &Path, name: String) -> anyhow::Result<Self> {
        let opt = |f: &str| dir.join(f).is_file().then(|| dir.join(f));
        Ok(Self {
            name,
            preprocess: opt(PREPROCESS_FILE).map(|p| read_json(&p)).transpose()?,
            erp: opt(ERP_FILE).map(|p| read_json(&p)).transpose()?,
            lateralization: opt(LATERALIZATION_FILE).map(|p| read_json(&p)).transpose()?,
            iem: opt(IEM_FILE).map(|p| read_json(&p)).transpose()?,
            ..Default::default()
        })
    }
}

/// Summary of a permutation test without its null distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub t_obs: f64,
    pub p_null: f64,
    pub cohens_d: f64,
    pub n_iterations: usize,
}

impl From<PermTestResult> for TestSummary {
    fn from(r: PermTestResult) -> Self {
        Self {
            t_obs: r.t_obs,
            p_null: r.p_null,
            cohens_d: r.cohens_d,
            n_iterations: r.n_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: Condition,
    pub b: Condition,
    pub measure: String,
    pub window_s: (f64, f64),
    pub test: TestSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n_subjects: usize,
    /// Group-mean CRF slope against permuted slopes.
    pub iem_vs_permuted: BTreeMap<Condition, ClusterReport>,
    /// Lateralization index against zero (needs 2+ subjects).
    pub lateralization_vs_zero: BTreeMap<Condition, ClusterReport>,
    /// Window mean of the contralateral-minus-ipsilateral wave against zero.
    pub erp_vs_zero: BTreeMap<Condition, TestSummary>,
    pub paired: Vec<PairedComparison>,
    pub notes: Vec<String>,
}

fn common_time(series: &[&Vec<f64>]) -> anyhow::Result<Vec<f64>> {
    let first = series.first().context("no subjects")?;
    if series.iter().any(|s| s != first) {
        anyhow::bail!("subjects have different time axes");
    }
    Ok((*first).clone())
}

fn window_mean(time: &[f64], v: &[Option<f64>], w: (f64, f64)) -> Option<f64> {
    let vals: Vec<f64> = time
        .iter()
        .zip(v)
        .filter(|(t, _)| **t >= w.0 && **t <= w.1)
        .filter_map(|(_, x)| *x)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn group_stats(subjects: &[SubjectResults], cfg: &PipelineConfig, seed: u64) -> anyhow::Result<GroupStats> {
    let n = subjects.len();
    let sc = &cfg.stats;
    let cc = ClusterConfig {
        alpha: sc.alpha,
        min_cluster: sc.min_cluster,
        n_iter: sc.n_iter,
    };
    let mut g = GroupStats {
        n_subjects: n,
        ..Default::default()
    };
    let conditions: Vec<Condition> = Condition::ALL.to_vec();

    // IEM slopes against permuted slopes.
    let iems: Vec<&CrfTimecourse> = subjects.iter().filter_map(|s| s.iem.as_ref()).collect();
    if iems.len() == n && n > 0 {
        let time = common_time(&iems.iter().map(|t| &t.time_s).collect::<Vec<_>>())?;
        for &c in &conditions {
            let per: Vec<_> = iems.iter().filter_map(|t| t.conditions.get(&c)).collect();
            if per.len() != n {
                continue;
            }
            let n_perm = per[0].slope_perm.len();
            if n_perm == 0 || per.iter().any(|p| p.slope_perm.len() != n_perm) {
                g.notes.push(format!("{c}: no permuted IEM slopes; slope test skipped"));
                continue;
            }
            let n_t = time.len();
            let slopes = Array2::from_shape_fn((n, n_t), |(s, t)| per[s].slope[t]);
            let perm = Array3::from_shape_fn((n, n_perm, n_t), |(s, i, t)| per[s].slope_perm[i][t]);
            match slope_vs_permuted(&slopes, &perm, &time, sc.alpha, sc.min_cluster) {
                Ok(r) => {
                    g.iem_vs_permuted.insert(c, r);
                }
                Err(e) => g.notes.push(format!("{c}: slope test skipped: {e}")),
            }
        }
    }

    let lats: Vec<&LateralizationOutput> = subjects.iter().filter_map(|s| s.lateralization.as_ref()).collect();
    let erps: Vec<&ErpOutput> = subjects.iter().filter_map(|s| s.erp.as_ref()).collect();
    if n < 2 {
        g.notes
            .push("fewer than 2 subjects: lateralization, ERP and paired tests skipped".into());
        return Ok(g);
    }

    if lats.len() == n {
        let time = common_time(&lats.iter().map(|l| &l.timecourse.time_s).collect::<Vec<_>>())?;
        for (k, &c) in conditions.iter().enumerate() {
            let per: Vec<_> = lats.iter().filter_map(|l| l.timecourse.conditions.get(&c)).collect();
            if per.len() != n {
                continue;
            }
            let values = Array2::from_shape_fn((n, time.len()), |(s, t)| per[s].index[t].unwrap_or(0.0));
            let r = timecourse_significance(
                &values,
                &Baseline::Scalar(0.0),
                &time,
                &cc,
                derive_seed(seed, Stream::Permutation, &[10, k as u64]),
            )?;
            g.lateralization_vs_zero.insert(c, r);
        }
        let pairs = [
            (Condition::StaticSingle, Condition::DynamicSingle),
            (Condition::StaticMultiple, Condition::DynamicMultiple),
            (Condition::StaticSingle, Condition::StaticMultiple),
            (Condition::DynamicSingle, Condition::DynamicMultiple),
        ];
        for (k, (a, b)) in pairs.into_iter().enumerate() {
            let mean_of = |c: Condition| -> Option<Vec<f64>> {
                lats.iter()
                    .map(|l| {
                        let cl = l.timecourse.conditions.get(&c)?;
                        window_mean(&l.timecourse.time_s, &cl.index, sc.window_s)
                    })
                    .collect()
            };
            let (Some(va), Some(vb)) = (mean_of(a), mean_of(b)) else {
                continue;
            };
            match perm_ttest_paired(&va, &vb, sc.n_iter, derive_seed(seed, Stream::Permutation, &[20, k as u64])) {
                Ok(r) => g.paired.push(PairedComparison {
                    a,
                    b,
                    measure: "lateralization_index".into(),
                    window_s: sc.window_s,
                    test: r.into(),
                }),
                Err(e) => g.notes.push(format!("{a} vs {b}: {e}")),
            }
        }
    }

    if erps.len() == n {
        for (k, &c) in conditions.iter().enumerate() {
            let v: Option<Vec<f64>> = erps.iter().map(|e| e.amplitude.get(&c).map(|a| a.diff)).collect();
            let Some(v) = v else { continue };
            match perm_test_vs_zero(&v, sc.n_iter, derive_seed(seed, Stream::Permutation, &[30, k as u64])) {
                Ok(r) => {
                    g.erp_vs_zero.insert(c, r.into());
                }
                Err(e) => g.notes.push(format!("{c} ERP: {e}")),
            }
        }
    }
    Ok(g)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

/// Alpha power of the prepared epochs.
pub fn power_of(prep: &Prepared, cfg: &PipelineConfig) -> anyhow::Result<BandPowerSet> {
    alpha_power(&prep.epochs, &cfg.preprocess).context("alpha power")
}

pub fn subject_dir(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}
