//! `report.json`: the run summary. It holds no paths or timestamps, so
//! identical data, configuration and seed give identical bytes.

use std::collections::BTreeMap;

use saber_core::erp::WindowAmplitude;
use saber_core::preprocess::format_rejection_summary;
use saber_core::stats::{Cluster, ClusterReport};
use saber_core::Condition;
use serde::{Deserialize, Serialize};

use crate::pipeline::{GroupStats, PairedComparison, SubjectResults, TestSummary};

pub const REPORT_FILE: &str = "report.json";
pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub value: f64,
    pub time_s: f64,
}

/// Largest finite value and its time; ties keep the earliest.
pub fn peak(time_s: &[f64], values: impl IntoIterator<Item = Option<f64>>) -> Option<Peak> {
    let mut best: Option<Peak> = None;
    for (t, v) in time_s.iter().zip(values) {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            if best.is_none_or(|b| v > b.value) {
                best = Some(Peak { value: v, time_s: *t });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub alpha: f64,
    pub min_cluster: usize,
    pub clusters: Vec<Cluster>,
}

impl From<&ClusterReport> for ClusterTable {
    fn from(r: &ClusterReport) -> Self {
        Self {
            alpha: r.alpha,
            min_cluster: r.min_cluster,
            clusters: r.clusters.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub name: String,
    pub dataset_sha256: String,
    pub n_events: usize,
    pub bad_channels: Vec<String>,
    pub rejection_percent: BTreeMap<Condition, f64>,
    pub trials: BTreeMap<Condition, usize>,
    pub erp_window_amplitude: Option<BTreeMap<Condition, WindowAmplitude>>,
    pub lateralization_peak: Option<BTreeMap<Condition, Peak>>,
    pub iem_peak_slope: Option<BTreeMap<Condition, Peak>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n_subjects: usize,
    pub iem_vs_permuted: BTreeMap<Condition, ClusterTable>,
    pub lateralization_vs_zero: BTreeMap<Condition, ClusterTable>,
    pub erp_vs_zero: BTreeMap<Condition, TestSummary>,
    pub paired: Vec<PairedComparison>,
    /// Group-mean slope peak per condition.
    pub group_peak_slope: BTreeMap<Condition, Peak>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub n_subjects: usize,
    /// Mean and SD over subjects of the rejected-epoch percentage.
    pub rejection_summary: String,
    pub subjects: Vec<SubjectSummary>,
    pub stats: Option<StatsSummary>,
}

pub fn subject_summary(s: &SubjectResults) -> SubjectSummary {
    let (bad_channels, rejection_percent, trials) = match &s.preprocess {
        Some(p) => (
            p.bad_channels.clone(),
            p.rejection.per_condition.iter().map(|(c, r)| (*c, r.percent)).collect(),
            p.trials.clone(),
        ),
        None => Default::default(),
    };
    SubjectSummary {
        name: s.name.clone(),
        dataset_sha256: s.dataset_sha256.clone(),
        n_events: s.n_events,
        bad_channels,
        rejection_percent,
        trials,
        erp_window_amplitude: s.erp.as_ref().map(|e| e.amplitude.clone()),
        lateralization_peak: s.lateralization.as_ref().map(|l| {
            l.timecourse
                .conditions
                .iter()
                .filter_map(|(c, cl)| Some((*c, peak(&l.timecourse.time_s, cl.index.iter().copied())?)))
                .collect()
        }),
        iem_peak_slope: s.iem.as_ref().map(|tc| {
            tc.conditions
                .iter()
                .filter_map(|(c, crf)| Some((*c, peak(&tc.time_s, crf.slope.iter().map(|&v| Some(v)))?)))
                .collect()
        }),
    }
}

fn group_peak_slope(subjects: &[SubjectResults]) -> BTreeMap<Condition, Peak> {
    let iems: Vec<_> = subjects.iter().filter_map(|s| s.iem.as_ref()).collect();
    let mut out = BTreeMap::new();
    let Some(first) = iems.first() else { return out };
    if iems.len() != subjects.len() {
        return out;
    }
    for c in first.conditions.keys() {
        let per: Vec<_> = iems.iter().filter_map(|t| t.conditions.get(c)).collect();
        if per.len() != iems.len() {
            continue;
        }
        let mean = (0..first.time_s.len()).map(|t| Some(per.iter().map(|p| p.slope[t]).sum::<f64>() / per.len() as f64));
        if let Some(p) = peak(&first.time_s, mean) {
            out.insert(*c, p);
        }
    }
    out
}

pub fn build_report(
    seed: u64,
    config_sha256: &str,
    subjects: &[SubjectResults],
    stats: Option<&GroupStats>,
) -> Report {
    let mut rates: BTreeMap<Condition, Vec<f64>> = BTreeMap::new();
    for s in subjects {
        if let Some(p) = &s.preprocess {
            for (c, r) in &p.rejection.per_condition {
                rates.entry(*c).or_default().push(r.percent);
            }
        }
    }
    Report {
        schema_version: REPORT_SCHEMA,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_sha256: config_sha256.to_string(),
        n_subjects: subjects.len(),
        rejection_summary: format_rejection_summary(&rates),
        subjects: subjects.iter().map(subject_summary).collect(),
        stats: stats.map(|g| StatsSummary {
            n_subjects: g.n_subjects,
            iem_vs_permuted: g.iem_vs_permuted.iter().map(|(c, r)| (*c, r.into())).collect(),
            lateralization_vs_zero: g.lateralization_vs_zero.iter().map(|(c, r)| (*c, r.into())).collect(),
            erp_vs_zero: g.erp_vs_zero.clone(),
            paired: g.paired.clone(),
            group_peak_slope: group_peak_slope(subjects),
            notes: g.notes.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_skips_missing_and_keeps_first_tie() {
        let t = [0.0, 0.1, 0.2, 0.3];
        let p = peak(&t, [Some(1.0), None, Some(3.0), Some(3.0)]).unwrap();
        assert_eq!(p, Peak { value: 3.0, time_s: 0.2 });
        assert!(peak(&t, [None, None, Some(f64::NAN), None]).is_none());
    }

    #[test]
    fn empty_report_serializes() {
        let r = build_report(7, "abc", &[], None);
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"seed\":7"));
        assert_eq!(r.rejection_summary, "");
    }
}
