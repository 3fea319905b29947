//! Alpha lateralization index over posterior regions of interest.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{BandPowerSet, Condition};
use crate::erp::{csv_err, hemifield_of, Hemifield};
use crate::error::{Error, Result};
use crate::layout::{LEFT_ROI, RIGHT_ROI};
use crate::rng::{rng_for, Stream};

/// Mean power across `roi` channels, trials x samples.
pub fn roi_power<S: AsRef<str>>(bp: &BandPowerSet, roi: &[S]) -> Result<Array2<f64>> {
    if roi.is_empty() {
        return Err(Error::InvalidInput("empty ROI".into()));
    }
    let idx = bp.layout.indices_of(roi)?;
    Ok(bp.data.select(Axis(1), &idx).mean_axis(Axis(1)).unwrap())
}

/// `(ipsi - contra) / (ipsi + contra)`; `None` when both are zero.
pub fn lateralization_index(ipsi: f64, contra: f64) -> Option<f64> {
    let total = ipsi + contra;
    if total == 0.0 {
        None
    } else {
        Some((ipsi - contra) / total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionLateralization {
    pub n_trials: usize,
    pub ipsi: Vec<f64>,
    pub contra: Vec<f64>,
    pub index: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralizationTimecourse {
    pub time_s: Vec<f64>,
    pub roi_left: Vec<String>,
    pub roi_right: Vec<String>,
    pub conditions: BTreeMap<Condition, ConditionLateralization>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rois {
    pub left: Vec<String>,
    pub right: Vec<String>,
}

impl Default for Rois {
    fn default() -> Self {
        Self {
            left: LEFT_ROI.iter().map(|s| s.to_string()).collect(),
            right: RIGHT_ROI.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Trial-averaged ipsi/contra ROI power per condition, then the index at
/// every sample. Midline trials are excluded.
pub fn lateralization_timecourse(bp: &BandPowerSet) -> Result<LateralizationTimecourse> {
    lateralization_timecourse_with(bp, &Rois::default(), None)
}

/// As [`lateralization_timecourse`] with explicit ROIs and optional
/// per-trial hemifield labels.
pub fn lateralization_timecourse_with(
    bp: &BandPowerSet,
    rois: &Rois,
    hemifields: Option<&[Hemifield]>,
) -> Result<LateralizationTimecourse> {
    let left = roi_power(bp, &rois.left)?;
    let right = roi_power(bp, &rois.right)?;
    let fields: Vec<Hemifield> = match hemifields {
        Some(h) if h.len() == bp.n_trials() => h.to_vec(),
        Some(h) => {
            return Err(Error::InvalidInput(format!(
                "{} hemifield labels for {} trials",
                h.len(),
                bp.n_trials()
            )))
        }
        None => bp.meta.iter().map(|e| hemifield_of(e.angle_deg)).collect(),
    };
    let mut conditions = BTreeMap::new();
    for cond in bp.conditions() {
        let c = condition_lateralization(&left, &right, &fields, &bp.trials_of(cond));
        if c.n_trials > 0 {
            conditions.insert(cond, c);
        }
    }
    if conditions.is_empty() {
        return Err(Error::InsufficientTrials {
            group: "lateral trials".into(),
            count: 0,
            required: 1,
        });
    }
    Ok(LateralizationTimecourse {
        time_s: bp.time_axis(),
        roi_left: rois.left.clone(),
        roi_right: rois.right.clone(),
        conditions,
    })
}

fn condition_lateralization(
    left: &Array2<f64>,
    right: &Array2<f64>,
    fields: &[Hemifield],
    trials: &[usize],
) -> ConditionLateralization {
    let n_s = left.ncols();
    let mut ipsi = vec![0.0; n_s];
    let mut contra = vec![0.0; n_s];
    let mut n = 0usize;
    for &t in trials {
        let (i_row, c_row) = match fields[t] {
            Hemifield::Left => (left.row(t), right.row(t)),
            Hemifield::Right => (right.row(t), left.row(t)),
            Hemifield::Midline => continue,
        };
        n += 1;
        for s in 0..n_s {
            ipsi[s] += i_row[s];
            contra[s] += c_row[s];
        }
    }
    if n > 0 {
        ipsi.iter_mut().chain(contra.iter_mut()).for_each(|v| *v /= n as f64);
    }
    let index = ipsi
        .iter()
        .zip(&contra)
        .map(|(&i, &c)| if n == 0 { None } else { lateralization_index(i, c) })
        .collect();
    ConditionLateralization {
        n_trials: n,
        ipsi,
        contra,
        index,
    }
}

/// Index timecourses with the lateral trials' hemifield labels shuffled
/// within each condition. Returns condition -> permutation x time.
pub fn hemifield_null(
    bp: &BandPowerSet,
    rois: &Rois,
    n_perm: usize,
    seed: u64,
) -> Result<BTreeMap<Condition, Vec<Vec<Option<f64>>>>> {
    let left = roi_power(bp, &rois.left)?;
    let right = roi_power(bp, &rois.right)?;
    let fields: Vec<Hemifield> = bp.meta.iter().map(|e| hemifield_of(e.angle_deg)).collect();
    let mut out = BTreeMap::new();
    for cond in bp.conditions() {
        let trials: Vec<usize> = bp
            .trials_of(cond)
            .into_iter()
            .filter(|&t| fields[t] != Hemifield::Midline)
            .collect();
        if trials.is_empty() {
            continue;
        }
        let perms = (0..n_perm)
            .map(|p| {
                let mut labels: Vec<Hemifield> = trials.iter().map(|&t| fields[t]).collect();
                let mut rng = rng_for(seed, Stream::Permutation, &[cond.index() as u64, p as u64]);
                labels.shuffle(&mut rng);
                let mut shuffled = fields.clone();
                for (&t, h) in trials.iter().zip(labels) {
                    shuffled[t] = h;
                }
                condition_lateralization(&left, &right, &shuffled, &trials).index
            })
            .collect();
        out.insert(cond, perms);
    }
    Ok(out)
}

/// `time_s,condition,index,n_trials`; undefined index values are empty.
pub fn write_lateralization_csv(lat: &LateralizationTimecourse, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time_s", "condition", "index", "n_trials"])
        .map_err(|e| csv_err(path, e))?;
    for (cond, c) in &lat.conditions {
        for (t, idx) in lat.time_s.iter().zip(&c.index) {
            w.write_record(&[
                format!("{t:.6}"),
                cond.to_string(),
                idx.map(|v| v.to_string()).unwrap_or_default(),
                c.n_trials.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
