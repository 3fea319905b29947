//! Contralateral / ipsilateral ERPs and difference waves.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Condition, EpochSet};
use crate::error::{Error, Result};

const MERIDIAN_EPS: f64 = 1e-9;

/// Visual hemifield of a target. Angles are counter-clockwise from the
/// rightward horizontal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemifield {
    Left,
    Right,
    Midline,
}

impl Hemifield {
    pub fn opposite(self) -> Self {
        match self {
            Self::Left => Self::Right,
            Self::Right => Self::Left,
            Self::Midline => Self::Midline,
        }
    }
}

pub fn hemifield_of(angle_deg: f64) -> Hemifield {
    let c = angle_deg.to_radians().cos();
    if c > MERIDIAN_EPS {
        Hemifield::Right
    } else if c < -MERIDIAN_EPS {
        Hemifield::Left
    } else {
        Hemifield::Midline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWaves {
    pub pair: (String, String),
    pub contra: Vec<f64>,
    pub ipsi: Vec<f64>,
    pub diff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionErp {
    pub n_trials: usize,
    /// Averaged across pairs.
    pub contra: Vec<f64>,
    pub ipsi: Vec<f64>,
    pub diff: Vec<f64>,
    pub per_pair: Vec<PairWaves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErpResult {
    pub time_s: Vec<f64>,
    pub conditions: BTreeMap<Condition, ConditionErp>,
}

/// Trial-averaged waveforms for each condition. `hemifields` overrides the
/// per-trial hemifield (one entry per trial); `None` derives it from the
/// target angle.
pub fn average_erp_with<S: AsRef<str>>(
    ep: &EpochSet,
    pairs: &[(S, S)],
    hemifields: Option<&[Hemifield]>,
) -> Result<ErpResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no electrode pairs".into()));
    }
    let idx: Vec<(usize, usize)> = pairs
        .iter()
        .map(|(l, r)| Ok((ep.layout.index_of(l.as_ref())?, ep.layout.index_of(r.as_ref())?)))
        .collect::<Result<_>>()?;
    let fields: Vec<Hemifield> = match hemifields {
        Some(h) if h.len() == ep.n_trials() => h.to_vec(),
        Some(h) => {
            return Err(Error::InvalidInput(format!(
                "{} hemifield labels for {} trials",
                h.len(),
                ep.n_trials()
            )))
        }
        None => ep.meta.iter().map(|e| hemifield_of(e.angle_deg)).collect(),
    };

    let n_s = ep.n_samples();
    let mut conditions = BTreeMap::new();
    for cond in ep.conditions() {
        let trials: Vec<usize> = ep
            .trials_of(cond)
            .into_iter()
            .filter(|&i| fields[i] != Hemifield::Midline)
            .collect();
        if trials.is_empty() {
            return Err(Error::InsufficientTrials {
                group: format!("{cond} lateral trials"),
                count: 0,
                required: 1,
            });
        }
        let n = trials.len() as f64;
        let mut per_pair = Vec::with_capacity(idx.len());
        for (p, &(li, ri)) in idx.iter().enumerate() {
            let mut contra = Array1::<f64>::zeros(n_s);
            let mut ipsi = Array1::<f64>::zeros(n_s);
            for &t in &trials {
                let trial = ep.data.index_axis(Axis(0), t);
                let (c, i) = match fields[t] {
                    Hemifield::Left => (ri, li),
                    _ => (li, ri),
                };
                contra += &trial.row(c);
                ipsi += &trial.row(i);
            }
            contra /= n;
            ipsi /= n;
            let diff = &contra - &ipsi;
            per_pair.push(PairWaves {
                pair: (pairs[p].0.as_ref().to_string(), pairs[p].1.as_ref().to_string()),
                contra: contra.to_vec(),
                ipsi: ipsi.to_vec(),
                diff: diff.to_vec(),
            });
        }
        let np = per_pair.len() as f64;
        let avg = |f: fn(&PairWaves) -> &Vec<f64>| -> Vec<f64> {
            (0..n_s)
                .map(|s| per_pair.iter().map(|w| f(w)[s]).sum::<f64>() / np)
                .collect()
        };
        let contra = avg(|w| &w.contra);
        let ipsi = avg(|w| &w.ipsi);
        let diff = contra.iter().zip(&ipsi).map(|(c, i)| c - i).collect();
        conditions.insert(
            cond,
            ConditionErp {
                n_trials: trials.len(),
                contra,
                ipsi,
                diff,
                per_pair,
            },
        );
    }
    Ok(ErpResult {
        time_s: ep.time_axis(),
        conditions,
    })
}

pub fn average_erp<S: AsRef<str>>(ep: &EpochSet, pairs: &[(S, S)]) -> Result<ErpResult> {
    average_erp_with(ep, pairs, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowAmplitude {
    pub contra: f64,
    pub ipsi: f64,
    pub diff: f64,
}

/// Mean amplitude of the pair-averaged waveforms over `[start, end]`
/// (inclusive, seconds).
pub fn mean_amplitude(erp: &ErpResult, window_s: (f64, f64)) -> Result<BTreeMap<Condition, WindowAmplitude>> {
    let (start, end) = window_s;
    let (first, last) = match (erp.time_s.first(), erp.time_s.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::InvalidInput("empty time axis".into())),
    };
    let tol = 1e-9;
    if !(start <= end) || start < first - tol || end > last + tol {
        return Err(Error::InvalidInput(format!(
            "window ({start}, {end}) outside epoch ({first}, {last})"
        )));
    }
    let sel: Vec<usize> = erp
        .time_s
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= start - tol && t <= end + tol)
        .map(|(i, _)| i)
        .collect();
    if sel.is_empty() {
        return Err(Error::InvalidInput(format!("window ({start}, {end}) holds no samples")));
    }
    let mean = |v: &[f64]| sel.iter().map(|&i| v[i]).sum::<f64>() / sel.len() as f64;
    Ok(erp
        .conditions
        .iter()
        .map(|(c, w)| {
            (
                *c,
                WindowAmplitude {
                    contra: mean(&w.contra),
                    ipsi: mean(&w.ipsi),
                    diff: mean(&w.diff),
                },
            )
        })
        .collect())
}

/// `time_s,condition,pair,contra_uv,ipsi_uv,diff_uv`; pair "mean" is the
/// pair average.
pub fn write_erp_csv(erp: &ErpResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time_s", "condition", "pair", "contra_uv", "ipsi_uv", "diff_uv"])
        .map_err(|e| csv_err(path, e))?;
    for (cond, c) in &erp.conditions {
        let mut rows: Vec<(String, &Vec<f64>, &Vec<f64>, &Vec<f64>)> = c
            .per_pair
            .iter()
            .map(|p| (format!("{}/{}", p.pair.0, p.pair.1), &p.contra, &p.ipsi, &p.diff))
            .collect();
        rows.push(("mean".into(), &c.contra, &c.ipsi, &c.diff));
        for (name, contra, ipsi, diff) in rows {
            for (i, t) in erp.time_s.iter().enumerate() {
                w.write_record(&[
                    format!("{t:.6}"),
                    cond.to_string(),
                    name.clone(),
                    contra[i].to_string(),
                    ipsi[i].to_string(),
                    diff[i].to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}
