//! Electrode montage: labels, unit-sphere positions, hemisphere tags and
//! homologous left/right pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels the lateralization and ERP analyses read by name.
pub const ANALYSIS_CHANNELS: [&str; 8] = ["PO3", "PO7", "O1", "PO4", "PO8", "O2", "P7", "P8"];

/// Left and right alpha lateralization ROIs.
pub const LEFT_ROI: [&str; 3] = ["PO3", "PO7", "O1"];
pub const RIGHT_ROI: [&str; 3] = ["PO4", "PO8", "O2"];

/// Electrode pairs used for lateralized ERPs.
pub const ERP_PAIRS: [(&str, &str); 2] = [("PO7", "PO8"), ("P7", "P8")];

pub const MASTOIDS: [&str; 2] = ["M1", "M2"];
pub const EOG_CHANNELS: [&str; 2] = ["Fp1", "Fp2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
    Midline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct ElectrodeLayout {
    labels: Vec<String>,
    positions: Vec<[f64; 3]>,
    hemispheres: Vec<Hemisphere>,
    pairs: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    labels: Vec<String>,
    positions: Vec<[f64; 3]>,
    hemispheres: Vec<Hemisphere>,
    pairs: Vec<(String, String)>,
}

impl TryFrom<LayoutRepr> for ElectrodeLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        ElectrodeLayout::new(r.labels, r.positions, r.hemispheres, r.pairs)
    }
}

impl From<ElectrodeLayout> for LayoutRepr {
    fn from(l: ElectrodeLayout) -> Self {
        LayoutRepr {
            labels: l.labels,
            positions: l.positions,
            hemispheres: l.hemispheres,
            pairs: l.pairs,
        }
    }
}

impl ElectrodeLayout {
    pub fn new(
        labels: Vec<String>,
        positions: Vec<[f64; 3]>,
        hemispheres: Vec<Hemisphere>,
        pairs: Vec<(String, String)>,
    ) -> Result<Self> {
        if labels.len() != positions.len() || labels.len() != hemispheres.len() {
            return Err(Error::Layout(format!(
                "{} labels, {} positions, {} hemisphere tags",
                labels.len(),
                positions.len(),
                hemispheres.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Layout(format!("duplicate label {label}")));
            }
            let p = positions[i];
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Layout(format!(
                    "position of {label} has norm {norm}, expected 1"
                )));
            }
        }
        for (l, r) in &pairs {
            let li = *index
                .get(l)
                .ok_or_else(|| Error::Layout(format!("pair references unknown label {l}")))?;
            let ri = *index
                .get(r)
                .ok_or_else(|| Error::Layout(format!("pair references unknown label {r}")))?;
            if hemispheres[li] != Hemisphere::Left || hemispheres[ri] != Hemisphere::Right {
                return Err(Error::Layout(format!(
                    "pair ({l}, {r}) must be (left, right)"
                )));
            }
        }
        Ok(Self {
            labels,
            positions,
            hemispheres,
            pairs,
            index,
        })
    }

    /// Bundled 64-channel 10-20 montage (including both mastoids).
    pub fn standard_64() -> Self {
        let mut labels = Vec::with_capacity(64);
        let mut positions = Vec::with_capacity(64);
        let mut hemispheres = Vec::with_capacity(64);
        let mut pairs = Vec::new();

        let mut push = |label: &str, pos: [f64; 3]| {
            labels.push(label.to_string());
            positions.push(pos);
            hemispheres.push(hemisphere_from_label(label));
        };

        for &(label, theta, phi) in MIDLINE {
            push(label, sph(theta, phi));
        }
        for &(label, pos) in &left_positions() {
            let right = mirror_label(label);
            push(label, pos);
            push(&right, [-pos[0], pos[1], pos[2]]);
            pairs.push((label.to_string(), right));
        }

        Self::new(labels, positions, hemispheres, pairs).expect("bundled montage is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn hemispheres(&self) -> &[Hemisphere] {
        &self.hemispheres
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.get(label)
            .ok_or_else(|| Error::UnknownChannel(label.to_string()))
    }

    pub fn indices_of<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.index_of(l.as_ref())).collect()
    }

    /// Fails unless every channel read by name in the lateralization and
    /// ERP analyses is present.
    pub fn require_analysis_channels(&self) -> Result<()> {
        for label in ANALYSIS_CHANNELS {
            if self.get(label).is_none() {
                return Err(Error::Layout(format!("missing analysis channel {label}")));
            }
        }
        Ok(())
    }

    /// Parietal, parieto-occipital and occipital channels.
    pub fn posterior_labels(&self) -> Vec<String> {
        self.labels
            .iter()
            .filter(|l| is_posterior(l))
            .cloned()
            .collect()
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.positions[a], self.positions[b]);
        let dot = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
        dot.clamp(-1.0, 1.0).acos()
    }

    /// Layout restricted to `labels`, in the given order. Pairs survive only
    /// when both members are kept.
    pub fn subset<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let idx = self.indices_of(labels)?;
        let keep: Vec<String> = idx.iter().map(|&i| self.labels[i].clone()).collect();
        let pairs = self
            .pairs
            .iter()
            .filter(|(l, r)| keep.contains(l) && keep.contains(r))
            .cloned()
            .collect();
        Self::new(
            keep,
            idx.iter().map(|&i| self.positions[i]).collect(),
            idx.iter().map(|&i| self.hemispheres[i]).collect(),
            pairs,
        )
    }
}

pub fn is_posterior(label: &str) -> bool {
    label.starts_with('P') || label.starts_with('O')
}

/// Odd trailing digit is left, even is right, `z` is midline.
pub fn hemisphere_from_label(label: &str) -> Hemisphere {
    match label.chars().last().and_then(|c| c.to_digit(10)) {
        Some(d) if d % 2 == 1 => Hemisphere::Left,
        Some(_) => Hemisphere::Right,
        None => Hemisphere::Midline,
    }
}

fn mirror_label(label: &str) -> String {
    let split = label.find(|c: char| c.is_ascii_digit()).unwrap();
    let n: u32 = label[split..].parse().unwrap();
    format!("{}{}", &label[..split], n + 1)
}

/// Unit vector from polar angle (from vertex) and azimuth (from the right
/// ear towards the nose), both in degrees. x = right, y = anterior, z = up.
fn sph(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
}

fn nlerp(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    let v = [
        (1.0 - f) * a[0] + f * b[0],
        (1.0 - f) * a[1] + f * b[1],
        (1.0 - f) * a[2] + f * b[2],
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

const MIDLINE: &[(&str, f64, f64)] = &[
    ("Fpz", 72.0, 90.0),
    ("AFz", 54.0, 90.0),
    ("Fz", 36.0, 90.0),
    ("FCz", 18.0, 90.0),
    ("Cz", 0.0, 0.0),
    ("CPz", 18.0, 270.0),
    ("Pz", 36.0, 270.0),
    ("POz", 54.0, 270.0),
    ("Oz", 72.0, 270.0),
    ("Iz", 90.0, 270.0),
];

// Left-hemisphere positions; right-hemisphere homologues are mirrored in x.
// Rows interpolate from the midline electrode to the 10%-ring electrode
// in quarter steps (1, 3, 5 -> 1/4, 2/4, 3/4).
fn left_positions() -> Vec<(&'static str, [f64; 3])> {
    let ring = |phi: f64| sph(72.0, phi);
    let mid = |name: &str| {
        let &(_, t, p) = MIDLINE.iter().find(|(l, _, _)| *l == name).unwrap();
        sph(t, p)
    };
    let row = |midline: &str, edge_phi: f64, f: f64| nlerp(mid(midline), ring(edge_phi), f);

    vec![
        ("Fp1", ring(108.0)),
        ("AF7", ring(126.0)),
        ("AF3", row("AFz", 126.0, 0.5)),
        ("F7", ring(144.0)),
        ("F5", row("Fz", 144.0, 0.75)),
        ("F3", row("Fz", 144.0, 0.5)),
        ("F1", row("Fz", 144.0, 0.25)),
        ("FT7", ring(162.0)),
        ("FC5", row("FCz", 162.0, 0.75)),
        ("FC3", row("FCz", 162.0, 0.5)),
        ("FC1", row("FCz", 162.0, 0.25)),
        ("T7", ring(180.0)),
        ("C5", row("Cz", 180.0, 0.75)),
        ("C3", row("Cz", 180.0, 0.5)),
        ("C1", row("Cz", 180.0, 0.25)),
        ("TP7", ring(198.0)),
        ("CP5", row("CPz", 198.0, 0.75)),
        ("CP3", row("CPz", 198.0, 0.5)),
        ("CP1", row("CPz", 198.0, 0.25)),
        ("P7", ring(216.0)),
        ("P5", row("Pz", 216.0, 0.75)),
        ("P3", row("Pz", 216.0, 0.5)),
        ("P1", row("Pz", 216.0, 0.25)),
        ("PO7", ring(234.0)),
        ("PO3", row("POz", 234.0, 0.5)),
        ("O1", ring(252.0)),
        ("M1", sph(115.0, 210.0)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_montage_invariants() {
        let l = ElectrodeLayout::standard_64();
        assert_eq!(l.len(), 64);
        l.require_analysis_channels().unwrap();
        for p in l.positions() {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        for (a, b) in l.pairs() {
            let (ia, ib) = (l.index_of(a).unwrap(), l.index_of(b).unwrap());
            assert_eq!(l.hemispheres()[ia], Hemisphere::Left);
            assert_eq!(l.hemispheres()[ib], Hemisphere::Right);
            assert!(l.positions()[ia][0] < 0.0 && l.positions()[ib][0] > 0.0);
        }
        assert!(l.pairs().contains(&("PO7".into(), "PO8".into())));
        assert!(l.get("M1").is_some() && l.get("M2").is_some());
    }

    #[test]
    fn posterior_selection() {
        let l = ElectrodeLayout::standard_64();
        let post = l.posterior_labels();
        assert_eq!(post.len(), 17);
        assert!(post.iter().all(|s| !s.starts_with("CP") && !s.starts_with("TP")));
        let sub = l.subset(&post).unwrap();
        sub.require_analysis_channels().unwrap();
        assert!(sub.pairs().contains(&("P7".into(), "P8".into())));
    }

    #[test]
    fn rejects_duplicates_and_bad_pairs() {
        let p = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let h = vec![Hemisphere::Left, Hemisphere::Right];
        let dup = ElectrodeLayout::new(vec!["A1".into(), "A1".into()], p.clone(), h.clone(), vec![]);
        assert!(dup.is_err());
        let flipped = ElectrodeLayout::new(
            vec!["A1".into(), "A2".into()],
            p.clone(),
            h.clone(),
            vec![("A2".into(), "A1".into())],
        );
        assert!(flipped.is_err());
        let off_sphere = ElectrodeLayout::new(
            vec!["A1".into(), "A2".into()],
            vec![[0.0, 0.0, 1.1], [1.0, 0.0, 0.0]],
            h,
            vec![],
        );
        assert!(off_sphere.is_err());
    }

    #[test]
    fn serde_roundtrip() {
        let l = ElectrodeLayout::standard_64();
        let s = serde_json::to_string(&l).unwrap();
        let back: ElectrodeLayout = serde_json::from_str(&s).unwrap();
        assert_eq!(l, back);
    }
}
