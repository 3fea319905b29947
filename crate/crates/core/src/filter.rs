//! Butterworth IIR design (bilinear transform with frequency pre-warping)
//! and causal / zero-phase application as cascaded second-order sections.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1, Axis, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandKind {
    LowPass(f64),
    HighPass(f64),
    BandPass(f64, f64),
}

/// One section: `b0 b1 b2` over `1 a1 a2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form II state for a unit step at steady state.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xn = *v;
            let y = b0 * xn + z[0];
            z[0] = b1 * xn - a1 * y + z[1];
            z[1] = b2 * xn - a2 * y;
            *v = y;
        }
    }

    fn pole_magnitude(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        let p1 = (-a1 + disc) / 2.0;
        let p2 = (-a1 - disc) / 2.0;
        p1.norm().max(p2.norm())
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

/// Design an `order`-th order digital Butterworth filter. A band-pass of
/// order N has 2N poles.
pub fn butterworth(order: usize, kind: BandKind, rate_hz: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("filter order must be at least 1".into()));
    }
    let nyquist = rate_hz / 2.0;
    let check = |f: f64| {
        if !(f > 0.0 && f < nyquist) {
            Err(Error::Config(format!(
                "cutoff {f} Hz must lie in (0, {nyquist}) Hz"
            )))
        } else {
            Ok(())
        }
    };
    let warp = |f: f64| 2.0 * rate_hz * (PI * f / rate_hz).tan();

    // Analog prototype: unit cutoff, no zeros.
    let n = order as i64;
    let proto: Vec<Complex64> = (0..n)
        .map(|k| {
            let m = (-n + 1 + 2 * k) as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * order as f64))
        })
        .collect();

    let (zeros, poles, gain) = match kind {
        BandKind::LowPass(fc) => {
            check(fc)?;
            let wo = warp(fc);
            let p: Vec<_> = proto.iter().map(|p| p * wo).collect();
            (Vec::new(), p, wo.powi(order as i32))
        }
        BandKind::HighPass(fc) => {
            check(fc)?;
            let wo = warp(fc);
            let p: Vec<_> = proto.iter().map(|p| wo / p).collect();
            let prod: Complex64 = proto.iter().map(|p| -p).product();
            (vec![Complex64::new(0.0, 0.0); order], p, (1.0 / prod).re)
        }
        BandKind::BandPass(lo, hi) => {
            check(lo)?;
            check(hi)?;
            if lo >= hi {
                return Err(Error::Config(format!(
                    "band edges must satisfy low < high, got {lo} >= {hi}"
                )));
            }
            let (wl, wh) = (warp(lo), warp(hi));
            let bw = wh - wl;
            let wo2 = wl * wh;
            let mut p = Vec::with_capacity(2 * order);
            for q in &proto {
                let s = q * (bw / 2.0);
                let r = (s * s - wo2).sqrt();
                p.push(s + r);
                p.push(s - r);
            }
            (vec![Complex64::new(0.0, 0.0); order], p, bw.powi(order as i32))
        }
    };

    // Bilinear transform; zeros at infinity land on z = -1.
    let fs2 = 2.0 * rate_hz;
    let map = |s: &Complex64| (fs2 + s) / (fs2 - s);
    let num: Complex64 = zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    let k = gain * (num / den).re;
    let mut dz: Vec<f64> = zeros.iter().map(|z| map(z).re).collect();
    dz.extend(std::iter::repeat_n(-1.0, poles.len() - zeros.len()));
    let dp: Vec<Complex64> = poles.iter().map(map).collect();

    let sos = zpk_to_sos(&dz, &dp, k);
    let worst = sos.max_pole_magnitude();
    if worst >= 1.0 {
        return Err(Error::UnstableFilter(worst));
    }
    Ok(sos)
}

fn zpk_to_sos(zeros: &[f64], poles: &[Complex64], k: f64) -> Sos {
    const IM_TOL: f64 = 1e-10;
    let mut pole_groups: Vec<Vec<Complex64>> = Vec::new();
    let mut reals: Vec<f64> = Vec::new();
    for p in poles {
        if p.im > IM_TOL {
            pole_groups.push(vec![*p, p.conj()]);
        } else if p.im.abs() <= IM_TOL {
            reals.push(p.re);
        }
    }
    reals.sort_by(|a, b| a.total_cmp(b));
    for chunk in reals.chunks(2) {
        pole_groups.push(chunk.iter().map(|&r| Complex64::new(r, 0.0)).collect());
    }

    // Alternate zeros at +1 and -1 so each band-pass section gets one of each.
    let (mut pos, mut neg): (Vec<f64>, Vec<f64>) = zeros.iter().partition(|&&z| z >= 0.0);
    let mut queue = Vec::with_capacity(zeros.len());
    while !pos.is_empty() || !neg.is_empty() {
        if let Some(z) = pos.pop() {
            queue.push(z);
        }
        if let Some(z) = neg.pop() {
            queue.push(z);
        }
    }
    let mut queue = queue.into_iter();

    let sections = pole_groups
        .iter()
        .enumerate()
        .map(|(i, ps)| {
            let zs: Vec<f64> = queue.by_ref().take(ps.len()).collect();
            let mut b = [1.0, 0.0, 0.0];
            for (j, &z) in zs.iter().enumerate() {
                // multiply by (1 - z q^-1)
                for m in (1..=j + 1).rev() {
                    b[m] -= z * b[m - 1];
                }
            }
            let a = if ps.len() == 2 {
                let (p1, p2) = (ps[0], ps[1]);
                [-(p1 + p2).re, (p1 * p2).re]
            } else {
                [-ps[0].re, 0.0]
            };
            if i == 0 {
                b.iter_mut().for_each(|v| *v *= k);
            }
            Biquad { b, a }
        })
        .collect();
    Sos { sections }
}

/// Number of padding samples used by [`butterworth_bandpass`]: four cycles
/// of the lower band edge (125 samples for 8 Hz at 250 Hz).
pub fn default_padlen(rate_hz: f64, low_hz: f64) -> usize {
    (4.0 * rate_hz / low_hz).round() as usize
}

impl Sos {
    pub fn max_pole_magnitude(&self) -> f64 {
        self.sections
            .iter()
            .map(Biquad::pole_magnitude)
            .fold(0.0, f64::max)
    }

    /// Complex frequency response at `f_hz`.
    pub fn response(&self, f_hz: f64, rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / rate_hz;
        let zi = Complex64::from_polar(1.0, -w);
        let zi2 = zi * zi;
        self.sections
            .iter()
            .map(|s| {
                (s.b[0] + s.b[1] * zi + s.b[2] * zi2) / (1.0 + s.a[0] * zi + s.a[1] * zi2)
            })
            .product()
    }

    /// Causal filtering from rest.
    pub fn filter(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x, [0.0; 2]);
        }
    }

    /// Causal filtering starting from the steady state of a constant input
    /// equal to `x[0]`.
    fn filter_steady(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut scale = x0;
        for s in &self.sections {
            let [z1, z2] = s.step_state();
            s.run(x, [z1 * scale, z2 * scale]);
            scale *= s.dc_gain();
        }
    }

    /// Zero-phase forward-backward filtering with odd reflection padding of
    /// `padlen` samples per side (clamped to `len - 1`). The effective
    /// magnitude response is `|H|^2`.
    pub fn filtfilt(&self, x: ArrayView1<f64>, padlen: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = padlen.min(n - 1);
        let (first, last) = (x[0], x[n - 1]);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend(x.iter().copied());
        ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

        self.filter_steady(&mut ext);
        ext.reverse();
        self.filter_steady(&mut ext);
        ext.reverse();
        ext.drain(..pad);
        ext.truncate(n);
        ext
    }
}

/// Band-pass every row of `x` (channels x samples).
pub fn butterworth_bandpass(
    x: &Array2<f64>,
    low_hz: f64,
    high_hz: f64,
    order: usize,
    rate_hz: f64,
    zero_phase: bool,
) -> Result<Array2<f64>> {
    let sos = butterworth(order, BandKind::BandPass(low_hz, high_hz), rate_hz)?;
    Ok(apply_rows(&sos, x, zero_phase, default_padlen(rate_hz, low_hz)))
}

/// Apply `sos` to each row of `x`.
pub fn apply_rows(sos: &Sos, x: &Array2<f64>, zero_phase: bool, padlen: usize) -> Array2<f64> {
    let mut out = x.clone();
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut o, row| {
            if zero_phase {
                let y = sos.filtfilt(row, padlen);
                o.iter_mut().zip(y).for_each(|(d, v)| *d = v);
            } else {
                let mut y = row.to_vec();
                sos.filter(&mut y);
                o.iter_mut().zip(y).for_each(|(d, v)| *d = v);
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    /// Closed-form Butterworth band-pass magnitude on the pre-warped axis.
    fn analytic_bandpass_mag(f: f64, lo: f64, hi: f64, order: i32, fs: f64) -> f64 {
        let w = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (om, wl, wh) = (w(f), w(lo), w(hi));
        let r = (om * om - wl * wh) / (om * (wh - wl));
        1.0 / (1.0 + r.powi(2 * order)).sqrt()
    }

    fn analytic_lowpass_mag(f: f64, fc: f64, order: i32, fs: f64) -> f64 {
        let w = |f: f64| (PI * f / fs).tan();
        1.0 / (1.0 + (w(f) / w(fc)).powi(2 * order)).sqrt()
    }

    fn analytic_highpass_mag(f: f64, fc: f64, order: i32, fs: f64) -> f64 {
        let w = |f: f64| (PI * f / fs).tan();
        1.0 / (1.0 + (w(fc) / w(f)).powi(2 * order)).sqrt()
    }

    #[test]
    fn design_matches_closed_form_magnitude() {
        let fs = 250.0;
        let bp = butterworth(3, BandKind::BandPass(8.0, 12.0), fs).unwrap();
        assert_eq!(bp.sections.len(), 3);
        let lp = butterworth(3, BandKind::LowPass(30.0), fs).unwrap();
        let hp = butterworth(3, BandKind::HighPass(0.1), fs).unwrap();
        for f in [0.5, 2.0, 5.0, 8.0, 9.5, 10.0, 12.0, 20.0, 30.0, 60.0, 110.0] {
            let got = bp.response(f, fs).norm();
            assert!((got - analytic_bandpass_mag(f, 8.0, 12.0, 3, fs)).abs() < 1e-9, "bp {f}");
            let got = lp.response(f, fs).norm();
            assert!((got - analytic_lowpass_mag(f, 30.0, 3, fs)).abs() < 1e-9, "lp {f}");
            let got = hp.response(f, fs).norm();
            assert!((got - analytic_highpass_mag(f, 0.1, 3, fs)).abs() < 1e-9, "hp {f}");
        }
        // -3 dB at the band edges
        assert!((bp.response(8.0, fs).norm() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((bp.response(12.0, fs).norm() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn even_and_odd_orders_are_stable() {
        for order in 1..=8 {
            let s = butterworth(order, BandKind::LowPass(100.0), 1000.0).unwrap();
            assert!(s.max_pole_magnitude() < 1.0);
            assert!((s.response(0.0, 1000.0).norm() - 1.0).abs() < 1e-9);
            let s = butterworth(order, BandKind::BandPass(8.0, 12.0), 250.0).unwrap();
            assert!(s.max_pole_magnitude() < 1.0);
        }
    }

    #[test]
    fn invalid_bands_rejected() {
        assert!(butterworth(3, BandKind::BandPass(12.0, 8.0), 250.0).is_err());
        assert!(butterworth(3, BandKind::BandPass(8.0, 125.0), 250.0).is_err());
        assert!(butterworth(0, BandKind::LowPass(10.0), 250.0).is_err());
        assert!(butterworth(3, BandKind::HighPass(0.0), 250.0).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let x = Array2::zeros((3, 500));
        let y = butterworth_bandpass(&x, 8.0, 12.0, 3, 250.0, true).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y = butterworth_bandpass(&x, 8.0, 12.0, 3, 250.0, false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn padlen_for_alpha_at_250hz() {
        assert_eq!(default_padlen(250.0, 8.0), 125);
    }

    #[test]
    fn zero_phase_has_no_group_delay() {
        // 10 Hz burst under a Gaussian envelope; the cross-correlation peak
        // between input and output must sit at lag 0 +/- 1.
        let fs = 250.0;
        let n = 1000;
        let x: Array1<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                (-(t - 2.0).powi(2) / (2.0 * 0.15f64.powi(2))).exp() * (2.0 * PI * 10.0 * t).sin()
            })
            .collect();
        let sos = butterworth(3, BandKind::BandPass(8.0, 12.0), fs).unwrap();
        let y = sos.filtfilt(x.view(), 125);
        let xcorr = |lag: isize| -> f64 {
            (0..n as isize)
                .filter_map(|i| {
                    let j = i + lag;
                    (j >= 0 && j < n as isize).then(|| x[i as usize] * y[j as usize])
                })
                .sum()
        };
        let best = (-20..=20).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
        assert!(best.abs() <= 1, "peak at lag {best}");
    }

    #[test]
    fn constant_input_passes_lowpass_unchanged() {
        let sos = butterworth(3, BandKind::LowPass(30.0), 250.0).unwrap();
        let x = Array1::from_elem(400, 7.5);
        let y = sos.filtfilt(x.view(), 50);
        assert!(y.iter().all(|v| (v - 7.5).abs() < 1e-9));
    }
}
