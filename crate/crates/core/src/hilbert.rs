//! Analytic signal via the frequency domain and instantaneous power.

use std::sync::Arc;

use ndarray::{Array3, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dataset::{BandPowerSet, EpochSet};
use crate::error::{Error, Result};

pub const MIN_LEN: usize = 8;

/// Reusable plan for analytic signals of one length.
pub struct AnalyticPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl AnalyticPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len < MIN_LEN {
            return Err(Error::EpochTooShort(len));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    /// Zero negative frequencies, double positive ones, keep DC (and Nyquist
    /// for even lengths) once.
    pub fn analytic(&self, x: &[f64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.len);
        let n = self.len;
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        let half = n / 2;
        let positive_end = if n % 2 == 0 { half } else { half + 1 };
        for (k, v) in buf.iter_mut().enumerate() {
            if k == 0 || (n % 2 == 0 && k == half) {
                continue;
            } else if k < positive_end {
                *v *= 2.0;
            } else {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
        buf
    }

    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        self.analytic(x).iter().map(|z| z.norm_sqr()).collect()
    }
}

pub fn analytic_signal(x: &[f64]) -> Result<Vec<Complex64>> {
    Ok(AnalyticPlan::new(x.len())?.analytic(x))
}

/// Instantaneous power (squared analytic amplitude) of every epoch and
/// channel. The input is expected to be band-limited already.
pub fn hilbert_power(epochs: &EpochSet) -> Result<BandPowerSet> {
    let plan = AnalyticPlan::new(epochs.n_samples())?;
    let mut out = Array3::zeros(epochs.data.raw_dim());
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(epochs.data.axis_iter(Axis(0)))
        .par_for_each(|mut o, trial| {
            for (mut orow, row) in o.outer_iter_mut().zip(trial.outer_iter()) {
                let p = plan.power(&row.to_vec());
                orow.iter_mut().zip(p).for_each(|(d, v)| *d = v);
            }
        });
    epochs.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(a: f64, f: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|i| a * (2.0 * PI * f * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn sinusoid_has_constant_power() {
        for (a, n) in [(1.0, 625), (2.0, 625), (3.0, 500)] {
            let x = sine(a, 10.0, n, 250.0);
            let p = AnalyticPlan::new(n).unwrap().power(&x);
            for &v in &p[n / 5..4 * n / 5] {
                assert!((v - a * a).abs() / (a * a) < 0.01, "{v} vs {}", a * a);
            }
        }
    }

    #[test]
    fn real_part_is_the_input() {
        let x = sine(1.3, 7.0, 101, 250.0);
        let z = analytic_signal(&x).unwrap();
        for (zi, xi) in z.iter().zip(&x) {
            assert!((zi.re - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_and_sign_flip() {
        let plan = AnalyticPlan::new(64).unwrap();
        assert!(plan.power(&[0.0; 64]).iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..64).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(plan.power(&x), plan.power(&neg));
    }

    #[test]
    fn short_epochs_rejected() {
        assert!(matches!(AnalyticPlan::new(7), Err(Error::EpochTooShort(7))));
        assert!(AnalyticPlan::new(8).is_ok());
    }
}
