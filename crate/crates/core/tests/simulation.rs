//! Simulator-driven checks of the analysis stages.

use saber_core::iem::{run_iem_timecourse, IemConfig};
use saber_core::lateralization::lateralization_timecourse;
use saber_core::preprocess::{alpha_power, correct_event_lag, epoch, PreprocessConfig};
use saber_core::simgen::*;
use saber_core::stats::spearman;
use saber_core::{BandPowerSet, Condition, ElectrodeLayout};

fn quiet() -> SimParams {
    let mut p = SimParams::default();
    p.noise.alpha_uv = 0.0;
    p.noise.pink_uv = 0.0;
    p.noise.white_uv = 0.0;
    p.evoked.amplitude_uv = 0.0;
    p
}

fn power_set(params: SimParams, cond: Condition, per_block: usize, blocks: usize, seed: u64) -> (BandPowerSet, SimGroundTruth) {
    let layout = ElectrodeLayout::standard_64();
    let truth = SimGroundTruth::generate(params, &layout, seed).unwrap();
    let plan = generate_trial_plan(
        seed,
        &PlanOverrides {
            conditions: Some(vec![cond]),
            trials_per_block: Some(per_block),
            blocks_per_condition: Some(blocks),
            ..Default::default()
        },
    )
    .unwrap();
    let syn = Synthesizer::new(&plan, &truth, &layout, 250.0).unwrap();
    let mut rec = syn.recording_of(&layout.posterior_labels()).unwrap();
    let cfg = PreprocessConfig::default();
    rec.events = correct_event_lag(&rec.events, cfg.lag_ms, rec.rate_hz, rec.n_samples()).unwrap();
    let (ep, _) = epoch(&rec, &cfg).unwrap();
    (alpha_power(&ep, &cfg).unwrap(), truth)
}

#[test]
fn noiseless_power_topography_matches_weights() {
    let (bp, truth) = power_set(quiet(), Condition::StaticSingle, 12, 1, 5);
    let s = bp.sample_at(1.0) as usize;
    let full = ElectrodeLayout::standard_64();
    let mut checked = 0;
    for (k, e) in bp.meta.iter().enumerate() {
        let amps = truth.amplitudes(e.angle_deg);
        for (c, label) in bp.layout.labels().iter().enumerate() {
            let expected = amps[full.index_of(label).unwrap()].powi(2);
            if expected > 0.25 {
                let got = bp.data[[k, c, s]];
                assert!((got / expected - 1.0).abs() < 0.03, "{label} trial {k}: {got} vs {expected}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn noiseless_static_crf_is_selective() {
    let (bp, _) = power_set(quiet(), Condition::StaticSingle, 18, 1, 6);
    let bp = bp.crop(0.8, 0.9).unwrap();
    let cfg = IemConfig { n_trialset_iterations: 2, ..Default::default() };
    let tc = run_iem_timecourse(&bp, &cfg, 6).unwrap();
    let crf = &tc.conditions[&Condition::StaticSingle];
    for (c, slope) in crf.crf.iter().zip(&crf.slope) {
        // peak at the true location, slope near the basis profile's
        assert!(c[2] > c[1] && c[2] > c[3] && c[2] > c[5]);
        assert!(*slope > 0.25, "{slope}");
    }
}

#[test]
fn dynamic_ramp_grows_lateralization() {
    let (bp, _) = power_set(SimParams::default(), Condition::DynamicSingle, 600, 1, 7);
    let lat = lateralization_timecourse(&bp).unwrap();
    let idx = &lat.conditions[&Condition::DynamicSingle].index;
    let window: Vec<usize> = (0..lat.time_s.len())
        .filter(|&i| lat.time_s[i] >= 0.1 && lat.time_s[i] <= 1.25)
        .collect();
    let t: Vec<f64> = window.iter().map(|&i| lat.time_s[i]).collect();
    let v: Vec<f64> = window.iter().map(|&i| idx[i].unwrap()).collect();
    assert!(spearman(&t, &v) > 0.9);
    assert!(*v.last().unwrap() > 0.05);
}

#[test]
fn white_noise_lowers_slope() {
    let mut means = Vec::new();
    for white in [0.0, 30.0, 90.0] {
        let mut p = SimParams::default();
        p.noise.white_uv = white;
        let (bp, _) = power_set(p, Condition::StaticSingle, 60, 1, 8);
        let bp = bp.crop(0.4, 1.2).unwrap();
        let cfg = IemConfig { n_trialset_iterations: 3, ..Default::default() };
        let tc = run_iem_timecourse(&bp, &cfg, 8).unwrap();
        let s = &tc.conditions[&Condition::StaticSingle].slope;
        means.push(s.iter().sum::<f64>() / s.len() as f64);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn plans_hold_for_1000_seeds() {
    for seed in 0..1000 {
        let plan = generate_trial_plan(seed, &PlanOverrides::default()).unwrap();
        assert!(plan.violations().is_empty(), "seed {seed}");
        for (_, counts) in plan.counts() {
            assert_eq!(counts, [102; 6]);
        }
    }
}

#[test]
fn written_simulations_are_byte_identical() {
    let layout = ElectrodeLayout::standard_64();
    let plan = generate_trial_plan(
        9,
        &PlanOverrides { trials_per_block: Some(6), blocks_per_condition: Some(1), ..Default::default() },
    )
    .unwrap();
    let truth = SimGroundTruth::generate(SimParams::default(), &layout, 9).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Synthesizer::new(&plan, &truth, &layout, 500.0).unwrap().write(&truth, d.path()).unwrap();
    }
    for f in ["meta.json", "data.f32le", "events.csv", TRUTH_FILE] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let rec = saber_core::read_dataset(dirs[0].path()).unwrap();
    assert_eq!(rec.events.len(), 24);
    assert_eq!(load_ground_truth(&dirs[0].path().join(TRUTH_FILE)).unwrap(), truth);
}
