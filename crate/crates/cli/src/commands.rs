//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use saber_core::dataset::{DATASET_FILES, N_BINS};
use saber_core::rng::{derive_seed, Stream};
use saber_core::simgen::{
    generate_trial_plan, sequence_violations, PlanOverrides, SimGroundTruth, SimParams, Synthesizer, TrialPlan,
    TRUTH_FILE,
};
use saber_core::{read_dataset, Condition, ElectrodeLayout};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::{Cli, Command, RunArgs, SimulateArgs, StageArgs, StatsArgs, ValidateArgs};
use crate::config::PipelineConfig;
use crate::manifest::{dataset_digest, dataset_hashes, write_manifest, FileHash, MANIFEST_DIR};
use crate::pipeline::*;
use crate::plot::{timecourse_svg, Bars, Series};
use crate::report::{build_report, Report, REPORT_FILE};
use crate::{CliError, CliResult};

pub const FAILED_FILE: &str = "FAILED";
pub const PLAN_FILE: &str = "plan.json";
pub const CONFIG_FILE: &str = "config.json";

/// Run a parsed command line; returns the process exit code.
pub fn dispatch(cli: Cli) -> CliResult<u8> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        // Fails only if a pool already exists, e.g. inside a host process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("worker pool already initialised; --workers ignored");
        }
    }
    match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::Preprocess(a) => stage(a, Stage::Preprocess).map(|_| 0),
        Command::Erp(a) => stage(a, Stage::Erp).map(|_| 0),
        Command::Lateralize(a) => stage(a, Stage::Lateralize).map(|_| 0),
        Command::Iem(a) => stage(a, Stage::Iem).map(|_| 0),
        Command::Stats(a) => stats(a).map(|_| 0),
        Command::Run(a) => run(a).map(|_| 0),
        Command::Validate(a) => validate(&a).map(|v| if v.is_empty() { 0 } else { 1 }),
    }
}

/// Refuse to write into a non-empty directory unless `force` is set, and
/// then only into a directory this tool created.
pub fn prepare_output(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST_DIR).is_dir() && !dir.join(FAILED_FILE).is_file() {
                return Err(CliError::Usage(format!(
                    "{} was not written by saber; refusing to overwrite it",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(dir).with_context(|| format!("cannot clear {}", dir.display()))?;
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn core_err(e: saber_core::Error) -> CliError {
    match e {
        saber_core::Error::Unsatisfiable(_) => CliError::Usage(e.to_string()),
        other => CliError::from_core(other),
    }
}

#[derive(Serialize)]
struct SimulationSettings<'a> {
    rate_hz: f64,
    plan: &'a PlanOverrides,
    params: &'a SimParams,
}

pub fn sim_params(a: &SimulateArgs) -> CliResult<SimParams> {
    let mut p: SimParams = match &a.params {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => SimParams::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $( if let Some(v) = a.$flag.clone() { p.$($field).+ = v; } )*
        };
    }
    set!(
        tuning_exponent => tuning_exponent,
        alpha_freq => alpha_freq_hz,
        signal_uv => signal_uv,
        structured_weight => structured_weight,
        random_weight => random_weight,
        marker_lag_ms => marker_lag_ms,
        ramp_duration => modulation.ramp_duration_s,
        distractor_delay => modulation.distractor_delay_s,
        dip_start => modulation.dip_start_s,
        dip_end => modulation.dip_end_s,
        dip_depth => modulation.dip_depth,
        active_end => modulation.active_end_s,
        alpha_uv => noise.alpha_uv,
        pink_uv => noise.pink_uv,
        pink_exponent => noise.pink_exponent,
        white_uv => noise.white_uv,
        n_pink_sources => noise.n_pink_sources,
        n_alpha_sources => noise.n_alpha_sources,
        source_width => noise.source_width,
        evoked_uv => evoked.amplitude_uv,
        evoked_latency => evoked.latency_s,
        evoked_width => evoked.width_s,
    );
    Ok(p)
}

pub fn plan_overrides(a: &SimulateArgs) -> PlanOverrides {
    PlanOverrides {
        conditions: a.conditions.clone(),
        blocks_per_condition: a.blocks,
        trials_per_block: a.trials_per_block,
        bins: a.bins.clone(),
        isi_s: a.isi,
        counterbalance: a.counterbalance,
        lead_in_s: a.lead_in,
        jitter_deg: a.jitter_deg,
    }
}

pub fn plan_summary(plan: &TrialPlan) -> String {
    let mut s = format!(
        "{} trials, counterbalance order {} ({})\ncondition  {}\n",
        plan.entries.len(),
        plan.counterbalance,
        plan.condition_order.iter().map(|c| c.code()).collect::<Vec<_>>().join(" "),
        (0..N_BINS).map(|b| format!("bin{b:<3}")).collect::<Vec<_>>().join(" ")
    );
    for (c, counts) in plan.counts() {
        s.push_str(&format!(
            "{:<10} {}\n",
            c.code(),
            counts.iter().map(|n| format!("{n:<6}")).collect::<Vec<_>>().join(" ")
        ));
    }
    s
}

pub fn simulate(a: SimulateArgs) -> CliResult<TrialPlan> {
    let seed = a
        .seed
        .ok_or_else(|| usage("a seed is required: pass --seed or set SABER_SEED"))?;
    let params = sim_params(&a)?;
    let (plan, n_samples) = simulate_with(seed, &a.out, a.force, a.rate, params, &plan_overrides(&a))?;
    print!("{}", plan_summary(&plan));
    println!("wrote {} ({n_samples} samples at {} Hz)", a.out.display(), a.rate);
    Ok(plan)
}

/// Generate and write one synthetic dataset with its ground truth, plan and
/// manifest. Returns the plan and the number of samples per channel.
pub fn simulate_with(
    seed: u64,
    out: &Path,
    force: bool,
    rate_hz: f64,
    params: SimParams,
    overrides: &PlanOverrides,
) -> CliResult<(TrialPlan, usize)> {
    params.validate().map_err(core_err)?;
    let plan = generate_trial_plan(seed, overrides).map_err(core_err)?;
    let layout = ElectrodeLayout::standard_64();
    let truth = SimGroundTruth::generate(params, &layout, seed).map_err(core_err)?;
    let synth = Synthesizer::new(&plan, &truth, &layout, rate_hz).map_err(core_err)?;
    prepare_output(out, force)?;
    synth.write(&truth, out).map_err(core_err)?;
    write_json(&out.join(PLAN_FILE), &plan)?;
    let settings = SimulationSettings {
        rate_hz,
        plan: overrides,
        params: &truth.params,
    };
    let hash = hex::encode(Sha256::digest(serde_json::to_string(&settings).map_err(anyhow::Error::from)?.as_bytes()));
    let mut outputs: Vec<String> = DATASET_FILES.iter().map(|s| s.to_string()).collect();
    outputs.extend([TRUTH_FILE.to_string(), PLAN_FILE.to_string()]);
    write_manifest(out, "simulate", &hash, seed, vec![], &outputs)?;
    Ok((plan, synth.n_samples()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Preprocess,
    Erp,
    Lateralize,
    Iem,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Erp => "erp",
            Stage::Lateralize => "lateralize",
            Stage::Iem => "iem",
        }
    }
}

/// Directory holding the dataset files of an input.
fn data_dir(input: &Path) -> PathBuf {
    let clean = input.join(CLEAN_DIR);
    if clean.join(saber_core::dataset::META_FILE).is_file() {
        clean
    } else {
        input.to_path_buf()
    }
}

fn stage(a: StageArgs, which: Stage) -> CliResult<()> {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    cfg.inputs = vec![a.input.clone()];
    cfg.output = Some(a.out.clone());
    let seed = cfg.resolve_seed(a.seed)?;
    cfg.validate()?;
    prepare_output(&a.out, a.force)?;
    let result = (|| -> anyhow::Result<()> {
        let inputs = dataset_hashes(&data_dir(&a.input))?;
        let (rec, cleaned) = load_input(&a.input)?;
        let sseed = subject_seed(seed, 0);
        let prep = prepare(&rec, cleaned, &cfg, sseed)?;
        let outputs = match which {
            Stage::Preprocess => write_preprocess(&prep, &a.out, true)?,
            Stage::Erp => run_erp(&prep, &cfg, &a.out)?.1,
            Stage::Lateralize => run_lateralization(&power_of(&prep, &cfg)?, &cfg, sseed, &a.out)?.1,
            Stage::Iem => run_iem(&power_of(&prep, &cfg)?, &cfg, sseed, &a.out)?.1,
        };
        if which != Stage::Preprocess {
            write_preprocess(&prep, &a.out, false)?;
        }
        write_manifest(&a.out, which.name(), &cfg.analysis_hash(), seed, inputs, &outputs)?;
        Ok(())
    })();
    result.map_err(|e| fail(&a.out, which.name(), e))
}

/// Leave a `FAILED` marker next to whatever was written so far.
fn fail(out: &Path, stage: &str, e: anyhow::Error) -> CliError {
    let msg = format!("stage {stage} failed: {e:#}\n");
    if let Err(w) = std::fs::write(out.join(FAILED_FILE), &msg) {
        log::error!("cannot write failure marker: {w}");
    }
    CliError::Runtime(e.context(format!("stage {stage} failed")))
}

fn stats(a: StatsArgs) -> CliResult<GroupStats> {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    let seed = cfg.resolve_seed(a.seed)?;
    for d in &a.inputs {
        if !d.is_dir() {
            return Err(usage(format!("{} is not a directory", d.display())));
        }
    }
    prepare_output(&a.out, a.force)?;
    let result = (|| -> anyhow::Result<GroupStats> {
        let subjects: Vec<SubjectResults> = a
            .inputs
            .iter()
            .enumerate()
            .map(|(i, d)| SubjectResults::load(d, subject_name(i)))
            .collect::<anyhow::Result<_>>()?;
        if subjects.iter().all(|s| s.erp.is_none() && s.lateralization.is_none() && s.iem.is_none()) {
            anyhow::bail!("no stage outputs found in the inputs");
        }
        let g = group_stats(&subjects, &cfg, derive_seed(seed, Stream::Permutation, &[]))?;
        write_json(&a.out.join(STATS_FILE), &g)?;
        let mut inputs = Vec::new();
        for d in &a.inputs {
            for f in [ERP_FILE, LATERALIZATION_FILE, IEM_FILE] {
                let p = d.join(f);
                if p.is_file() {
                    inputs.push(FileHash {
                        path: p.display().to_string(),
                        sha256: crate::manifest::sha256_file(&p)?,
                    });
                }
            }
        }
        write_manifest(&a.out, "stats", &cfg.analysis_hash(), seed, inputs, &[STATS_FILE.into()])?;
        Ok(g)
    })();
    result.map_err(|e| fail(&a.out, "stats", e))
}

fn run(a: RunArgs) -> CliResult<Report> {
    let mut cfg = PipelineConfig::load(a.config.as_deref())?;
    // Relative paths in a config file are relative to the file.
    if let Some(base) = a.config.as_deref().and_then(Path::parent) {
        for p in cfg.inputs.iter_mut().chain(cfg.output.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    if !a.inputs.is_empty() {
        cfg.inputs = a.inputs.clone();
    }
    if let Some(o) = &a.out {
        cfg.output = Some(o.clone());
    }
    let an = &mut cfg.analyses;
    an.erp &= !a.no_erp;
    an.lateralization &= !a.no_lateralization;
    an.iem &= !a.no_iem;
    an.iem_permutations &= !a.no_permutations;
    an.stats &= !a.no_stats;
    an.plots &= !a.no_plots;
    let seed = cfg.resolve_seed(a.seed)?;
    cfg.validate()?;
    let out = cfg.output.clone().expect("validated");
    prepare_output(&out, a.force)?;
    run_pipeline(&cfg, seed, &out)
}

/// Every enabled stage for every subject, then statistics, plots and the
/// report. Outputs written before a failure are kept next to a `FAILED`
/// marker.
pub fn run_pipeline(cfg: &PipelineConfig, seed: u64, out: &Path) -> CliResult<Report> {
    write_json(&out.join(CONFIG_FILE), cfg).map_err(|e| fail(out, "config", e))?;
    let hash = cfg.analysis_hash();
    let mut subjects = Vec::new();
    for (i, input) in cfg.inputs.iter().enumerate() {
        let name = subject_name(i);
        let dir = subject_dir(out, &name);
        let res = run_subject(cfg, seed, i, input, &dir, &hash).map_err(|e| fail(out, &format!("{name}"), e))?;
        subjects.push(res);
    }
    let stats = if cfg.analyses.stats {
        let g = group_stats(&subjects, cfg, derive_seed(seed, Stream::Permutation, &[]))
            .map_err(|e| fail(out, "stats", e))?;
        write_json(&out.join(STATS_FILE), &g).map_err(|e| fail(out, "stats", e))?;
        Some(g)
    } else {
        None
    };
    let mut outputs = vec![REPORT_FILE.to_string()];
    if cfg.analyses.plots {
        outputs.extend(write_plots(out, &subjects, stats.as_ref()).map_err(|e| fail(out, "plots", e))?);
    }
    let report = build_report(seed, &hash, &subjects, stats.as_ref());
    write_json(&out.join(REPORT_FILE), &report).map_err(|e| fail(out, "report", e))?;
    if stats.is_some() {
        outputs.push(STATS_FILE.into());
    }
    let inputs = subjects
        .iter()
        .map(|s| FileHash {
            path: s.name.clone(),
            sha256: s.dataset_sha256.clone(),
        })
        .collect();
    write_manifest(out, "run", &hash, seed, inputs, &outputs).map_err(|e| fail(out, "report", e))?;
    println!("wrote {}", out.join(REPORT_FILE).display());
    Ok(report)
}

fn run_subject(
    cfg: &PipelineConfig,
    seed: u64,
    index: usize,
    input: &Path,
    dir: &Path,
    hash: &str,
) -> anyhow::Result<SubjectResults> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let inputs = dataset_hashes(&data_dir(input))?;
    let (rec, cleaned) = load_input(input)?;
    let sseed = subject_seed(seed, index);
    log::info!("{}: preprocessing {}", subject_name(index), input.display());
    let prep = prepare(&rec, cleaned, cfg, sseed)?;
    let mut res = SubjectResults {
        name: subject_name(index),
        dataset_sha256: dataset_digest(&inputs),
        n_events: rec.events.len(),
        preprocess: Some(prep.summary.clone()),
        ..Default::default()
    };
    drop(rec);
    let outs = write_preprocess(&prep, dir, cfg.analyses.write_clean)?;
    write_manifest(dir, "preprocess", hash, seed, inputs.clone(), &outs)?;
    if cfg.analyses.erp {
        let (erp, outs) = run_erp(&prep, cfg, dir)?;
        write_manifest(dir, "erp", hash, seed, inputs.clone(), &outs)?;
        res.erp = Some(erp);
    }
    if cfg.analyses.lateralization || cfg.analyses.iem {
        let power = power_of(&prep, cfg)?;
        if cfg.analyses.lateralization {
            let (lat, outs) = run_lateralization(&power, cfg, sseed, dir)?;
            write_manifest(dir, "lateralize", hash, seed, inputs.clone(), &outs)?;
            res.lateralization = Some(lat);
        }
        if cfg.analyses.iem {
            log::info!("{}: inverted encoding model", subject_name(index));
            let (tc, outs) = run_iem(&power, cfg, sseed, dir)?;
            write_manifest(dir, "iem", hash, seed, inputs.clone(), &outs)?;
            res.iem = Some(tc);
        }
    }
    Ok(res)
}

fn mean_over<'a>(rows: impl Iterator<Item = &'a [Option<f64>]>) -> Vec<Option<f64>> {
    let rows: Vec<_> = rows.collect();
    let n_t = rows.first().map_or(0, |r| r.len());
    (0..n_t)
        .map(|t| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r[t]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

fn write_plots(out: &Path, subjects: &[SubjectResults], stats: Option<&GroupStats>) -> anyhow::Result<Vec<String>> {
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let spans = |r: &saber_core::stats::ClusterReport| r.clusters.iter().map(|c| (c.start_s, c.end_s)).collect();

    let lats: Vec<_> = subjects.iter().filter_map(|s| s.lateralization.as_ref()).collect();
    if let Some(first) = lats.first() {
        let mut series = Vec::new();
        let mut bars = Vec::new();
        for c in Condition::ALL {
            if !first.timecourse.conditions.contains_key(&c) {
                continue;
            }
            let rows = lats.iter().filter_map(|l| l.timecourse.conditions.get(&c)).map(|cl| cl.index.as_slice());
            series.push(Series { name: c.code().into(), values: mean_over(rows) });
            if let Some(r) = stats.and_then(|g| g.lateralization_vs_zero.get(&c)) {
                bars.push(Bars { name: c.code().into(), spans: spans(r) });
            }
        }
        let svg = timecourse_svg("Alpha lateralization", "(ipsi - contra) / (ipsi + contra)", &first.timecourse.time_s, &series, &bars);
        std::fs::write(dir.join("lateralization.svg"), svg)?;
        written.push("plots/lateralization.svg".to_string());
    }

    let iems: Vec<_> = subjects.iter().filter_map(|s| s.iem.as_ref()).collect();
    if let Some(first) = iems.first() {
        let mut series = Vec::new();
        let mut bars = Vec::new();
        for c in Condition::ALL {
            if !first.conditions.contains_key(&c) {
                continue;
            }
            let rows: Vec<Vec<Option<f64>>> = iems
                .iter()
                .filter_map(|t| t.conditions.get(&c))
                .map(|crf| crf.slope.iter().map(|&v| Some(v)).collect())
                .collect();
            series.push(Series { name: c.code().into(), values: mean_over(rows.iter().map(Vec::as_slice)) });
            if let Some(r) = stats.and_then(|g| g.iem_vs_permuted.get(&c)) {
                bars.push(Bars { name: c.code().into(), spans: spans(r) });
            }
        }
        let svg = timecourse_svg("CRF slope", "slope", &first.time_s, &series, &bars);
        std::fs::write(dir.join("slope.svg"), svg)?;
        written.push("plots/slope.svg".to_string());
    }
    Ok(written)
}

/// Format and plan-constraint violations of a dataset directory; each is
/// printed, followed by the count.
pub fn validate(a: &ValidateArgs) -> CliResult<Vec<String>> {
    let mut violations = Vec::new();
    match read_dataset(&a.dataset) {
        Err(e) => violations.push(e.to_string()),
        Ok(rec) => {
            let plan: Option<TrialPlan> = {
                let p = a.dataset.join(PLAN_FILE);
                p.is_file().then(|| read_json(&p)).transpose().map_err(CliError::Runtime)?
            };
            let per_block = a.trials_per_block.or(plan.as_ref().map(|p| p.trials_per_block)).unwrap_or(102);
            let mut bins: Vec<u8> = rec.events.iter().map(|e| e.bin_index).collect();
            bins.sort_unstable();
            bins.dedup();
            let seq: Vec<(Condition, u8)> = rec.events.iter().map(|e| (e.condition, e.bin_index)).collect();
            violations.extend(
                sequence_violations(&seq, per_block, &bins)
                    .into_iter()
                    .map(|v| format!("{}: {v}", saber_core::dataset::EVENTS_FILE)),
            );
        }
    }
    for v in &violations {
        println!("violation: {v}");
    }
    println!("{} violations", violations.len());
    Ok(violations)
}

/// Count events per condition and bin.
pub fn event_counts(dir: &Path) -> CliResult<BTreeMap<Condition, [usize; N_BINS]>> {
    let rec = read_dataset(dir).map_err(core_err)?;
    let mut out: BTreeMap<Condition, [usize; N_BINS]> = BTreeMap::new();
    for e in &rec.events {
        out.entry(e.condition).or_default()[e.bin_index as usize] += 1;
    }
    Ok(out)
}
