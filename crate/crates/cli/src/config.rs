//! Pipeline configuration: defaults, JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use saber_core::iem::IemConfig;
use saber_core::preprocess::PreprocessConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "SABER_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
    pub n_iter: usize,
    pub min_cluster: usize,
    /// Window averaged for the paired condition comparisons, seconds.
    pub window_s: (f64, f64),
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_iter: saber_core::stats::DEFAULT_ITERATIONS,
            min_cluster: saber_core::stats::DEFAULT_MIN_CLUSTER,
            window_s: (0.0, 1.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub erp: bool,
    pub lateralization: bool,
    pub iem: bool,
    pub iem_permutations: bool,
    pub stats: bool,
    pub plots: bool,
    /// Keep the cleaned continuous data on disk.
    pub write_clean: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            erp: true,
            lateralization: true,
            iem: true,
            iem_permutations: true,
            stats: true,
            plots: true,
            write_clean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// One dataset directory per subject.
    pub inputs: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub preprocess: PreprocessConfig,
    pub iem: IemConfig,
    pub stats: StatsConfig,
    pub analyses: Analyses,
    /// Mean-amplitude window for the contralateral negativity, seconds.
    pub erp_window_s: (f64, f64),
    pub lateralization_null_perms: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            output: None,
            seed: None,
            preprocess: PreprocessConfig::default(),
            iem: IemConfig::default(),
            stats: StatsConfig::default(),
            analyses: Analyses::default(),
            erp_window_s: (0.18, 0.30),
            lateralization_null_perms: 200,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Defaults, or the file when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::from_file)
    }

    /// The flag wins, then the file, then `SABER_SEED`.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => {
                    return Err(CliError::Usage(format!(
                        "a seed is required: pass --seed, set \"seed\" in the config or {SEED_ENV}"
                    )))
                }
            },
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.inputs.is_empty() {
            return Err(CliError::Usage("no input dataset given".into()));
        }
        for p in &self.inputs {
            if !p.is_dir() {
                return Err(CliError::Usage(format!("input {} is not a directory", p.display())));
            }
        }
        if self.output.is_none() {
            return Err(CliError::Usage("no output directory given".into()));
        }
        if self.seed.is_none() {
            return Err(CliError::Usage("seed missing".into()));
        }
        self.preprocess.validate().map_err(CliError::from_core)?;
        self.iem.validate().map_err(CliError::from_core)?;
        let s = &self.stats;
        if !(0.0..=1.0).contains(&s.alpha) || s.n_iter == 0 || s.min_cluster == 0 {
            return Err(CliError::Usage("stats: alpha must lie in [0, 1]; n_iter and min_cluster must be positive".into()));
        }
        if !(s.window_s.0 < s.window_s.1) || !(self.erp_window_s.0 < self.erp_window_s.1) {
            return Err(CliError::Usage("analysis windows must have start < end".into()));
        }
        if self.lateralization_null_perms == 0 {
            return Err(CliError::Usage("lateralization_null_perms must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the analysis settings; paths are excluded so the hash
    /// identifies the computation rather than where it ran.
    pub fn analysis_hash(&self) -> String {
        let mut c = self.clone();
        c.inputs.clear();
        c.output = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
