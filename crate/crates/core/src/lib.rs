//! Analysis pipeline for EEG recordings of covert spatial attention to
//! static and moving targets.
//!
//! The crate is organised by pipeline stage:
//!
//! ```text
//! simgen          forward-model simulator and trial plans (ground truth)
//!   │
//! dataset         RawRecording / EpochSet / BandPowerSet + on-disk format
//!   │
//! preprocess      lag correction, decimation, re-reference, cleaning filters,
//!   │             bad channels, ocular regression, epoching, rejection,
//!   │             bin equalisation, alpha band power
//!   ├── erp             contralateral / ipsilateral ERPs
//!   ├── lateralization  alpha lateralization index
//!   └── iem             inverted encoding model + permuted nulls
//!         │
//! stats           sign-flip permutation tests and temporal clusters
//! ```
//!
//! All computation is done in `f64`; datasets are stored as little-endian
//! `f32`. Every stochastic step takes an explicit seed and derives
//! sub-seeds with [`rng::derive_seed`], so results do not depend on the
//! number of worker threads.

pub mod dataset;
pub mod erp;
pub mod error;
pub mod filter;
pub mod hilbert;
pub mod iem;
pub mod layout;
pub mod lateralization;
pub mod preprocess;
pub mod rng;
pub mod simgen;
pub mod stats;

pub use dataset::{
    read_dataset, write_dataset, BandPowerSet, Condition, EpochSet, Event, RawRecording, Trials,
};
pub use error::{Error, Result};
pub use layout::{ElectrodeLayout, Hemisphere};
