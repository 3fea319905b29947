//! Shared data model and the dataset directory format.
//!
//! A dataset directory holds three files:
//!
//! * `meta.json`  - format version, sampling rate, sample count, layout,
//!   bad channels
//! * `data.f32le` - channel-major little-endian `f32` samples; row `i` is
//!   channel `layout.labels[i]`
//! * `events.csv` - header `sample,code,condition,bin,angle_deg,hit,rt_ms`;
//!   a missing reaction time is an empty field

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::ElectrodeLayout;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.f32le";
pub const EVENTS_FILE: &str = "events.csv";
pub const DATASET_FILES: [&str; 3] = [META_FILE, DATA_FILE, EVENTS_FILE];

/// Number of target location bins.
pub const N_BINS: usize = 6;

/// Centre of location bin `bin` in degrees (0 deg = right, counterclockwise).
pub fn bin_center(bin: u8) -> f64 {
    30.0 + 60.0 * bin as f64
}

/// Signed angular difference `a - b` wrapped into (-180, 180].
pub fn wrap_deg(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "SS")]
    StaticSingle,
    #[serde(rename = "SM")]
    StaticMultiple,
    #[serde(rename = "DS")]
    DynamicSingle,
    #[serde(rename = "DM")]
    DynamicMultiple,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::StaticSingle,
        Condition::StaticMultiple,
        Condition::DynamicSingle,
        Condition::DynamicMultiple,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Condition::StaticSingle => "SS",
            Condition::StaticMultiple => "SM",
            Condition::DynamicSingle => "DS",
            Condition::DynamicMultiple => "DM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_static(self) -> bool {
        matches!(self, Condition::StaticSingle | Condition::StaticMultiple)
    }

    pub fn has_distractors(self) -> bool {
        matches!(self, Condition::StaticMultiple | Condition::DynamicMultiple)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS" => Ok(Condition::StaticSingle),
            "SM" => Ok(Condition::StaticMultiple),
            "DS" => Ok(Condition::DynamicSingle),
            "DM" => Ok(Condition::DynamicMultiple),
            other => Err(Error::InvalidInput(format!("unknown condition {other:?}"))),
        }
    }
}

/// A stimulus onset marker with its trial metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sample_index: usize,
    pub code: i32,
    pub condition: Condition,
    pub bin_index: u8,
    pub angle_deg: f64,
    pub hit: bool,
    pub rt_ms: Option<f64>,
}

impl Event {
    /// Event code convention: `10 * (condition + 1) + bin`.
    pub fn code_for(condition: Condition, bin: u8) -> i32 {
        10 * (condition.index() as i32 + 1) + bin as i32
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_index as usize >= N_BINS {
            return Err(Error::InvalidInput(format!(
                "bin index {} out of range 0..=5",
                self.bin_index
            )));
        }
        if !self.angle_deg.is_finite()
            || wrap_deg(self.angle_deg - bin_center(self.bin_index)).abs() > 10.0 + 1e-9
        {
            return Err(Error::InvalidInput(format!(
                "angle {} deg is more than 10 deg from bin {} centre",
                self.angle_deg, self.bin_index
            )));
        }
        Ok(())
    }
}

/// Continuous multichannel recording in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    /// channels x samples
    pub data: Array2<f64>,
    pub rate_hz: f64,
    pub layout: ElectrodeLayout,
    pub events: Vec<Event>,
    pub bad_channels: BTreeSet<String>,
}

impl RawRecording {
    pub fn new(
        data: Array2<f64>,
        rate_hz: f64,
        layout: ElectrodeLayout,
        events: Vec<Event>,
    ) -> Result<Self> {
        let rec = Self {
            data,
            rate_hz,
            layout,
            events,
            bad_channels: BTreeSet::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::InvalidInput(format!("rate {} Hz", self.rate_hz)));
        }
        if self.data.nrows() != self.layout.len() {
            return Err(Error::InvalidInput(format!(
                "{} data rows but {} layout channels",
                self.data.nrows(),
                self.layout.len()
            )));
        }
        if self
            .events
            .windows(2)
            .any(|w| w[0].sample_index > w[1].sample_index)
        {
            return Err(Error::InvalidInput("events not sorted by sample".into()));
        }
        if let Some(e) = self.events.iter().find(|e| e.sample_index >= self.n_samples()) {
            return Err(Error::InvalidInput(format!(
                "event at sample {} beyond recording end {}",
                e.sample_index,
                self.n_samples()
            )));
        }
        for e in &self.events {
            e.validate()?;
        }
        for b in &self.bad_channels {
            self.layout.index_of(b)?;
        }
        Ok(())
    }

    /// Recording restricted to `labels` (in that order). Bad channels outside
    /// the selection are dropped.
    pub fn pick_channels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let idx = self.layout.indices_of(labels)?;
        let layout = self.layout.subset(labels)?;
        let bad_channels = self
            .bad_channels
            .iter()
            .filter(|b| layout.get(b).is_some())
            .cloned()
            .collect();
        Ok(Self {
            data: self.data.select(Axis(0), &idx),
            rate_hz: self.rate_hz,
            layout,
            events: self.events.clone(),
            bad_channels,
        })
    }
}

/// Marker for voltage epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Voltage {}

/// Marker for instantaneous band power epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {}

/// Trial-locked tensor (trials x channels x samples) with per-trial metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trials<K> {
    pub data: Array3<f64>,
    pub rate_hz: f64,
    /// Time of the first sample relative to stimulus onset, seconds.
    pub t0_offset_s: f64,
    pub meta: Vec<Event>,
    pub layout: ElectrodeLayout,
    pub bad_channels: BTreeSet<String>,
    kind: PhantomData<K>,
}

/// Voltage epochs in microvolts.
pub type EpochSet = Trials<Voltage>;
/// Instantaneous power in microvolts squared.
pub type BandPowerSet = Trials<Power>;

impl<K> Trials<K> {
    pub fn new(
        data: Array3<f64>,
        rate_hz: f64,
        t0_offset_s: f64,
        meta: Vec<Event>,
        layout: ElectrodeLayout,
        bad_channels: BTreeSet<String>,
    ) -> Result<Self> {
        if data.len_of(Axis(0)) != meta.len() {
            return Err(Error::InvalidInput(format!(
                "{} trials in data but {} metadata rows",
                data.len_of(Axis(0)),
                meta.len()
            )));
        }
        if data.len_of(Axis(1)) != layout.len() {
            return Err(Error::InvalidInput(format!(
                "{} channels in data but {} in layout",
                data.len_of(Axis(1)),
                layout.len()
            )));
        }
        Ok(Self {
            data,
            rate_hz,
            t0_offset_s,
            meta,
            layout,
            bad_channels,
            kind: PhantomData,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn n_channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn n_samples(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn time_axis(&self) -> Vec<f64> {
        (0..self.n_samples())
            .map(|i| self.t0_offset_s + i as f64 / self.rate_hz)
            .collect()
    }

    /// Sample index of time `t` (seconds relative to onset), rounded.
    pub fn sample_at(&self, t: f64) -> isize {
        ((t - self.t0_offset_s) * self.rate_hz).round() as isize
    }

    /// Keep trials at `indices`, in that order.
    pub fn select_trials(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
            rate_hz: self.rate_hz,
            t0_offset_s: self.t0_offset_s,
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
            layout: self.layout.clone(),
            bad_channels: self.bad_channels.clone(),
            kind: PhantomData,
        }
    }

    /// Keep channels `labels`, in that order.
    pub fn pick_channels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self> {
        let idx = self.layout.indices_of(labels)?;
        let layout = self.layout.subset(labels)?;
        let bad_channels = self
            .bad_channels
            .iter()
            .filter(|b| layout.get(b).is_some())
            .cloned()
            .collect();
        Ok(Self {
            data: self.data.select(Axis(1), &idx),
            rate_hz: self.rate_hz,
            t0_offset_s: self.t0_offset_s,
            meta: self.meta.clone(),
            layout,
            bad_channels,
            kind: PhantomData,
        })
    }

    /// Keep samples with `start_s <= t <= end_s`.
    pub fn crop(&self, start_s: f64, end_s: f64) -> Result<Self> {
        let a = self.sample_at(start_s).max(0) as usize;
        let b = (self.sample_at(end_s) + 1).min(self.n_samples() as isize);
        if b <= a as isize {
            return Err(Error::InvalidInput(format!("empty crop window [{start_s}, {end_s}] s")));
        }
        Ok(Self {
            data: self.data.slice(ndarray::s![.., .., a..b as usize]).to_owned(),
            rate_hz: self.rate_hz,
            t0_offset_s: self.t0_offset_s + a as f64 / self.rate_hz,
            meta: self.meta.clone(),
            layout: self.layout.clone(),
            bad_channels: self.bad_channels.clone(),
            kind: PhantomData,
        })
    }

    /// Same metadata, new values of another kind.
    pub fn with_data<J>(&self, data: Array3<f64>) -> Result<Trials<J>> {
        Trials::new(
            data,
            self.rate_hz,
            self.t0_offset_s,
            self.meta.clone(),
            self.layout.clone(),
            self.bad_channels.clone(),
        )
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let set: BTreeSet<Condition> = self.meta.iter().map(|e| e.condition).collect();
        set.into_iter().collect()
    }

    pub fn trials_of(&self, condition: Condition) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, e)| e.condition == condition)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    format_version: u32,
    rate_hz: f64,
    n_samples: usize,
    layout: ElectrodeLayout,
    bad_channels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    sample: usize,
    code: i32,
    condition: String,
    bin: u8,
    angle_deg: f64,
    hit: bool,
    rt_ms: Option<f64>,
}

pub fn write_dataset(recording: &RawRecording, dir: &Path) -> Result<()> {
    // Validate samples before touching the filesystem.
    for (c, row) in recording.data.outer_iter().enumerate() {
        if let Some(i) = row.iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::NonFinite {
                channel: recording.layout.labels()[c].clone(),
                index: i,
            });
        }
    }
    write_dataset_rows(
        dir,
        recording.rate_hz,
        recording.n_samples(),
        &recording.layout,
        &recording.bad_channels,
        &recording.events,
        |c| Ok(recording.data.row(c).to_vec()),
    )
}

/// Write a dataset whose channel rows are produced one at a time by `row`,
/// so recordings larger than memory can be stored. A non-finite sample
/// aborts the write and leaves a partial data file behind.
pub fn write_dataset_rows(
    dir: &Path,
    rate_hz: f64,
    n_samples: usize,
    layout: &ElectrodeLayout,
    bad_channels: &BTreeSet<String>,
    events: &[Event],
    mut row: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = MetaFile {
        format_version: FORMAT_VERSION,
        rate_hz,
        n_samples,
        layout: layout.clone(),
        bad_channels: bad_channels.iter().cloned().collect(),
    };
    let meta_path = dir.join(META_FILE);
    let f = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    w.flush().map_err(|e| Error::io(&meta_path, e))?;

    let data_path = dir.join(DATA_FILE);
    let f = File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, f);
    for c in 0..layout.len() {
        let values = row(c)?;
        if values.len() != n_samples {
            return Err(Error::InvalidInput(format!(
                "channel {} has {} samples, expected {n_samples}",
                layout.labels()[c],
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::NonFinite {
                channel: layout.labels()[c].clone(),
                index: i,
            });
        }
        for v in values {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(&data_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&data_path, e))?;

    let events_path = dir.join(EVENTS_FILE);
    let f = File::create(&events_path).map_err(|e| Error::io(&events_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let csv_err = |e: csv::Error| Error::Format {
        path: events_path.clone(),
        msg: e.to_string(),
    };
    if events.is_empty() {
        w.write_record(["sample", "code", "condition", "bin", "angle_deg", "hit", "rt_ms"])
            .map_err(csv_err)?;
    }
    for e in events {
        w.serialize(EventRow {
            sample: e.sample_index,
            code: e.code,
            condition: e.condition.code().to_string(),
            bin: e.bin_index,
            angle_deg: e.angle_deg,
            hit: e.hit,
            rt_ms: e.rt_ms,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&events_path, e))?;
    Ok(())
}

fn open_existing(path: PathBuf) -> Result<(File, PathBuf)> {
    match File::open(&path) {
        Ok(f) => Ok((f, path)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path)),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_dataset(dir: &Path) -> Result<RawRecording> {
    let (f, meta_path) = open_existing(dir.join(META_FILE))?;
    let raw: serde_json::Value = serde_json::from_reader(BufReader::new(f)).map_err(|e| {
        Error::Format {
            path: meta_path.clone(),
            msg: e.to_string(),
        }
    })?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format {
            path: meta_path.clone(),
            msg: "missing format_version".into(),
        })? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let meta: MetaFile = serde_json::from_value(raw).map_err(|e| Error::Format {
        path: meta_path.clone(),
        msg: e.to_string(),
    })?;

    let n_channels = meta.layout.len();
    let (f, data_path) = open_existing(dir.join(DATA_FILE))?;
    let actual = f.metadata().map_err(|e| Error::io(&data_path, e))?.len();
    let expected = (n_channels * meta.n_samples * 4) as u64;
    if actual != expected {
        return Err(Error::SizeMismatch {
            path: data_path,
            expected,
            actual,
        });
    }
    let mut bytes = Vec::with_capacity(expected as usize);
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&data_path, e))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((n_channels, meta.n_samples), values)
        .expect("length checked against meta.json");

    let (f, events_path) = open_existing(dir.join(EVENTS_FILE))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(f));
    let mut events = Vec::new();
    for (line, row) in reader.deserialize::<EventRow>().enumerate() {
        let row = row.map_err(|e| Error::Format {
            path: events_path.clone(),
            msg: e.to_string(),
        })?;
        let event = Event {
            sample_index: row.sample,
            code: row.code,
            condition: row.condition.parse().map_err(|e: Error| Error::Format {
                path: events_path.clone(),
                msg: format!("row {}: {e}", line + 2),
            })?,
            bin_index: row.bin,
            angle_deg: row.angle_deg,
            hit: row.hit,
            rt_ms: row.rt_ms,
        };
        event.validate().map_err(|e| Error::Format {
            path: events_path.clone(),
            msg: format!("row {}: {e}", line + 2),
        })?;
        if event.sample_index >= meta.n_samples {
            return Err(Error::Format {
                path: events_path.clone(),
                msg: format!(
                    "row {}: sample {} beyond recording end {}",
                    line + 2,
                    event.sample_index,
                    meta.n_samples
                ),
            });
        }
        events.push(event);
    }
    if events.windows(2).any(|w| w[0].sample_index > w[1].sample_index) {
        log::warn!(
            "{}: events not sorted by sample; re-sorting",
            events_path.display()
        );
        events.sort_by_key(|e| e.sample_index);
    }

    let mut rec = RawRecording::new(data, meta.rate_hz, meta.layout, events)?;
    for b in meta.bad_channels {
        rec.layout.index_of(&b).map_err(|_| Error::Format {
            path: meta_path.clone(),
            msg: format!("bad channel {b} not in layout"),
        })?;
        rec.bad_channels.insert(b);
    }
    Ok(rec)
}
