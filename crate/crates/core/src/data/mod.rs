//! Event streams, pseudo-frames, synthetic scenes and dataset manifests.

mod events;
mod manifest;
mod synth;
mod voxel;

use std::path::PathBuf;

use thiserror::Error;

pub use events::{
    parse_csv, parse_evt1, parse_events, read_event_file, window_events, write_csv, write_evt1, Event, EventFormat,
    EventStream, ParseWarning, Parsed, Polarity, DEFAULT_WINDOW_US, EVT1_MAGIC, EVT1_RECORD_LEN,
};
pub use manifest::{kfold_split, DatasetManifest, ManifestRecord};
pub use synth::{generate_synthetic_events, generate_synthetic_scene, SynthConfig, SyntheticScene};
pub use voxel::{voxelize, PseudoFrame};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad event file magic {0:?}, expected \"EVT1\"")]
    BadMagic(Vec<u8>),
    #[error("event file truncated: {0} trailing bytes do not form a record")]
    Truncated(usize),
    #[error("event count header says {header} records but the file holds {actual}")]
    CountMismatch { header: u32, actual: usize },
    #[error("{location}: polarity {value} is not +1 or -1")]
    Polarity { location: String, value: i64 },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds { x: u16, y: u16, width: usize, height: usize },
    #[error("event at t={t} lies outside the window [{start}, {end}]")]
    OutsideWindow { t: u64, start: u64, end: u64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("label image: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DataError {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        DataError::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
