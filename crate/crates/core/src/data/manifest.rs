//! JSON dataset manifests and k-fold splitting.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_event_file, voxelize, window_events, DataError, PseudoFrame, DEFAULT_WINDOW_US};
use crate::labels::ClassMap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Event file (EVT1 or CSV), relative to the manifest.
    pub events: PathBuf,
    /// 8-bit PGM class map at source or network resolution.
    pub labels: PathBuf,
    /// Window start in microseconds.
    pub window_start: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    /// `[width, height]` of the recording sensor.
    pub source_size: [usize; 2],
    #[serde(default = "default_window")]
    pub window_us: u64,
    pub records: Vec<ManifestRecord>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_window() -> u64 {
    DEFAULT_WINDOW_US
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::from(e).in_file(path))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| DataError::from(e).in_file(path))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.classes.len() < 2 || m.source_size.contains(&0) {
            return Err(DataError::Invalid("manifest needs at least two classes and a positive source size".into())
                .in_file(path));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Load, window and voxelise record `index` at `dst = (width, height)`.
    pub fn load_frame(&self, index: usize, dst: (usize, usize), timesteps: usize) -> Result<PseudoFrame, DataError> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| DataError::Invalid(format!("record {index} out of range")))?;
        let events_path = self.resolve(&rec.events);
        let stream = read_event_file(&events_path)?.stream;
        let window = window_events(&stream, rec.window_start, self.window_us)?;
        let src = (self.source_size[0], self.source_size[1]);
        let spikes = voxelize(&window, rec.window_start, self.window_us, src, dst, timesteps)
            .map_err(|e| e.in_file(&events_path))?;
        let label_path = self.resolve(&rec.labels);
        let raw = ClassMap::read_pgm(&label_path).map_err(|e| DataError::from(e).in_file(&label_path))?;
        let label = if (raw.width(), raw.height()) == dst {
            raw
        } else if (raw.width(), raw.height()) == src {
            raw.resample(dst.1, dst.0)
        } else {
            return Err(DataError::Invalid(format!(
                "label map is {}x{}, expected {}x{} or {}x{}",
                raw.width(),
                raw.height(),
                src.0,
                src.1,
                dst.0,
                dst.1
            ))
            .in_file(&label_path));
        };
        if let Some(&bad) = label
            .data()
            .iter()
            .find(|&&c| c != crate::labels::IGNORE_LABEL && c as usize >= self.classes.len())
        {
            return Err(DataError::Invalid(format!("label {bad} outside {} classes", self.classes.len()))
                .in_file(&label_path));
        }
        Ok(PseudoFrame { spikes, label })
    }

    fn with_records(&self, records: Vec<ManifestRecord>) -> Self {
        Self {
            records,
            ..self.clone()
        }
    }
}

/// Split into `(train, test)` for fold `fold` of `k` after a seeded shuffle.
/// Test folds partition the records and differ in size by at most one.
pub fn kfold_split(
    manifest: &DatasetManifest,
    k: usize,
    fold: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let n = manifest.records.len();
    if k == 0 || fold >= k {
        return Err(DataError::Invalid(format!("fold {fold} is not in 0..{k}")));
    }
    if k > n {
        return Err(DataError::Invalid(format!("{k} folds requested for {n} records")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
    let mut in_test = vec![false; n];
    for &i in &order[lo..hi] {
        in_test[i] = true;
    }
    let pick = |want: bool| {
        (0..n)
            .filter(|&i| in_test[i] == want)
            .map(|i| manifest.records[i].clone())
            .collect()
    };
    Ok((manifest.with_records(pick(false)), manifest.with_records(pick(true))))
}
