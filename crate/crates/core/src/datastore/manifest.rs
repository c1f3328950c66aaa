//! Dataset manifest: one CSV row per recording file.

use std::path::Path;

use rfssl_numerics::Exec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::npy::read_npy;
use crate::error::{Error, Result};
use crate::sigsynth::{Modulation, Recording, RecordingMeta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Path relative to the manifest's directory.
    pub path: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn new(id: usize, path: String, meta: &RecordingMeta) -> Self {
        ManifestEntry {
            id,
            path,
            azimuth_deg: meta.azimuth_deg,
            elevation_deg: meta.elevation_deg,
            modulation: meta.modulation,
            snr_db: meta.snr_db,
            seed: meta.seed,
        }
    }

    pub fn meta(&self) -> RecordingMeta {
        RecordingMeta {
            azimuth_deg: self.azimuth_deg,
            elevation_deg: self.elevation_deg,
            modulation: self.modulation,
            snr_db: self.snr_db,
            seed: self.seed,
        }
    }
}

/// Recording ids are the row positions `0..n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.csv";

    pub fn from_metas(metas: impl IntoIterator<Item = RecordingMeta>) -> Self {
        Manifest {
            entries: metas
                .into_iter()
                .enumerate()
                .map(|(i, m)| ManifestEntry::new(i, crate::sigsynth::recording_file_name(i), &m))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.into_inner().map_err(|e| Error::data(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::data(format!("{}: row {i} has id {}", path.display(), e.id)));
            }
        }
        Ok(Manifest { entries })
    }

    /// SHA-256 of the CSV serialization, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex_digest(&self.to_csv()?))
    }

    /// Loads every listed recording from `dir`, checking shapes agree.
    pub fn load_recordings(&self, dir: &Path, exec: Exec) -> Result<Vec<Recording>> {
        let loaded: Vec<Result<Recording>> = exec.map(self.entries.len(), |i| {
            let e = &self.entries[i];
            let iq = read_npy(&dir.join(&e.path))?;
            Ok(Recording { iq, meta: e.meta() })
        });
        let recs = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        if let Some(first) = recs.first() {
            if let Some(bad) = recs.iter().position(|r| r.iq.rows() != first.iq.rows()) {
                return Err(Error::data(format!(
                    "recording {bad} has {} antennas, expected {}",
                    recs[bad].iq.rows(),
                    first.iq.rows()
                )));
            }
        }
        Ok(recs)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
