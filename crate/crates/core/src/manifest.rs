//! JSON-lines scene manifests. Paths inside a manifest are relative to the
//! manifest file's directory.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::MultichannelWaveform;
use crate::error::{Error, Result};
use crate::room::RoomScenario;

/// Scene geometry plus the overlap ratio of the mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    #[serde(flatten)]
    pub room: RoomScenario,
    pub overlap_ratio: f64,
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mix_path: String,
    pub image_paths: Vec<String>,
    pub scenario: SceneInfo,
    pub seed: u64,
}

/// A loaded manifest and the directory its paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base_dir: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            base_dir: base_dir.into(),
            entries,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (k, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Manifest {
                path: path.to_path_buf(),
                line: k + 1,
                message,
            };
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if !seen.insert(entry.id.clone()) {
                return Err(bad(format!("duplicate id {:?}", entry.id)));
            }
            entries.push(entry);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mixture and per-speaker images of entry `i`.
    pub fn load(&self, i: usize) -> Result<(MultichannelWaveform, Vec<MultichannelWaveform>)> {
        let e = &self.entries[i];
        let mix = MultichannelWaveform::read_wav(self.resolve(&e.mix_path))?;
        let images = e
            .image_paths
            .iter()
            .map(|p| MultichannelWaveform::read_wav(self.resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        Ok((mix, images))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            mix_path: format!("{id}/mix.wav"),
            image_paths: vec![format!("{id}/spk1.wav"), format!("{id}/spk2.wav")],
            scenario: SceneInfo {
                room: RoomScenario {
                    room_dims: [5.0, 4.0, 3.0],
                    rt60: 0.3,
                    array_center: [2.5, 2.0, 1.5],
                    mic_positions: vec![[2.5, 2.0, 1.5]],
                    speaker_positions: vec![[1.0, 1.0, 1.5], [4.0, 3.0, 1.5]],
                    angular_difference: 90.0,
                },
                overlap_ratio: 0.5,
            },
            seed: 7,
        }
    }

    #[test]
    fn round_trip_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest::new(dir.path(), vec![entry("a"), entry("b")]);
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.resolve("a/mix.wav"), dir.path().join("a/mix.wav"));
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.contains("\"overlap_ratio\":0.5"));
        assert!(line.contains("\"rt60\":0.3"));
    }

    #[test]
    fn duplicate_ids_and_bad_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        Manifest::new(dir.path(), vec![entry("a"), entry("a")]).write(&path).unwrap();
        match Manifest::read(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(Manifest::read(&path), Err(Error::Manifest { line: 1, .. })));
    }
}
