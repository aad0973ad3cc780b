use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tracks::{load_tracks, PoseTrack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
    /// Anomalous segments available for contamination.
    AnomalousPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    /// Track file, relative to the manifest's directory.
    pub path: String,
    pub role: Role,
}

/// Lists the track files of a dataset and their roles. Frame labels come
/// from the optional CSV (`video,frame,label`) or, failing that, from the
/// tracks' own `labels` fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub files: Vec<ManifestFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Free-form description of how the data was produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads and concatenates every file with the given role.
    pub fn tracks(&self, base: &Path, role: Role, joints: Option<usize>) -> Result<Vec<PoseTrack>> {
        let mut out = Vec::new();
        for f in self.files.iter().filter(|f| f.role == role) {
            out.extend(load_tracks(&resolve(base, &f.path), joints)?);
        }
        Ok(out)
    }

    pub fn label_table(&self, base: &Path) -> Result<Option<BTreeMap<String, Vec<u8>>>> {
        self.labels
            .as_ref()
            .map(|p| read_labels(&resolve(base, p)))
            .transpose()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    video: String,
    frame: usize,
    label: u8,
}

/// Reads `video,frame,label` rows. Frames not listed are normal; each
/// video's length is one past its largest listed frame.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    })?;
    let mut out: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        if row.label > 1 {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: i + 2,
                msg: format!("label must be 0 or 1, got {}", row.label),
            });
        }
        let v = out.entry(row.video).or_default();
        if v.len() <= row.frame {
            v.resize(row.frame + 1, 0);
        }
        v[row.frame] = row.label;
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, Vec<u8>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (video, l) in labels {
        for (frame, &label) in l.iter().enumerate() {
            w.serialize(LabelRow {
                video: video.clone(),
                frame,
                label,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_normal;
    use crate::data::tracks::save_tracks;
    use crate::numerics::Rng;

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let mut l = BTreeMap::new();
        l.insert("a".to_string(), vec![0, 1, 1]);
        l.insert("b".to_string(), vec![0]);
        write_labels(&p, &l).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("video,frame,label\n"));
        assert_eq!(read_labels(&p).unwrap(), l);
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "video,frame,label\na,0,0\na,1,2\n").unwrap();
        assert!(matches!(
            read_labels(&p),
            Err(Error::Record { line: 3, .. })
        ));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = synth_normal(&mut Rng::new(1), 2, 5, 18).unwrap();
        save_tracks(&dir.path().join("train.jsonl"), &tracks).unwrap();
        save_tracks(&dir.path().join("test.jsonl"), &tracks[..1]).unwrap();
        let m = DatasetManifest {
            files: vec![
                ManifestFile {
                    path: "train.jsonl".into(),
                    role: Role::Train,
                },
                ManifestFile {
                    path: "test.jsonl".into(),
                    role: Role::Test,
                },
            ],
            labels: None,
            generator: None,
        };
        let mp = dir.path().join("manifest.json");
        m.save(&mp).unwrap();
        let back = DatasetManifest::load(&mp).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.tracks(dir.path(), Role::Train, Some(18)).unwrap(),
            tracks
        );
        assert_eq!(
            back.tracks(dir.path(), Role::Test, Some(18)).unwrap().len(),
            1
        );
        assert!(back
            .tracks(dir.path(), Role::AnomalousPool, Some(18))
            .unwrap()
            .is_empty());
        assert!(back.label_table(dir.path()).unwrap().is_none());
    }
}
