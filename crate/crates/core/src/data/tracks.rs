use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a generated track came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub family: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset: Option<usize>,
}

/// One tracked person: `frames[i][j] = [x, y, confidence]` for frame
/// `start_frame + i` and joint `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseTrack {
    pub video: String,
    pub person: u32,
    pub start_frame: usize,
    pub width: f64,
    pub height: f64,
    pub frames: Vec<Vec<[f64; 3]>>,
    /// Absolute frame numbers as emitted by a tracker; must be contiguous.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_ids: Option<Vec<usize>>,
    /// Per-frame ground truth (1 = anomalous), aligned with `frames`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl PoseTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.frames.len()
    }

    /// Checks the record against its invariants; `joints` fixes the expected V.
    pub fn validate(&self, joints: Option<usize>) -> std::result::Result<(), String> {
        let want = joints.unwrap_or_else(|| self.joints());
        for (i, f) in self.frames.iter().enumerate() {
            if f.len() != want {
                return Err(format!(
                    "frame {i} has {} keypoints, expected {want}",
                    f.len()
                ));
            }
            for (j, &[x, y, c]) in f.iter().enumerate() {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(format!("frame {i} joint {j}: non-finite coordinate"));
                }
                if !(0.0..=1.0).contains(&c) {
                    return Err(format!(
                        "frame {i} joint {j}: confidence {c} outside [0, 1]"
                    ));
                }
            }
        }
        if let Some(ids) = &self.frame_ids {
            if ids.len() != self.frames.len() {
                return Err(format!(
                    "{} frame_ids for {} frames",
                    ids.len(),
                    self.frames.len()
                ));
            }
            if let Some(k) = ids
                .iter()
                .enumerate()
                .position(|(k, &id)| id != self.start_frame + k)
            {
                return Err(format!(
                    "non-contiguous frames: frame_ids[{k}] = {}, expected {}",
                    ids[k],
                    self.start_frame + k
                ));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.frames.len() {
                return Err(format!(
                    "{} labels for {} frames",
                    l.len(),
                    self.frames.len()
                ));
            }
            if l.iter().any(|&v| v > 1) {
                return Err("labels must be 0 or 1".into());
            }
        }
        if !(self.width.is_finite() && self.height.is_finite()) {
            return Err("non-finite image size".into());
        }
        Ok(())
    }
}

/// Reads line-delimited JSON tracks. Blank lines are skipped; every other
/// line must be a valid record with `joints` keypoints per frame.
pub fn load_tracks(path: &Path, joints: Option<usize>) -> Result<Vec<PoseTrack>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tracks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let track: PoseTrack = serde_json::from_str(&line).map_err(|e| record(e.to_string()))?;
        track
            .validate(joints)
            .map_err(|m| record(format!("track {}/{}: {m}", track.video, track.person)))?;
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn save_tracks(path: &Path, tracks: &[PoseTrack]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tracks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pixel coordinates to `[-1, 1]`: `x → 2x/W − 1`, `y → 2y/H − 1`.
/// Confidences are carried through unchanged.
pub fn normalize_keypoints(track: &PoseTrack) -> Result<PoseTrack> {
    let (w, h) = image_dims(track)?;
    Ok(map_coords(track, |x, y| {
        (2.0 * (x / w) - 1.0, 2.0 * (y / h) - 1.0)
    }))
}

/// Inverse of [`normalize_keypoints`].
pub fn denormalize_keypoints(track: &PoseTrack) -> Result<PoseTrack> {
    let (w, h) = image_dims(track)?;
    Ok(map_coords(track, |x, y| {
        ((x + 1.0) / 2.0 * w, (y + 1.0) / 2.0 * h)
    }))
}

fn image_dims(track: &PoseTrack) -> Result<(f64, f64)> {
    if track.width > 0.0 && track.height > 0.0 {
        Ok((track.width, track.height))
    } else {
        Err(Error::Invalid(format!(
            "track {}/{}: image dims must be positive, got {}x{}",
            track.video, track.person, track.width, track.height
        )))
    }
}

fn map_coords(track: &PoseTrack, f: impl Fn(f64, f64) -> (f64, f64)) -> PoseTrack {
    let frames = track
        .frames
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&[x, y, c]| {
                    let (u, v) = f(x, y);
                    [u, v, c]
                })
                .collect()
        })
        .collect();
    PoseTrack {
        frames,
        ..track.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn track(frames: usize, joints: usize) -> PoseTrack {
        PoseTrack {
            video: "v1".into(),
            person: 3,
            start_frame: 10,
            width: 640.0,
            height: 480.0,
            frames: (0..frames)
                .map(|t| {
                    (0..joints)
                        .map(|j| [t as f64 + 1.0, j as f64 * 2.0, 0.9])
                        .collect()
                })
                .collect(),
            frame_ids: None,
            labels: None,
            provenance: None,
        }
    }

    fn write(dir: &Path, lines: &[String]) -> std::path::PathBuf {
        let p = dir.join("tracks.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_no_tracks() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[]);
        assert!(load_tracks(&p, Some(18)).unwrap().is_empty());
    }

    #[test]
    fn one_track_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        save_tracks(&p, &[track(30, 18)]).unwrap();
        let back = load_tracks(&p, Some(18)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].len(), 30);
        assert_eq!(back[0], track(30, 18));
    }

    #[test]
    fn wrong_joint_count_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_string(&track(5, 18)).unwrap();
        let mut bad = track(5, 17);
        bad.video = "cam7".into();
        let p = write(
            dir.path(),
            &[good, String::new(), serde_json::to_string(&bad).unwrap()],
        );
        match load_tracks(&p, Some(18)) {
            Err(Error::Record { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("cam7/3"), "{msg}");
                assert!(msg.contains("17 keypoints"), "{msg}");
            }
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_and_bad_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &[r#"{"video":"a","person":0,"start_frame":0,"width":1,"frames":[]}"#.into()],
        );
        let err = load_tracks(&p, None).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");

        let mut t = track(3, 2);
        t.frames[1][0][2] = 1.5;
        assert!(t.validate(None).unwrap_err().contains("confidence"));

        let mut t = track(3, 2);
        t.frame_ids = Some(vec![10, 11, 13]);
        assert!(t.validate(None).unwrap_err().contains("non-contiguous"));
        t.frame_ids = Some(vec![10, 11, 12]);
        assert!(t.validate(None).is_ok());
    }

    #[test]
    fn normalization_examples() {
        let mut t = track(1, 3);
        t.frames[0] = vec![[320.0, 240.0, 0.5], [640.0, 480.0, 1.0], [160.0, 0.0, 0.0]];
        let n = normalize_keypoints(&t).unwrap();
        assert_eq!(n.frames[0][0], [0.0, 0.0, 0.5]);
        assert_eq!(n.frames[0][1], [1.0, 1.0, 1.0]);
        assert_eq!(n.frames[0][2], [-0.5, -1.0, 0.0]);
        let back = denormalize_keypoints(&n).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn zero_image_dims_rejected() {
        let mut t = track(2, 2);
        t.width = 0.0;
        assert!(normalize_keypoints(&t).is_err());
    }
}
