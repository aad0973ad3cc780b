use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::tracks::PoseTrack;

/// A length-`T` window of one person's track, `data: [C, T, V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSegment {
    pub data: Tensor,
    pub video: String,
    pub person: u32,
    pub first_frame: usize,
}

impl PoseSegment {
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    /// Absolute frames covered by the window.
    pub fn frame_range(&self) -> Range<usize> {
        self.first_frame..self.first_frame + self.frames()
    }
}

/// Every length-`t` window at the given stride, channels `(x, y)`.
pub fn make_windows(track: &PoseTrack, t: usize, stride: usize) -> Result<Vec<PoseSegment>> {
    make_windows_with(track, t, stride, false)
}

/// As [`make_windows`]; `keep_confidence` appends the confidence channel.
pub fn make_windows_with(
    track: &PoseTrack,
    t: usize,
    stride: usize,
    keep_confidence: bool,
) -> Result<Vec<PoseSegment>> {
    if t == 0 || stride == 0 {
        return Err(Error::Invalid(format!(
            "window length and stride must be positive, got {t}, {stride}"
        )));
    }
    if track.len() < t {
        return Ok(Vec::new());
    }
    let v = track.joints();
    let c = if keep_confidence { 3 } else { 2 };
    let segments = (0..=track.len() - t)
        .step_by(stride)
        .map(|start| {
            let mut data = Tensor::zeros(&[c, t, v]);
            for dt in 0..t {
                for (j, kp) in track.frames[start + dt].iter().enumerate() {
                    for (ch, &value) in kp.iter().take(c).enumerate() {
                        data.set(&[ch, dt, j], value);
                    }
                }
            }
            PoseSegment {
                data,
                video: track.video.clone(),
                person: track.person,
                first_frame: track.start_frame + start,
            }
        })
        .collect();
    Ok(segments)
}

/// Segments plus per-video frame labels (evaluation only).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentDataset {
    pub segments: Vec<PoseSegment>,
    /// `labels[video][frame]`, 1 = anomalous. Its length fixes the video's frame count.
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl SegmentDataset {
    /// Windows every (already normalized) track. Video labels are the
    /// per-frame maximum over that video's tracks; frames no track covers
    /// are labelled normal.
    pub fn from_tracks(
        tracks: &[PoseTrack],
        t: usize,
        stride: usize,
        keep_confidence: bool,
    ) -> Result<Self> {
        let mut segments = Vec::new();
        for track in tracks {
            segments.extend(make_windows_with(track, t, stride, keep_confidence)?);
        }
        let mut labels: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for track in tracks {
            let entry = labels.entry(track.video.clone()).or_default();
            if entry.len() < track.end_frame() {
                entry.resize(track.end_frame(), 0);
            }
            if let Some(l) = &track.labels {
                for (k, &v) in l.iter().enumerate() {
                    entry[track.start_frame + k] = entry[track.start_frame + k].max(v);
                }
            }
        }
        Ok(Self { segments, labels })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// `[B, C, T, V]` batch of the selected segments.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        stack(indices.iter().map(|&i| &self.segments[i]))
    }

    pub fn frame_count(&self) -> usize {
        self.labels.values().map(Vec::len).sum()
    }
}

/// Stacks equally shaped segments into `[B, C, T, V]`.
pub fn stack<'a>(segments: impl IntoIterator<Item = &'a PoseSegment>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut b = 0;
    for s in segments {
        match &shape {
            None => shape = Some(s.data.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.data.shape() => {
                return Err(Error::Shape(format!(
                    "cannot stack {sh:?} with {:?}",
                    s.data.shape()
                )))
            }
            _ => {}
        }
        data.extend_from_slice(s.data.data());
        b += 1;
    }
    let shape = shape.ok_or_else(|| Error::Invalid("cannot stack zero segments".into()))?;
    let mut full = vec![b];
    full.extend(shape);
    Tensor::new(&full, data)
}
