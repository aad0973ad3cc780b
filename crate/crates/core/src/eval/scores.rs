use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{stack, SegmentDataset};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// How overlapping windows of the same person combine on a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub aggregation: Aggregation,
    /// Centered moving-average window over each video's frame scores; 0 or 1 disables it.
    pub smoothing: usize,
    /// Segments per forward pass.
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            smoothing: 0,
            batch_size: 256,
        }
    }
}

/// Log-likelihood of one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video: String,
    pub person: u32,
    pub first_frame: usize,
    pub frames: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

/// Per-video frame scores plus the labels they are evaluated against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameScores {
    pub aggregation: Aggregation,
    pub smoothing: usize,
    pub scores: BTreeMap<String, Vec<f64>>,
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl FrameScores {
    /// All frames of all videos, video by video in name order.
    pub fn flatten(&self) -> (Vec<f64>, Vec<u8>) {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (video, scores) in &self.scores {
            s.extend_from_slice(scores);
            match self.labels.get(video) {
                Some(lab) => l.extend(
                    lab.iter()
                        .copied()
                        .chain(std::iter::repeat(0))
                        .take(scores.len()),
                ),
                None => l.extend(std::iter::repeat_n(0, scores.len())),
            }
        }
        (s, l)
    }
}

/// One log-likelihood per segment, computed in batches without a graph.
pub fn score_segments(
    model: &FlowModel,
    dataset: &SegmentDataset,
    batch_size: usize,
) -> Result<ScoreTable> {
    let batch_size = batch_size.max(1);
    let mut rows = Vec::with_capacity(dataset.len());
    for chunk in dataset.segments.chunks(batch_size) {
        let lp = model.log_prob(&stack(chunk)?)?;
        rows.extend(chunk.iter().zip(lp).map(|(s, log_prob)| ScoreRow {
            video: s.video.clone(),
            person: s.person,
            first_frame: s.first_frame,
            frames: s.frames(),
            log_prob,
        }));
    }
    Ok(ScoreTable { rows })
}

/// Frame scores: each segment's value spreads over the frames it covers,
/// windows of one person combine by `aggregation`, persons combine by
/// minimum. Frames nobody covers take the video's highest frame score, or
/// the highest score anywhere if the video has none. `labels` fixes each
/// video's frame count; videos only present in the table end at their last
/// covered frame.
pub fn frame_scores(
    table: &ScoreTable,
    labels: &BTreeMap<String, Vec<u8>>,
    config: &ScoringConfig,
) -> FrameScores {
    // (video, person) -> frame -> values
    let mut per_person: BTreeMap<(&str, u32), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &table.rows {
        let frames = per_person.entry((r.video.as_str(), r.person)).or_default();
        for f in r.first_frame..r.first_frame + r.frames {
            frames.entry(f).or_default().push(r.log_prob);
        }
    }
    let mut lengths: BTreeMap<String, usize> =
        labels.iter().map(|(v, l)| (v.clone(), l.len())).collect();
    for r in &table.rows {
        let len = lengths.entry(r.video.clone()).or_insert(0);
        if !labels.contains_key(&r.video) {
            *len = (*len).max(r.first_frame + r.frames);
        }
    }
    let mut partial: BTreeMap<String, Vec<Option<f64>>> = lengths
        .iter()
        .map(|(v, &n)| (v.clone(), vec![None; n]))
        .collect();
    for ((video, _), frames) in &per_person {
        let slots = partial
            .get_mut(*video)
            .expect("every scored video has a length");
        for (&f, values) in frames {
            if f >= slots.len() {
                continue;
            }
            let v = combine(values, config.aggregation);
            slots[f] = Some(slots[f].map_or(v, |cur: f64| cur.min(v)));
        }
    }
    let global_max = partial
        .values()
        .flatten()
        .flatten()
        .copied()
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let scores = partial
        .into_iter()
        .map(|(video, slots)| {
            let video_max = slots
                .iter()
                .flatten()
                .copied()
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
            let fill = video_max.or(global_max).unwrap_or(0.0);
            let filled: Vec<f64> = slots.into_iter().map(|s| s.unwrap_or(fill)).collect();
            (video, smooth(&filled, config.smoothing))
        })
        .collect();
    FrameScores {
        aggregation: config.aggregation,
        smoothing: config.smoothing,
        scores,
        labels: labels.clone(),
    }
}

fn combine(values: &[f64], agg: Aggregation) -> f64 {
    match agg {
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Centered moving average, window truncated at the ends.
fn smooth(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return x.to_vec();
    }
    let half = window / 2;
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// CSV writer that emits `header` even when no rows follow.
pub(crate) fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

pub fn write_score_table(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut w = csv_writer(
        path,
        &["video", "person", "first_frame", "frames", "log_prob"],
    )?;
    for r in &table.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct FrameRow<'a> {
    video: &'a str,
    frame: usize,
    score: f64,
    label: u8,
}

pub fn write_frame_scores(path: &Path, frames: &FrameScores) -> Result<()> {
    let mut w = csv_writer(path, &["video", "frame", "score", "label"])?;
    for (video, scores) in &frames.scores {
        let labels = frames.labels.get(video);
        for (frame, &score) in scores.iter().enumerate() {
            let label = labels.and_then(|l| l.get(frame)).copied().unwrap_or(0);
            w.serialize(FrameRow {
                video,
                frame,
                score,
                label,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PoseSegment;
    use crate::flow::FlowConfig;
    use crate::numerics::Tensor;
    use crate::skeleton::SkeletonGraph;

    fn row(video: &str, person: u32, first: usize, frames: usize, v: f64) -> ScoreRow {
        ScoreRow {
            video: video.into(),
            person,
            first_frame: first,
            frames,
            log_prob: v,
        }
    }

    fn labels(video: &str, n: usize) -> BTreeMap<String, Vec<u8>> {
        [(video.to_string(), vec![0; n])].into_iter().collect()
    }

    #[test]
    fn single_segment_broadcasts() {
        let t = ScoreTable {
            rows: vec![row("a", 0, 0, 4, -7.0)],
        };
        let f = frame_scores(&t, &labels("a", 4), &ScoringConfig::default());
        assert_eq!(f.scores["a"], vec![-7.0; 4]);
    }

    #[test]
    fn persons_combine_by_minimum() {
        let t = ScoreTable {
            rows: vec![row("a", 0, 0, 1, -5.0), row("a", 1, 0, 1, -2.0)],
        };
        let f = frame_scores(&t, &labels("a", 1), &ScoringConfig::default());
        assert_eq!(f.scores["a"], vec![-5.0]);
    }

    #[test]
    fn overlapping_windows_average() {
        let t = ScoreTable {
            rows: vec![row("a", 0, 0, 3, -4.0), row("a", 0, 1, 3, -6.0)],
        };
        let f = frame_scores(&t, &labels("a", 4), &ScoringConfig::default());
        assert_eq!(f.scores["a"], vec![-4.0, -5.0, -5.0, -6.0]);
        let min = ScoringConfig {
            aggregation: Aggregation::Min,
            ..ScoringConfig::default()
        };
        assert_eq!(
            frame_scores(&t, &labels("a", 4), &min).scores["a"],
            vec![-4.0, -6.0, -6.0, -6.0]
        );
    }

    #[test]
    fn empty_frames_take_video_maximum() {
        let t = ScoreTable {
            rows: vec![
                row("a", 0, 1, 1, -3.0),
                row("a", 0, 3, 1, -1.0),
                row("b", 0, 0, 1, -2.0),
            ],
        };
        let mut l = labels("a", 6);
        l.insert("c".into(), vec![0, 1]);
        let f = frame_scores(&t, &l, &ScoringConfig::default());
        assert_eq!(f.scores["a"], vec![-1.0, -3.0, -1.0, -1.0, -1.0, -1.0]);
        // unlabelled video ends at its last covered frame
        assert_eq!(f.scores["b"], vec![-2.0]);
        // a video with no detections gets the overall maximum
        assert_eq!(f.scores["c"], vec![-1.0, -1.0]);
        let (s, lab) = f.flatten();
        assert_eq!(s.len(), 9);
        assert_eq!(lab, vec![0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[0.0, 3.0, 6.0, 3.0], 3), vec![1.5, 3.0, 4.0, 4.5]);
        assert_eq!(smooth(&[1.0, 2.0], 0), vec![1.0, 2.0]);
    }

    #[test]
    fn identity_model_scores_prior_mean_segment() {
        let cfg = FlowConfig {
            frames: 4,
            steps: 2,
            ..FlowConfig::default()
        };
        let m = FlowModel::identity(cfg, SkeletonGraph::coco18(), 1).unwrap();
        let empty = score_segments(&m, &SegmentDataset::default(), 8).unwrap();
        assert!(empty.rows.is_empty());
        let ds = SegmentDataset {
            segments: vec![PoseSegment {
                data: Tensor::full(&[2, 4, 18], 3.0),
                video: "v".into(),
                person: 0,
                first_frame: 5,
            }],
            labels: BTreeMap::new(),
        };
        let t = score_segments(&m, &ds, 8).unwrap();
        let d = 2.0 * 4.0 * 18.0;
        assert!((t.rows[0].log_prob + d / 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert_eq!(t, score_segments(&m, &ds, 1).unwrap());
    }

    #[test]
    fn csv_outputs_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let t = ScoreTable {
            rows: vec![row("a", 0, 0, 2, -1.5)],
        };
        let p = dir.path().join("s.csv");
        write_score_table(&p, &t).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "video,person,first_frame,frames,log_prob\na,0,0,2,-1.5\n"
        );
        let f = frame_scores(&t, &labels("a", 2), &ScoringConfig::default());
        let p = dir.path().join("f.csv");
        write_frame_scores(&p, &f).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "video,frame,score,label\na,0,-1.5,0\na,1,-1.5,0\n"
        );
    }
}
