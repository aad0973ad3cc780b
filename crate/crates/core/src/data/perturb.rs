use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

use super::segments::{PoseSegment, SegmentDataset};

/// Adds `S·u`, `u ~ N(0, 1)` drawn fresh per coordinate, to the `x` and `y`
/// channels of every segment. A confidence channel is left alone.
pub fn add_noise(dataset: &SegmentDataset, scale: f64, rng: &mut Rng) -> Result<SegmentDataset> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::Invalid(format!(
            "noise scale must be finite and >= 0, got {scale}"
        )));
    }
    let mut out = dataset.clone();
    if scale == 0.0 {
        return Ok(out);
    }
    for seg in &mut out.segments {
        let plane = seg.data.shape()[1] * seg.data.shape()[2];
        for v in &mut seg.data.data_mut()[..2 * plane] {
            *v += scale * rng.normal();
        }
    }
    Ok(out)
}

/// Which training segments were swapped for anomalous ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContaminationManifest {
    pub fraction: f64,
    /// `(training index, pool index)`, sorted by training index.
    pub replaced: Vec<(usize, usize)>,
}

/// Replaces `⌊fraction·n⌋` distinct random training segments with distinct
/// random segments from `pool`.
pub fn contaminate(
    train: &SegmentDataset,
    pool: &[PoseSegment],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(SegmentDataset, ContaminationManifest)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Invalid(format!(
            "contamination fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * train.len() as f64).floor() as usize;
    if count > pool.len() {
        return Err(Error::Invalid(format!(
            "contamination needs {count} anomalous segments, pool has {}",
            pool.len()
        )));
    }
    let mut out = train.clone();
    let mut manifest = ContaminationManifest {
        fraction,
        replaced: Vec::with_capacity(count),
    };
    if count == 0 {
        return Ok((out, manifest));
    }
    let mut targets: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut targets);
    let mut sources: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut sources);
    let mut pairs: Vec<(usize, usize)> = targets.into_iter().zip(sources).take(count).collect();
    pairs.sort_unstable();
    for &(i, j) in &pairs {
        if pool[j].data.shape() != train.segments[i].data.shape() {
            return Err(Error::Shape(format!(
                "pool segment {j} has shape {:?}, training segments {:?}",
                pool[j].data.shape(),
                train.segments[i].data.shape()
            )));
        }
        out.segments[i] = pool[j].clone();
    }
    manifest.replaced = pairs;
    Ok((out, manifest))
}
