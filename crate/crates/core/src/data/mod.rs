//! Pose-track ingestion, windowing, synthetic motion and perturbations.

mod manifest;
mod perturb;
mod segments;
mod synth;
mod tracks;

pub use manifest::{read_labels, write_labels, DatasetManifest, ManifestFile, Role};
pub use perturb::{add_noise, contaminate, ContaminationManifest};
pub use segments::{make_windows, make_windows_with, stack, PoseSegment, SegmentDataset};
pub use synth::{synth_anomalous, synth_normal, AnomalyKind, SynthConfig};
pub use tracks::{
    denormalize_keypoints, load_tracks, normalize_keypoints, save_tracks, PoseTrack, Provenance,
};
