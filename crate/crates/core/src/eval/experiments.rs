use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{
    add_noise, contaminate, normalize_keypoints, save_tracks, write_labels, DatasetManifest,
    ManifestFile, PoseTrack, Role, SegmentDataset, SynthConfig,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, ParamCount};
use crate::numerics::{derive_seed, AdamState, Rng, Var};
use crate::skeleton::SkeletonGraph;

use super::auc::{micro_auc, roc_curve, RocPoint};
use super::config::ExperimentConfig;
use super::scores::{csv_writer, frame_scores, score_segments, FrameScores, ScoreTable};

/// Seed streams; every random phase of a run draws from its own.
mod stream {
    pub const SYNTH: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const CONTAMINATE: u64 = 4;
    pub const NOISE: u64 = 1 << 16;
    pub const ZERO_TRAIN: u64 = 2 << 16;
}

/// Raw tracks of the synthetic benchmark, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkTracks {
    pub train: Vec<PoseTrack>,
    pub test: Vec<PoseTrack>,
    pub pool: Vec<PoseTrack>,
}

/// Windowed, normalized datasets ready for training and scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub train: SegmentDataset,
    pub test: SegmentDataset,
    pub pool: SegmentDataset,
}

pub fn synth_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkTracks> {
    let b = &cfg.benchmark;
    let base = SynthConfig {
        joints: cfg.flow.joints,
        ..b.synth.clone()
    };
    let mut rng = Rng::new(derive_seed(cfg.seed, stream::SYNTH));
    let train = SynthConfig {
        frames: b.train_frames,
        ..base.clone()
    }
    .normal(&mut rng, b.train_tracks, "train")?;
    let test_cfg = SynthConfig {
        frames: b.test_frames,
        kinds: b.test_kinds.clone(),
        onset: b.test_onset,
        ..base.clone()
    };
    let mut test = test_cfg.normal(&mut rng, b.test_normal_videos, "test-normal")?;
    test.extend(test_cfg.anomalous(&mut rng, b.test_anomalous_videos, "test-anomalous")?);
    let pool = SynthConfig {
        frames: b.pool_frames,
        onset: Some(0),
        ..base
    }
    .anomalous(&mut rng, b.pool_tracks, "pool")?;
    Ok(BenchmarkTracks { train, test, pool })
}

/// Writes `train.jsonl`, `test.jsonl`, `pool.jsonl`, `labels.csv` and
/// `manifest.json` into `dir`.
pub fn write_benchmark(
    dir: &Path,
    tracks: &BenchmarkTracks,
    cfg: &ExperimentConfig,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tracks(&dir.join("train.jsonl"), &tracks.train)?;
    save_tracks(&dir.join("test.jsonl"), &tracks.test)?;
    save_tracks(&dir.join("pool.jsonl"), &tracks.pool)?;
    let labels = SegmentDataset::from_tracks(&tracks.test, usize::MAX, 1, false)?.labels;
    write_labels(&dir.join("labels.csv"), &labels)?;
    let manifest = DatasetManifest {
        files: vec![
            ManifestFile {
                path: "train.jsonl".into(),
                role: Role::Train,
            },
            ManifestFile {
                path: "test.jsonl".into(),
                role: Role::Test,
            },
            ManifestFile {
                path: "pool.jsonl".into(),
                role: Role::AnomalousPool,
            },
        ],
        labels: Some("labels.csv".into()),
        generator: Some(serde_json::json!({
            "family": "synthetic-walkers",
            "seed": cfg.seed,
            "benchmark": cfg.benchmark,
        })),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Normalizes and windows tracks per the run configuration.
pub fn segment_tracks(tracks: &[PoseTrack], cfg: &ExperimentConfig) -> Result<SegmentDataset> {
    let normalized = tracks
        .iter()
        .map(normalize_keypoints)
        .collect::<Result<Vec<_>>>()?;
    SegmentDataset::from_tracks(
        &normalized,
        cfg.flow.frames,
        cfg.stride,
        cfg.keep_confidence,
    )
}

pub fn benchmark_datasets(tracks: &BenchmarkTracks, cfg: &ExperimentConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: segment_tracks(&tracks.train, cfg)?,
        test: segment_tracks(&tracks.test, cfg)?,
        pool: segment_tracks(&tracks.pool, cfg)?,
    })
}

/// Loads one role of a manifest. Labels from the manifest's CSV, when
/// given, replace those carried by the tracks.
pub fn load_role(
    manifest_path: &Path,
    role: Role,
    cfg: &ExperimentConfig,
) -> Result<SegmentDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let tracks = manifest.tracks(base, role, Some(cfg.flow.joints))?;
    let mut ds = segment_tracks(&tracks, cfg)?;
    if role == Role::Test {
        if let Some(labels) = manifest.label_table(base)? {
            ds.labels = labels;
        }
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_nll: f64,
    /// Updates dropped because they made a channel mixer singular.
    pub rejected_steps: usize,
}

pub struct TrainOutcome {
    pub model: FlowModel,
    pub losses: Vec<EpochLoss>,
}

pub fn graph_for(cfg: &ExperimentConfig) -> Result<SkeletonGraph> {
    SkeletonGraph::from_spec(&cfg.graph)
}

/// Adam on the mean NLL with actnorm data-init from the first batch.
pub fn train(cfg: &ExperimentConfig, data: &SegmentDataset) -> Result<TrainOutcome> {
    train_flow(cfg, &cfg.flow, data, derive_seed(cfg.seed, stream::INIT))
}

fn train_flow(
    cfg: &ExperimentConfig,
    flow: &FlowConfig,
    data: &SegmentDataset,
    init_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut model = FlowModel::new(flow.clone(), graph_for(cfg)?, init_seed)?;
    let mut order_rng = Rng::new(derive_seed(cfg.seed, stream::SHUFFLE));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order_rng.shuffle(&mut order);
    let first = &order[..cfg.batch_size.min(order.len())];
    model.data_init(&data.batch(first)?)?;

    let mut adam = AdamState::new(cfg.optimizer);
    let params = model.parameters();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            order_rng.shuffle(&mut order);
        }
        let (mut total, mut rejected) = (0.0, 0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |msg: String| Error::Diverged {
                epoch,
                batch: bi,
                msg,
            };
            let batch = Var::constant(data.batch(idx)?);
            let loss = model.nll(&batch).map_err(|e| diverged(e.to_string()))?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            params.iter().for_each(Var::zero_grad);
            loss.backward().map_err(|e| diverged(e.to_string()))?;
            if !model
                .apply_gradients(&mut adam)
                .map_err(|e| diverged(e.to_string()))?
            {
                rejected += 1;
            }
            total += value * idx.len() as f64;
        }
        losses.push(EpochLoss {
            epoch,
            mean_nll: total / data.len() as f64,
            rejected_steps: rejected,
        });
    }
    Ok(TrainOutcome { model, losses })
}

pub struct Evaluation {
    pub table: ScoreTable,
    pub frames: FrameScores,
    pub auc: f64,
}

pub fn evaluate(
    model: &FlowModel,
    test: &SegmentDataset,
    cfg: &ExperimentConfig,
) -> Result<Evaluation> {
    let table = score_segments(model, test, cfg.scoring.batch_size)?;
    let frames = frame_scores(&table, &test.labels, &cfg.scoring);
    let (s, l) = frames.flatten();
    let auc = micro_auc(&s, &l)?;
    Ok(Evaluation { table, frames, auc })
}

pub fn roc(eval: &Evaluation) -> Result<Vec<RocPoint>> {
    let (s, l) = eval.frames.flatten();
    roc_curve(&s, &l)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseRow {
    pub scale: f64,
    pub auc: f64,
}

/// AUC of a fixed model on test sets perturbed at each scale.
pub fn run_noise_robustness(
    model: &FlowModel,
    test: &SegmentDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<NoiseRow>> {
    cfg.noise_scales
        .iter()
        .enumerate()
        .map(|(i, &scale)| {
            let mut rng = Rng::new(derive_seed(cfg.seed, stream::NOISE + i as u64));
            let noisy = add_noise(test, scale, &mut rng)?;
            Ok(NoiseRow {
                scale,
                auc: evaluate(model, &noisy, cfg)?.auc,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContaminationRow {
    pub fraction: f64,
    pub replaced: usize,
    pub auc: f64,
}

/// Retrains on contaminated training sets. Every fraction starts from the
/// same initialization as a clean run, so fraction 0 reproduces it.
pub fn run_contamination(
    train: &SegmentDataset,
    pool: &SegmentDataset,
    test: &SegmentDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<ContaminationRow>> {
    cfg.contamination_fractions
        .iter()
        .map(|&fraction| {
            let mut rng = Rng::new(derive_seed(cfg.seed, stream::CONTAMINATE));
            let (mixed, manifest) = contaminate(train, &pool.segments, fraction, &mut rng)?;
            let model =
                train_flow(cfg, &cfg.flow, &mixed, derive_seed(cfg.seed, stream::INIT))?.model;
            Ok(ContaminationRow {
                fraction,
                replaced: manifest.replaced.len(),
                auc: evaluate(&model, test, cfg)?.auc,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroTrainRow {
    pub trial: usize,
    pub seed: u64,
    pub auc: f64,
}

/// Untrained models: random init with nonzero projections, actnorm
/// data-init on a random training batch, no gradient steps.
pub fn run_zero_training(
    train: &SegmentDataset,
    test: &SegmentDataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<ZeroTrainRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid(
            "zero-training needs segments for actnorm init".into(),
        ));
    }
    let flow = FlowConfig {
        projection_init_std: cfg.zero_train.projection_std,
        ..cfg.flow.clone()
    };
    let trial = |i: usize| -> Result<ZeroTrainRow> {
        let seed = derive_seed(cfg.seed, stream::ZERO_TRAIN + i as u64);
        let mut model = FlowModel::new(flow.clone(), graph_for(cfg)?, seed)?;
        let mut rng = Rng::new(derive_seed(seed, 0));
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        model.data_init(&train.batch(&order[..cfg.batch_size.min(order.len())])?)?;
        Ok(ZeroTrainRow {
            trial: i,
            seed,
            auc: evaluate(&model, test, cfg)?.auc,
        })
    };
    let trials = cfg.zero_train.trials;
    if cfg.zero_train.parallel {
        (0..trials).into_par_iter().map(trial).collect()
    } else {
        (0..trials).map(trial).collect()
    }
}

/// Per-layer trainable parameter counts of the configured architecture.
pub fn param_audit(cfg: &ExperimentConfig) -> Result<Vec<ParamCount>> {
    cfg.validate()?;
    Ok(FlowModel::new(cfg.flow.clone(), graph_for(cfg)?, 0)?.param_counts())
}

/// Writes rows as CSV with the given header.
pub fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path, header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
