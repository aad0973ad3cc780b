use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use daflow::data::{Role, SegmentDataset};
use daflow::eval::{
    benchmark_datasets, evaluate, frame_scores, load_role, param_audit, roc, run_contamination,
    run_noise_robustness, run_zero_training, score_segments, synth_benchmark, train,
    write_benchmark, write_frame_scores, write_rows, write_score_table, ExperimentConfig,
    FrameScores, Paths, ScoreTable,
};
use daflow::flow::{Checkpoint, FlowModel};
use daflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "daflow",
    version,
    about = "Anomaly scoring for pose sequences with a graph-conditioned normalizing flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (tracks, labels, manifest).
    Synth(Common),
    /// Train a flow on the manifest's training tracks.
    Train(Common),
    /// Write segment and frame score tables for the test tracks.
    Score(Common),
    /// Score the test tracks and report micro-AUC and the ROC curve.
    Eval(Common),
    /// AUC of a trained model under Gaussian keypoint noise.
    Noise(Common),
    /// Retrain with anomalous segments mixed into the training set.
    Contaminate(Common),
    /// AUC of untrained, randomly initialized models.
    ZeroTrain(Common),
    /// Trainable parameter counts per step and layer.
    Params(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to write (train) or read (score, eval, noise).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated noise scales.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Comma-separated contamination fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Run zero-training trials in parallel.
    #[arg(long)]
    parallel: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = &self.scales {
            cfg.noise_scales = v.clone();
        }
        if let Some(v) = &self.fractions {
            cfg.contamination_fractions = v.clone();
        }
        if let Some(v) = self.trials {
            cfg.zero_train.trials = v;
        }
        cfg.zero_train.parallel |= self.parallel;
        for (flag, path) in [
            (&self.data, &mut cfg.paths.data),
            (&self.out, &mut cfg.paths.out_dir),
            (&self.checkpoint, &mut cfg.paths.checkpoint),
        ] {
            if flag.is_some() {
                path.clone_from(flag);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Invalid(format!("missing --{flag}")))
}

fn out_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = require(&cfg.paths.out_dir, "out")?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

/// Loads a checkpoint and adopts its architecture into the run config.
fn load_model(cfg: &mut ExperimentConfig) -> Result<FlowModel> {
    let model = FlowModel::load(require(&cfg.paths.checkpoint, "checkpoint")?)?;
    cfg.flow = model.config().clone();
    cfg.graph = model.graph().spec();
    cfg.validate()?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.config()?;
            let dir = out_dir(&cfg)?;
            let tracks = synth_benchmark(&cfg)?;
            write_benchmark(dir, &tracks, &cfg)?;
            let ds = benchmark_datasets(&tracks, &cfg)?;
            println!("train_segments\t{}", ds.train.len());
            println!("test_frames\t{}", ds.test.frame_count());
            println!("pool_segments\t{}", ds.pool.len());
        }
        Command::Train(c) => {
            let cfg = c.config()?;
            let dir = out_dir(&cfg)?;
            let data = load_role(require(&cfg.paths.data, "data")?, Role::Train, &cfg)?;
            let outcome = train(&cfg, &data)?;
            let ckpt_path = cfg
                .paths
                .checkpoint
                .clone()
                .unwrap_or_else(|| dir.join("checkpoint.json"));
            // paths are left out so reruns elsewhere give identical bytes
            let echoed = ExperimentConfig {
                paths: Paths::default(),
                ..cfg.clone()
            };
            let ckpt = Checkpoint {
                run_config: Some(echoed.to_json_value()),
                ..outcome.model.to_checkpoint()
            };
            ckpt.save(&ckpt_path)?;
            write_rows(
                &dir.join("loss.csv"),
                &["epoch", "mean_nll", "rejected_steps"],
                &outcome.losses,
            )?;
            for l in &outcome.losses {
                println!("epoch\t{}\t{}", l.epoch, l.mean_nll);
            }
        }
        Command::Score(c) => {
            let mut cfg = c.config()?;
            let model = load_model(&mut cfg)?;
            let dir = out_dir(&cfg)?;
            let test = load_role(require(&cfg.paths.data, "data")?, Role::Test, &cfg)?;
            let (table, frames) = score_only(&model, &test, &cfg)?;
            write_score_table(&dir.join("segment_scores.csv"), &table)?;
            write_frame_scores(&dir.join("frame_scores.csv"), &frames)?;
        }
        Command::Eval(c) => {
            let mut cfg = c.config()?;
            let model = load_model(&mut cfg)?;
            let dir = out_dir(&cfg)?;
            let test = load_role(require(&cfg.paths.data, "data")?, Role::Test, &cfg)?;
            let e = evaluate(&model, &test, &cfg)?;
            write_score_table(&dir.join("segment_scores.csv"), &e.table)?;
            write_frame_scores(&dir.join("frame_scores.csv"), &e.frames)?;
            write_rows(
                &dir.join("roc.csv"),
                &["fpr", "tpr", "threshold"],
                &roc(&e)?,
            )?;
            write_rows(
                &dir.join("auc.csv"),
                &["metric", "value"],
                &[("micro_auc", e.auc)],
            )?;
            println!("micro_auc\t{}", e.auc);
        }
        Command::Noise(c) => {
            let mut cfg = c.config()?;
            let model = load_model(&mut cfg)?;
            let dir = out_dir(&cfg)?;
            let test = load_role(require(&cfg.paths.data, "data")?, Role::Test, &cfg)?;
            let rows = run_noise_robustness(&model, &test, &cfg)?;
            write_rows(&dir.join("noise.csv"), &["scale", "auc"], &rows)?;
            for r in &rows {
                println!("noise\t{}\t{}", r.scale, r.auc);
            }
        }
        Command::Contaminate(c) => {
            let cfg = c.config()?;
            let dir = out_dir(&cfg)?;
            let manifest = require(&cfg.paths.data, "data")?;
            let train_ds = load_role(manifest, Role::Train, &cfg)?;
            let pool = load_role(manifest, Role::AnomalousPool, &cfg)?;
            let test = load_role(manifest, Role::Test, &cfg)?;
            let rows = run_contamination(&train_ds, &pool, &test, &cfg)?;
            write_rows(
                &dir.join("contamination.csv"),
                &["fraction", "replaced", "auc"],
                &rows,
            )?;
            for r in &rows {
                println!("contamination\t{}\t{}", r.fraction, r.auc);
            }
        }
        Command::ZeroTrain(c) => {
            let cfg = c.config()?;
            let dir = out_dir(&cfg)?;
            let manifest = require(&cfg.paths.data, "data")?;
            let train_ds = load_role(manifest, Role::Train, &cfg)?;
            let test = load_role(manifest, Role::Test, &cfg)?;
            let rows = run_zero_training(&train_ds, &test, &cfg)?;
            write_rows(
                &dir.join("zero_train.csv"),
                &["trial", "seed", "auc"],
                &rows,
            )?;
            let mean = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len().max(1) as f64;
            println!("zero_train_mean_auc\t{mean}");
        }
        Command::Params(c) => {
            let cfg = c.config()?;
            let counts = param_audit(&cfg)?;
            if let Some(dir) = &cfg.paths.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_rows(
                    &dir.join("params.csv"),
                    &["step", "layer", "count"],
                    &counts,
                )?;
            }
            println!("step\tlayer\tcount");
            for p in &counts {
                println!("{}\t{}\t{}", p.step, p.layer, p.count);
            }
            println!("total\t\t{}", counts.iter().map(|p| p.count).sum::<usize>());
        }
    }
    Ok(())
}

/// Scoring without AUC, so test sets with a single class still work.
fn score_only(
    model: &FlowModel,
    test: &SegmentDataset,
    cfg: &ExperimentConfig,
) -> Result<(ScoreTable, FrameScores)> {
    let table = score_segments(model, test, cfg.scoring.batch_size)?;
    let frames = frame_scores(&table, &test.labels, &cfg.scoring);
    Ok((table, frames))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "error\tusage\t{}",
                msg.lines()
                    .next()
                    .unwrap_or("")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
