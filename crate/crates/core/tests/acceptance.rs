//! Primary acceptance criteria. Criteria run one after another inside a
//! single test so the wall-clock budgets are not skewed by sibling tests;
//! each prints one PASS/FAIL line straight to stdout.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use daflow::attention::{DamParams, Pooling};
use daflow::eval::{
    benchmark_datasets, evaluate, micro_auc, param_audit, run_contamination, run_noise_robustness,
    run_zero_training, synth_benchmark, train, ExperimentConfig,
};
use daflow::flow::{FlowConfig, FlowModel};
use daflow::numerics::{linalg, no_grad, Rng, Tensor, Var};
use daflow::skeleton::SkeletonGraph;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let line = format!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        // bypasses libtest output capture
        let _ = writeln!(std::io::stdout().lock(), "{line}");
        if !pass {
            self.failures.push(line);
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn synthetic_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    ExperimentConfig::load(&path).expect("configs/synthetic.json")
}

/// Fresh model with nonzero projections, actnorm fitted to a random batch,
/// and every parameter moved off its initial value. Larger projections
/// compound over K=8 steps into |z| ~ 1e7, where roundoff alone exceeds
/// the 1e-9 reconstruction bound.
fn random_model(config: FlowConfig, graph: SkeletonGraph, seed: u64) -> FlowModel {
    let config = FlowConfig {
        projection_init_std: 0.05,
        ..config
    };
    let shape = [8, config.channels, config.frames, config.joints];
    let mut model = FlowModel::new(config, graph, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xACCE);
    model.data_init(&rng.randn(&shape)).unwrap();
    for p in model.parameters() {
        let noise = rng.randn(&p.shape()).map(|v| 0.01 * v);
        let moved = p.value().zip_map(&noise, |a, b| a + b);
        p.set_value(moved).unwrap();
    }
    model
}

fn small_config(frames: usize, joints: usize, steps: usize) -> FlowConfig {
    FlowConfig {
        frames,
        joints,
        steps,
        ..FlowConfig::default()
    }
}

fn line_graph(joints: usize) -> SkeletonGraph {
    let edges: Vec<_> = (1..joints).map(|j| (j - 1, j)).collect();
    SkeletonGraph::new(joints, &edges).unwrap()
}

fn bijectivity(r: &mut Report) {
    let t0 = Instant::now();
    let model = random_model(FlowConfig::default(), SkeletonGraph::coco18(), 11);
    let mut rng = Rng::new(12);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rng.randn(&[100, 2, 24, 18]);
        let back = no_grad(|| {
            let (z, _) = model.forward(&Var::constant(x.clone())).unwrap();
            model.inverse(&z).unwrap().tensor()
        });
        worst = worst.max(back.max_abs_diff(&x));
    }
    let dt = t0.elapsed();
    r.record(
        "bijectivity",
        worst < 1e-9 && dt < Duration::from_secs(10),
        format!(
            "1000 segments, K=8, max |x - inverse(forward(x))| = {worst:.3e} (< 1e-9), {} (< 10s)",
            secs(dt)
        ),
    );
}

fn forward_flat(model: &FlowModel, x: &[f64], shape: &[usize]) -> Vec<f64> {
    let t = Tensor::new(shape, x.to_vec()).unwrap();
    no_grad(|| {
        model
            .forward(&Var::constant(t))
            .unwrap()
            .0
            .tensor()
            .into_data()
    })
}

fn logdet_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let shape = [1, 2, 3, 2];
    let d = 12;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let model = random_model(small_config(3, 2, 8), line_graph(2), 100 + seed);
        let x = Rng::new(200 + seed).randn(&shape);
        let analytic = no_grad(|| model.forward(&Var::constant(x.clone())).unwrap().1.item());
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            let mut plus = x.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (
                forward_flat(&model, &plus, &shape),
                forward_flat(&model, &minus, &shape),
            );
            for i in 0..d {
                jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let dense = linalg::log_abs_det(&Tensor::new(&[d, d], jac).unwrap()).unwrap();
        worst = worst.max((analytic - dense).abs() / dense.abs().max(analytic.abs()));
    }
    let dt = t0.elapsed();
    r.record(
        "logdet_oracle",
        worst < 1e-5 && dt < Duration::from_secs(30),
        format!("20 models at D=12, worst relative error vs dense FD Jacobian = {worst:.3e} (< 1e-5), {} (< 30s)", secs(dt)),
    );
}

fn gradient_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let model = random_model(small_config(4, 3, 2), line_graph(3), 7);
    let batch = Var::constant(Rng::new(8).randn(&[3, 2, 4, 3]).map(|v| 0.5 * v + 1.0));
    let params = model.parameters();
    let loss = model.nll(&batch).unwrap();
    loss.backward().unwrap();
    let h = 1e-5;
    let nll = || no_grad(|| model.nll(&batch).unwrap().item());
    let (mut worst, mut count) = (0.0f64, 0);
    for p in &params {
        let grad = p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape()));
        let base = p.tensor();
        for k in 0..base.numel() {
            let mut v = base.clone();
            v.data_mut()[k] = base.data()[k] + h;
            p.set_value(v.clone()).unwrap();
            let up = nll();
            v.data_mut()[k] = base.data()[k] - h;
            p.set_value(v).unwrap();
            let down = nll();
            p.set_value(base.clone()).unwrap();
            let (a, n) = (grad.data()[k], (up - down) / (2.0 * h));
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
            count += 1;
        }
    }
    let dt = t0.elapsed();
    r.record(
        "gradient_oracle",
        worst < 1e-4 && dt < Duration::from_secs(60),
        format!("{count} parameters at K=2, worst relative error vs central FD (h=1e-5) = {worst:.3e} (< 1e-4), {} (< 60s)", secs(dt)),
    );
}

fn identity_init(r: &mut Report) {
    let model = FlowModel::identity(FlowConfig::default(), SkeletonGraph::coco18(), 3).unwrap();
    let x = Rng::new(4).randn(&[16, 2, 24, 18]).map(|v| v + 3.0);
    let got = model.log_prob(&x).unwrap();
    let d = model.dim() as f64;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut worst = 0.0f64;
    for (b, lp) in got.iter().enumerate() {
        let sample = &x.data()[b * 864..(b + 1) * 864];
        let sq: f64 = sample.iter().map(|v| (v - 3.0) * (v - 3.0)).sum();
        worst = worst.max((lp - (-d * half_ln_2pi - 0.5 * sq)).abs());
    }
    r.record(
        "identity_init",
        worst <= 1e-12,
        format!("16 segments, max |log_prob - closed form| = {worst:.3e} (<= 1e-12)"),
    );
}

fn dam_closed_form(r: &mut Report) {
    let x = Var::constant(Rng::new(5).randn(&[4, 2, 24, 18]));
    let mut exact = true;
    for pooling in [Pooling::Max, Pooling::Avg, Pooling::Both] {
        let dam = DamParams::zeros((3, 7), pooling).unwrap();
        let y = no_grad(|| dam.forward(&x).unwrap().tensor());
        let expected = x.tensor().map(|v| 1.5 * v);
        exact &= y
            .data()
            .iter()
            .zip(expected.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    r.record(
        "dam_closed_form",
        exact,
        format!("zero-kernel DAM output bit-equal to 1.5*X for max/avg/both pooling: {exact}"),
    );
}

fn auc_oracle(r: &mut Report) {
    let mut rng = Rng::new(6);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 200 {
        let len = 2 + rng.below(400);
        let scores: Vec<f64> = (0..len)
            .map(|_| (rng.below(40) as f64 - 20.0) * 0.25)
            .collect();
        let labels: Vec<u8> = (0..len).map(|_| rng.below(2) as u8).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    wins += match (-scores[i]).partial_cmp(&-scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        worst = worst.max((micro_auc(&scores, &labels).unwrap() - wins / pairs).abs());
        n += 1;
    }
    r.record(
        "auc_oracle",
        worst <= 1e-12,
        format!(
            "200 tied random instances, max |micro_auc - pair counting| = {worst:.3e} (<= 1e-12)"
        ),
    );
}

fn param_audit_check(r: &mut Report) {
    let counts = param_audit(&ExperimentConfig::default()).unwrap();
    let total: usize = counts.iter().map(|c| c.count).sum();
    let mut by_layer: Vec<(String, usize)> = Vec::new();
    for c in &counts {
        match by_layer.iter_mut().find(|(l, _)| *l == c.layer) {
            Some((_, n)) => *n += c.count,
            None => by_layer.push((c.layer.to_string(), c.count)),
        }
    }
    let breakdown: Vec<String> = by_layer.iter().map(|(l, n)| format!("{l}={n}")).collect();
    let rel = (total as f64 - 488.0).abs() / 488.0;
    r.record(
        "param_audit",
        rel <= 0.15,
        format!(
            "total {total} vs 488 ({:+.1}%, within 15%); K=8 breakdown {}",
            100.0 * (total as f64 - 488.0) / 488.0,
            breakdown.join(" ")
        ),
    );
}

fn synthetic_suite(r: &mut Report) {
    let cfg = synthetic_config();
    let t0 = Instant::now();
    let ds = benchmark_datasets(&synth_benchmark(&cfg).unwrap(), &cfg).unwrap();
    let outcome = train(&cfg, &ds.train).unwrap();
    let clean = evaluate(&outcome.model, &ds.test, &cfg).unwrap();
    let dt = t0.elapsed();
    let (_, labels) = clean.frames.flatten();
    let anomalous = labels.iter().filter(|&&l| l == 1).count();
    let normal = labels.len() - anomalous;
    let shape_ok = ds.train.len() == 2000 && anomalous == 500 && normal == 500 && cfg.epochs == 8;
    r.record(
        "synthetic_detection",
        shape_ok && clean.auc >= 0.90 && dt < Duration::from_secs(180),
        format!(
            "{} train segments, {normal}+{anomalous} test frames, {} epochs at batch {}: micro-AUC {:.4} (>= 0.90), {} (< 180s)",
            ds.train.len(),
            cfg.epochs,
            cfg.batch_size,
            clean.auc,
            secs(dt)
        ),
    );

    let noise_cfg = ExperimentConfig {
        noise_scales: vec![0.0, 0.05],
        ..cfg.clone()
    };
    let rows = run_noise_robustness(&outcome.model, &ds.test, &noise_cfg).unwrap();
    let zero_exact = rows[0].auc.to_bits() == clean.auc.to_bits();
    let drop = clean.auc - rows[1].auc;
    r.record(
        "noise_robustness",
        zero_exact && drop <= 0.05,
        format!(
            "S=0 row bit-equal: {zero_exact}; S=0.05 AUC {:.4}, drop {:.2} points (<= 5)",
            rows[1].auc,
            100.0 * drop
        ),
    );

    let contam_cfg = ExperimentConfig {
        contamination_fractions: vec![0.05],
        ..cfg.clone()
    };
    let rows = run_contamination(&ds.train, &ds.pool, &ds.test, &contam_cfg).unwrap();
    let drop = clean.auc - rows[0].auc;
    r.record(
        "contamination",
        drop <= 0.05,
        format!(
            "5% ({} segments replaced) AUC {:.4}, drop {:.2} points (<= 5)",
            rows[0].replaced,
            rows[0].auc,
            100.0 * drop
        ),
    );

    let mut zero_cfg = cfg.clone();
    zero_cfg.zero_train.trials = 100;
    zero_cfg.zero_train.parallel = true;
    let t0 = Instant::now();
    let rows = run_zero_training(&ds.train, &ds.test, &zero_cfg).unwrap();
    let dt = t0.elapsed();
    let mean = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64;
    let min = rows.iter().map(|r| r.auc).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.auc).fold(f64::NEG_INFINITY, f64::max);
    r.record(
        "zero_training",
        rows.len() == 100 && mean >= 0.60 && dt < Duration::from_secs(300),
        format!("100 untrained trials: mean AUC {mean:.4} (>= 0.60), range [{min:.3}, {max:.3}], {} (< 300s)", secs(dt)),
    );
}

fn daflow(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_daflow"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "daflow {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p: PathBuf = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn determinism(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(&cfg_path, r#"{"batch_size": 32, "epochs": 2, "seed": 17}"#).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    daflow(&["synth", "--config", cfg, "--out", data.to_str().unwrap()]);
    let manifest = data.join("manifest.json");
    let manifest = manifest.to_str().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let d = dir.to_str().unwrap();
        let ckpt = dir.join("checkpoint.json");
        daflow(&["train", "--config", cfg, "--data", manifest, "--out", d]);
        daflow(&[
            "eval",
            "--config",
            cfg,
            "--data",
            manifest,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            d,
        ]);
        outputs.push(files(&dir));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    let identical = outputs[0] == outputs[1];
    let complete = [
        "auc.csv",
        "checkpoint.json",
        "frame_scores.csv",
        "loss.csv",
        "roc.csv",
        "segment_scores.csv",
    ]
    .iter()
    .all(|f| names.contains(f));
    r.record(
        "determinism",
        identical && complete,
        format!(
            "two CLI train+eval runs, byte-identical {}: {identical}",
            names.join(", ")
        ),
    );
}

#[test]
fn primary_criteria() {
    let mut report = Report {
        failures: Vec::new(),
    };
    bijectivity(&mut report);
    logdet_oracle(&mut report);
    gradient_oracle(&mut report);
    identity_init(&mut report);
    dam_closed_form(&mut report);
    synthetic_suite(&mut report);
    param_audit_check(&mut report);
    auc_oracle(&mut report);
    determinism(&mut report);
    assert!(
        report.failures.is_empty(),
        "failed criteria:\n{}",
        report.failures.join("\n")
    );
}
