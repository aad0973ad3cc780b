use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{no_grad, AdamState, Rng, Tensor, Var};
use crate::skeleton::{as_batched, unbatch, SkeletonGraph};

use super::{per_sample_sum, Actnorm, Coupling, FlowConfig, InvConv, MixerInit};

/// One flow step: actnorm, then channel mixer, then coupling.
#[derive(Clone, Debug)]
pub struct FlowStep {
    pub(crate) actnorm: Actnorm,
    pub(crate) mixer: InvConv,
    pub(crate) coupling: Coupling,
}

impl FlowStep {
    pub fn actnorm(&self) -> &Actnorm {
        &self.actnorm
    }

    pub fn mixer(&self) -> &InvConv {
        &self.mixer
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    /// Parameters grouped by layer, in declared order.
    pub fn named_parameters(&self) -> Vec<(&'static str, Vec<(String, Var)>)> {
        let gcn = self.coupling.gcn();
        let mut gcn_params: Vec<(String, Var)> = gcn
            .weights()
            .iter()
            .enumerate()
            .map(|(k, w)| (format!("w{k}"), w.clone()))
            .collect();
        if let Some(b) = gcn.bias() {
            gcn_params.push(("bias".into(), b.clone()));
        }
        let dam_names = [
            "skeleton_kernel",
            "skeleton_bias",
            "frame_kernel",
            "frame_bias",
        ];
        let (pw, pb) = self.coupling.projection();
        vec![
            (
                "actnorm",
                vec![
                    ("logscale".into(), self.actnorm.logscale().clone()),
                    ("bias".into(), self.actnorm.bias().clone()),
                ],
            ),
            ("mixer", vec![("q".into(), self.mixer.matrix().clone())]),
            ("gcn", gcn_params),
            (
                "dam",
                dam_names
                    .iter()
                    .map(|n| n.to_string())
                    .zip(self.coupling.dam().parameters())
                    .collect(),
            ),
            (
                "projection",
                vec![("weight".into(), pw.clone()), ("bias".into(), pb.clone())],
            ),
        ]
    }

    fn forward(&self, graph: &SkeletonGraph, x: &Var) -> Result<(Var, Var)> {
        let (h, ld_a) = self.actnorm.forward(x)?;
        let (h, ld_m) = self.mixer.forward(&h)?;
        let (y, ld_c) = self.coupling.forward(graph, &h)?;
        Ok((y, ld_c.add(&ld_a)?.add(&ld_m)?))
    }

    fn inverse(&self, graph: &SkeletonGraph, y: &Var) -> Result<(Var, Var)> {
        let (h, ld_c) = self.coupling.inverse(graph, y)?;
        let (h, ld_m) = self.mixer.inverse(&h)?;
        let (x, ld_a) = self.actnorm.inverse(&h)?;
        Ok((x, ld_c.add(&ld_m)?.add(&ld_a)?))
    }
}

/// Trainable-parameter count of one layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub step: usize,
    pub layer: String,
    pub count: usize,
}

/// A stack of flow steps with a `N(μ·1, I)` prior.
#[derive(Clone, Debug)]
pub struct FlowModel {
    config: FlowConfig,
    graph: SkeletonGraph,
    steps: Vec<FlowStep>,
    seed: u64,
}

impl FlowModel {
    /// Random initialization; actnorm layers await [`FlowModel::data_init`].
    pub fn new(config: FlowConfig, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.joints() != config.joints {
            return Err(Error::Shape(format!(
                "config has {} joints, graph has {}",
                config.joints,
                graph.joints()
            )));
        }
        let mut rng = Rng::new(seed);
        let steps = (0..config.steps)
            .map(|_| {
                let mixer = InvConv::new(config.channels, config.mixer_init, &mut rng);
                let coupling = Coupling::new(&config, graph.partition_count(), &mut rng)?;
                Ok(FlowStep {
                    actnorm: Actnorm::new(config.channels),
                    mixer,
                    coupling,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            graph,
            steps,
            seed,
        })
    }

    /// Identity map at initialization: unit actnorm, `Q = I`, zero projections.
    pub fn identity(config: FlowConfig, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        let config = FlowConfig {
            mixer_init: MixerInit::Identity,
            projection_init_std: 0.0,
            ..config
        };
        let mut model = Self::new(config, graph, seed)?;
        for s in &mut model.steps {
            s.actnorm = Actnorm::identity(model.config.channels);
        }
        Ok(model)
    }

    pub(crate) fn from_steps(
        config: FlowConfig,
        graph: SkeletonGraph,
        steps: Vec<FlowStep>,
        seed: u64,
    ) -> Self {
        Self {
            config,
            graph,
            steps,
            seed,
        }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn steps(&self) -> &[FlowStep] {
        &self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn is_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.actnorm.is_initialized())
    }

    /// Every trainable leaf, step by step in declared order.
    pub fn parameters(&self) -> Vec<Var> {
        self.steps
            .iter()
            .flat_map(|s| s.named_parameters())
            .flat_map(|(_, ps)| ps.into_iter().map(|(_, v)| v))
            .collect()
    }

    pub fn param_counts(&self) -> Vec<ParamCount> {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(k, s)| {
                s.named_parameters()
                    .into_iter()
                    .map(move |(layer, ps)| ParamCount {
                        step: k,
                        layer: layer.to_string(),
                        count: ps.iter().map(|(_, v)| v.value().numel()).sum(),
                    })
            })
            .collect()
    }

    pub fn param_total(&self) -> usize {
        self.param_counts().iter().map(|p| p.count).sum()
    }

    /// Data-dependent actnorm initialization, propagating `batch` through the
    /// stack so each layer sees the activations it will receive.
    pub fn data_init(&mut self, batch: &Tensor) -> Result<()> {
        let batch = self.check_batch(&Var::constant(batch.clone()))?.0;
        no_grad(|| {
            let mut h = batch;
            for s in &mut self.steps {
                if !s.actnorm.is_initialized() {
                    s.actnorm.initialize(&h.value())?;
                }
                h = s.forward(&self.graph, &h)?.0;
            }
            Ok(())
        })
    }

    fn check_batch(&self, x: &Var) -> Result<(Var, bool)> {
        let (x4, squeeze) = as_batched(x)?;
        let s = x4.shape();
        let want = [self.config.channels, self.config.frames, self.config.joints];
        if s[1..] != want {
            return Err(Error::Shape(format!(
                "model expects segments {want:?}, got {:?}",
                &s[1..]
            )));
        }
        Ok((x4, squeeze))
    }

    /// `x → z` with the per-sample total log-det. Accepts `[C, T, V]` or
    /// `[B, C, T, V]`; the log-det has shape `[B]` (or `[1]`).
    pub fn forward(&self, x: &Var) -> Result<(Var, Var)> {
        let (mut h, squeeze) = self.check_batch(x)?;
        let mut logdet = Var::constant(Tensor::zeros(&[h.shape()[0]]));
        for s in &self.steps {
            let (y, ld) = s.forward(&self.graph, &h)?;
            h = y;
            logdet = logdet.add(&ld)?;
        }
        Ok((unbatch(h, squeeze)?, logdet))
    }

    /// `z → x` with the per-sample log-det of that map.
    pub fn inverse_with_logdet(&self, z: &Var) -> Result<(Var, Var)> {
        let (mut h, squeeze) = self.check_batch(z)?;
        let mut logdet = Var::constant(Tensor::zeros(&[h.shape()[0]]));
        for s in self.steps.iter().rev() {
            let (x, ld) = s.inverse(&self.graph, &h)?;
            h = x;
            logdet = logdet.add(&ld)?;
        }
        Ok((unbatch(h, squeeze)?, logdet))
    }

    pub fn inverse(&self, z: &Var) -> Result<Var> {
        Ok(self.inverse_with_logdet(z)?.0)
    }

    /// Prior log-density per sample, `[B]`.
    fn prior_log_density(&self, z: &Var) -> Result<Var> {
        let (z4, _) = as_batched(z)?;
        let d = self.dim() as f64;
        per_sample_sum(&z4.add_scalar(-self.config.prior_mean)?.square()?)?
            .scale(-0.5)?
            .add_scalar(-0.5 * d * (2.0 * PI).ln())
    }

    /// Per-sample `log p_X(x) = log p_Z(f(x)) + log|det ∂f/∂x|`, differentiable.
    pub fn log_prob_var(&self, x: &Var) -> Result<Var> {
        let (z, logdet) = self.forward(x)?;
        self.prior_log_density(&z)?.add(&logdet)
    }

    /// Log-density of a batch or single segment, without recording a graph.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| {
            Ok(self
                .log_prob_var(&Var::constant(x.clone()))?
                .value()
                .data()
                .to_vec())
        })
    }

    /// The same density computed through the inverse map:
    /// `log p_Z(z) − log|det ∂f⁻¹/∂z|` at `z = f(x)`.
    pub fn log_prob_via_inverse(&self, x: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| {
            let (z, _) = self.forward(&Var::constant(x.clone()))?;
            let (_, inv_logdet) = self.inverse_with_logdet(&z)?;
            Ok(self
                .prior_log_density(&z)?
                .sub(&inv_logdet)?
                .value()
                .data()
                .to_vec())
        })
    }

    /// Mean negative log-likelihood of a `[B, C, T, V]` batch.
    pub fn nll(&self, batch: &Var) -> Result<Var> {
        if batch.shape().len() != 4 || batch.shape()[0] == 0 {
            return Err(Error::Invalid(
                "nll needs a non-empty [B, C, T, V] batch".into(),
            ));
        }
        self.log_prob_var(batch)?.mean()?.neg()
    }

    /// One optimizer update from the current gradients. The update is
    /// rolled back, and `false` returned, if it would make a mixer singular.
    pub fn apply_gradients(&self, adam: &mut AdamState) -> Result<bool> {
        let params = self.parameters();
        let before: Vec<Tensor> = params.iter().map(Var::tensor).collect();
        adam.step_vars(&params)?;
        if self.steps.iter().all(|s| s.mixer.check().is_ok()) {
            return Ok(true);
        }
        for (p, v) in params.iter().zip(before) {
            p.set_value(v)?;
        }
        Ok(false)
    }
}
