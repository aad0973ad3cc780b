use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::skeleton::{GraphSpec, SkeletonGraph};

use super::{FlowConfig, FlowModel};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A named parameter array stored flat, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub actnorm_initialized: bool,
    pub params: Vec<ArrayRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: FlowConfig,
    /// Free-form copy of the run configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    pub graph: GraphSpec,
    pub prior_mean: f64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl FlowModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let steps = self
            .steps()
            .iter()
            .map(|s| StepRecord {
                actnorm_initialized: s.actnorm.is_initialized(),
                params: s
                    .named_parameters()
                    .into_iter()
                    .flat_map(|(layer, ps)| {
                        ps.into_iter().map(move |(name, v)| {
                            let t = v.tensor();
                            ArrayRecord {
                                name: format!("{layer}.{name}"),
                                shape: t.shape().to_vec(),
                                data: t.into_data(),
                            }
                        })
                    })
                    .collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            run_config: None,
            graph: self.graph().spec(),
            prior_mean: self.config().prior_mean,
            seed: self.seed(),
            steps,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let config = FlowConfig {
            prior_mean: ckpt.prior_mean,
            ..ckpt.config.clone()
        };
        if ckpt.steps.len() != config.steps {
            return Err(Error::Invalid(format!(
                "checkpoint has {} steps, config says {}",
                ckpt.steps.len(),
                config.steps
            )));
        }
        let graph = SkeletonGraph::from_spec(&ckpt.graph)?;
        let model = FlowModel::new(config.clone(), graph.clone(), ckpt.seed)?;
        let mut steps = model.steps().to_vec();
        for (k, (step, rec)) in steps.iter_mut().zip(&ckpt.steps).enumerate() {
            let slots: Vec<(String, _)> = step
                .named_parameters()
                .into_iter()
                .flat_map(|(layer, ps)| {
                    ps.into_iter()
                        .map(move |(n, v)| (format!("{layer}.{n}"), v))
                })
                .collect();
            if slots.len() != rec.params.len() {
                return Err(Error::Invalid(format!(
                    "step {k}: expected {} arrays, found {}",
                    slots.len(),
                    rec.params.len()
                )));
            }
            for ((name, var), arr) in slots.iter().zip(&rec.params) {
                if *name != arr.name {
                    return Err(Error::Invalid(format!(
                        "step {k}: expected array {name}, found {}",
                        arr.name
                    )));
                }
                var.set_value(Tensor::new(&arr.shape, arr.data.clone())?)
                    .map_err(|e| Error::Invalid(format!("step {k} {name}: {e}")))?;
            }
            if rec.actnorm_initialized {
                step.actnorm.mark_initialized();
            }
            step.mixer.check()?;
        }
        Ok(FlowModel::from_steps(config, graph, steps, ckpt.seed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
