//! Glow-style normalizing flow over pose segments.

mod actnorm;
mod checkpoint;
mod coupling;
mod invconv;
mod model;

pub use actnorm::Actnorm;
pub use checkpoint::{ArrayRecord, Checkpoint, StepRecord, CHECKPOINT_VERSION};
pub use coupling::Coupling;
pub use invconv::InvConv;
pub use model::{FlowModel, FlowStep, ParamCount};

use serde::{Deserialize, Serialize};

use crate::attention::Pooling;
use crate::error::{Error, Result};
use crate::numerics::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    #[default]
    Affine,
    Additive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerInit {
    #[default]
    RandomRotation,
    Identity,
}

/// Architecture of a flow; everything needed to rebuild an empty model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub steps: usize,
    pub prior_mean: f64,
    pub coupling: CouplingMode,
    pub pooling: Pooling,
    pub kernel: (usize, usize),
    pub mixer_init: MixerInit,
    /// Condition on the second channel half instead of the first.
    pub condition_on_second: bool,
    /// Std of the output projection at initialization; 0 gives identity couplings.
    pub projection_init_std: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            frames: 24,
            joints: 18,
            steps: 8,
            prior_mean: 3.0,
            coupling: CouplingMode::Affine,
            pooling: Pooling::Max,
            kernel: (3, 7),
            mixer_init: MixerInit::RandomRotation,
            condition_on_second: false,
            projection_init_std: 0.0,
        }
    }
}

impl FlowConfig {
    pub fn dim(&self) -> usize {
        self.channels * self.frames * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Invalid(format!(
                "coupling needs at least 2 channels, got {}",
                self.channels
            )));
        }
        if self.frames == 0 || self.joints == 0 {
            return Err(Error::Invalid("segment extents must be positive".into()));
        }
        if !self.prior_mean.is_finite() {
            return Err(Error::Invalid("prior mean must be finite".into()));
        }
        if !(self.projection_init_std >= 0.0 && self.projection_init_std.is_finite()) {
            return Err(Error::Invalid(
                "projection_init_std must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Sums every axis but the batch axis: `[B, ...] -> [B]`.
pub(crate) fn per_sample_sum(x: &Var) -> Result<Var> {
    let shape = x.shape();
    let b = shape[0];
    let rest: usize = shape[1..].iter().product();
    x.reshape(&[b, rest])?.sum_axis(1)?.reshape(&[b])
}
