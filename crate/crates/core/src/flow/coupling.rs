use crate::attention::DamParams;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor, Var};
use crate::skeleton::{channel_mix, GcnLayer, SkeletonGraph};

use super::{per_sample_sum, CouplingMode, FlowConfig};

/// Bound on the raw log-scale before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

/// Channel-split coupling. The conditioning half passes through unchanged and
/// drives a GCN → DAM → 1×1 projection conditioner for the other half.
#[derive(Clone, Debug)]
pub struct Coupling {
    mode: CouplingMode,
    condition_on_second: bool,
    channels: usize,
    gcn: GcnLayer,
    dam: DamParams,
    proj_weight: Var,
    proj_bias: Var,
}

impl Coupling {
    pub fn new(config: &FlowConfig, partitions: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let (c0, c1) = split(c);
        let hidden = 2 * c0;
        let gcn = GcnLayer::new(c0, hidden, partitions, true, rng);
        let dam = DamParams::new(config.kernel, config.pooling, rng)?;
        let out = proj_outputs(config.coupling, c1);
        let std = config.projection_init_std;
        let weight = if std > 0.0 {
            rng.randn(&[out, hidden]).map(|v| v * std)
        } else {
            Tensor::zeros(&[out, hidden])
        };
        Ok(Self {
            mode: config.coupling,
            condition_on_second: config.condition_on_second,
            channels: c,
            gcn,
            dam,
            proj_weight: Var::parameter(weight),
            proj_bias: Var::parameter(Tensor::zeros(&[out])),
        })
    }

    pub fn from_parts(
        config: &FlowConfig,
        gcn: GcnLayer,
        dam: DamParams,
        proj_weight: Tensor,
        proj_bias: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let (c0, c1) = split(config.channels);
        let out = proj_outputs(config.coupling, c1);
        if gcn.in_channels() != c0 {
            return Err(Error::Shape(format!(
                "conditioner gcn must take {c0} channels"
            )));
        }
        if proj_weight.shape() != [out, gcn.out_channels()] || proj_bias.shape() != [out] {
            return Err(Error::Shape(format!(
                "projection must be [{out}, {}] + [{out}], got {:?} + {:?}",
                gcn.out_channels(),
                proj_weight.shape(),
                proj_bias.shape()
            )));
        }
        Ok(Self {
            mode: config.coupling,
            condition_on_second: config.condition_on_second,
            channels: config.channels,
            gcn,
            dam,
            proj_weight: Var::parameter(proj_weight),
            proj_bias: Var::parameter(proj_bias),
        })
    }

    pub fn mode(&self) -> CouplingMode {
        self.mode
    }

    pub fn gcn(&self) -> &GcnLayer {
        &self.gcn
    }

    pub fn dam(&self) -> &DamParams {
        &self.dam
    }

    pub fn projection(&self) -> (&Var, &Var) {
        (&self.proj_weight, &self.proj_bias)
    }

    /// GCN, DAM, then projection parameters.
    pub fn parameters(&self) -> Vec<Var> {
        let mut p = self.gcn.parameters();
        p.extend(self.dam.parameters());
        p.push(self.proj_weight.clone());
        p.push(self.proj_bias.clone());
        p
    }

    /// (conditioning half, transformed half) and where the conditioning half starts.
    fn halves(&self, x: &Var) -> Result<(Var, Var)> {
        let c = x.shape()[1];
        if c != self.channels {
            return Err(Error::Shape(format!(
                "coupling expects {} channels, got {c}",
                self.channels
            )));
        }
        let (c0, c1) = split(c);
        if self.condition_on_second {
            Ok((x.narrow(1, c1, c0)?, x.narrow(1, 0, c1)?))
        } else {
            Ok((x.narrow(1, 0, c0)?, x.narrow(1, c0, c1)?))
        }
    }

    fn join(&self, cond: Var, other: Var) -> Result<Var> {
        if self.condition_on_second {
            Var::concat(&[other, cond], 1)
        } else {
            Var::concat(&[cond, other], 1)
        }
    }

    /// Raw conditioner output `[B, P, T, V]`.
    fn conditioner(&self, graph: &SkeletonGraph, cond: &Var) -> Result<Var> {
        let h = self.gcn.forward(graph, cond)?;
        let h = self.dam.forward(&h)?;
        let p = self.proj_weight.shape()[0];
        channel_mix(&self.proj_weight, &h)?.add(&self.proj_bias.reshape(&[1, p, 1, 1])?)
    }

    /// Clamped log-scale (affine only) and shift.
    fn scale_shift(
        &self,
        graph: &SkeletonGraph,
        cond: &Var,
        c1: usize,
    ) -> Result<(Option<Var>, Var)> {
        let h = self.conditioner(graph, cond)?;
        match self.mode {
            CouplingMode::Affine => {
                let s = h.narrow(1, 0, c1)?.clamp(-SCALE_CLAMP, SCALE_CLAMP)?;
                Ok((Some(s), h.narrow(1, c1, c1)?))
            }
            CouplingMode::Additive => Ok((None, h)),
        }
    }

    /// `x: [B, C, T, V]`; returns `y` and per-sample log-det `[B]`.
    pub fn forward(&self, graph: &SkeletonGraph, x: &Var) -> Result<(Var, Var)> {
        let (cond, x1) = self.halves(x)?;
        let c1 = x1.shape()[1];
        let (s, t) = self.scale_shift(graph, &cond, c1)?;
        let (y1, logdet) = match s {
            Some(s) => (x1.mul(&s.exp()?)?.add(&t)?, per_sample_sum(&s)?),
            None => (x1.add(&t)?, Var::constant(Tensor::zeros(&[x.shape()[0]]))),
        };
        Ok((self.join(cond, y1)?, logdet))
    }

    /// Returns `x` and the per-sample log-det of the inverse map.
    pub fn inverse(&self, graph: &SkeletonGraph, y: &Var) -> Result<(Var, Var)> {
        let (cond, y1) = self.halves(y)?;
        let c1 = y1.shape()[1];
        let (s, t) = self.scale_shift(graph, &cond, c1)?;
        let (x1, logdet) = match s {
            Some(s) => {
                let neg = s.neg()?;
                (y1.sub(&t)?.mul(&neg.exp()?)?, per_sample_sum(&neg)?)
            }
            None => (y1.sub(&t)?, Var::constant(Tensor::zeros(&[y.shape()[0]]))),
        };
        Ok((self.join(cond, x1)?, logdet))
    }
}

/// `(conditioning, transformed)` channel counts; the transformed half takes
/// the extra channel when `c` is odd.
fn split(c: usize) -> (usize, usize) {
    (c / 2, c - c / 2)
}

fn proj_outputs(mode: CouplingMode, c1: usize) -> usize {
    match mode {
        CouplingMode::Affine => 2 * c1,
        CouplingMode::Additive => c1,
    }
}
