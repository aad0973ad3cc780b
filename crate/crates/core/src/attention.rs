//! Dual attention over GCN features: a skeleton branch that weights
//! (channel, joint) positions and a frame branch that weights
//! (frame, channel) positions, averaged and added back to the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor, Var};
use crate::skeleton::{as_batched, unbatch};

/// Pooling used to squeeze the attended axis before the branch convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
    /// Max and average stacked as two input channels.
    Both,
}

impl Pooling {
    pub fn channels(self) -> usize {
        match self {
            Pooling::Both => 2,
            _ => 1,
        }
    }
}

/// Parameters of both branches. Kernels are `[1, Cin, kc, kl]`: the first
/// spatial extent `kc` runs along the feature-channel axis, the second `kl`
/// along joints (skeleton branch) or frames (frame branch).
#[derive(Clone, Debug)]
pub struct DamParams {
    skeleton_kernel: Var,
    skeleton_bias: Var,
    frame_kernel: Var,
    frame_bias: Var,
    pooling: Pooling,
}

impl DamParams {
    /// Kernels uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(kernel: (usize, usize), pooling: Pooling, rng: &mut Rng) -> Result<Self> {
        let (kc, kl) = check_kernel(kernel)?;
        let cin = pooling.channels();
        let bound = 1.0 / ((cin * kc * kl) as f64).sqrt();
        let mut draw = || {
            let data = (0..cin * kc * kl)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            Tensor::new(&[1, cin, kc, kl], data).unwrap()
        };
        let (sk, fk) = (draw(), draw());
        Self::from_parts(sk, Tensor::zeros(&[1]), fk, Tensor::zeros(&[1]), pooling)
    }

    pub fn zeros(kernel: (usize, usize), pooling: Pooling) -> Result<Self> {
        let (kc, kl) = check_kernel(kernel)?;
        let k = Tensor::zeros(&[1, pooling.channels(), kc, kl]);
        Self::from_parts(
            k.clone(),
            Tensor::zeros(&[1]),
            k,
            Tensor::zeros(&[1]),
            pooling,
        )
    }

    pub fn from_parts(
        skeleton_kernel: Tensor,
        skeleton_bias: Tensor,
        frame_kernel: Tensor,
        frame_bias: Tensor,
        pooling: Pooling,
    ) -> Result<Self> {
        let cin = pooling.channels();
        for k in [&skeleton_kernel, &frame_kernel] {
            match k.shape() {
                [1, c, kc, kl] if *c == cin => {
                    check_kernel((*kc, *kl))?;
                }
                s => {
                    return Err(Error::Shape(format!(
                        "attention kernel must be [1, {cin}, kc, kl], got {s:?}"
                    )))
                }
            }
        }
        if skeleton_kernel.shape() != frame_kernel.shape() {
            return Err(Error::Shape("branch kernels differ in shape".into()));
        }
        if skeleton_bias.shape() != [1] || frame_bias.shape() != [1] {
            return Err(Error::Shape("attention biases must be [1]".into()));
        }
        Ok(Self {
            skeleton_kernel: Var::parameter(skeleton_kernel),
            skeleton_bias: Var::parameter(skeleton_bias),
            frame_kernel: Var::parameter(frame_kernel),
            frame_bias: Var::parameter(frame_bias),
            pooling,
        })
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    /// Declared order: skeleton kernel, skeleton bias, frame kernel, frame bias.
    pub fn parameters(&self) -> Vec<Var> {
        vec![
            self.skeleton_kernel.clone(),
            self.skeleton_bias.clone(),
            self.frame_kernel.clone(),
            self.frame_bias.clone(),
        ]
    }

    /// Skeleton attention map `M_s`: `[1, C, V]` for a single segment,
    /// `[B, 1, C, V]` for a batch.
    pub fn skeleton_map(&self, x: &Var) -> Result<Var> {
        let (x4, squeeze) = as_batched(x)?;
        let xs = x4.permute(&[0, 2, 1, 3])?; // [B, T, C, V]
        let m = self.attention_map(&xs, &self.skeleton_kernel, &self.skeleton_bias)?;
        unbatch(m, squeeze)
    }

    /// Frame attention map `M_t`: `[1, T, C]` for a single segment,
    /// `[B, 1, T, C]` for a batch.
    pub fn frame_map(&self, x: &Var) -> Result<Var> {
        let (x4, squeeze) = as_batched(x)?;
        let xt = x4.permute(&[0, 3, 2, 1])?; // [B, V, T, C]
                                             // (channel, frame) kernel laid over a (frame, channel) map
        let kernel = self.frame_kernel.permute(&[0, 1, 3, 2])?;
        let m = self.attention_map(&xt, &kernel, &self.frame_bias)?;
        unbatch(m, squeeze)
    }

    fn attention_map(&self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        let pooled = match self.pooling {
            Pooling::Max => x.max_axis(1)?,
            Pooling::Avg => x.mean_axis(1)?,
            Pooling::Both => Var::concat(&[x.max_axis(1)?, x.mean_axis(1)?], 1)?,
        };
        pooled.conv2d_same(kernel, bias)?.sigmoid()
    }

    /// `σ(f(p(X_s))) ⊙ X_s`, returned in the input's `[C, T, V]` layout.
    pub fn skeleton_attention(&self, x: &Var) -> Result<Var> {
        let (x4, squeeze) = as_batched(x)?;
        let xs = x4.permute(&[0, 2, 1, 3])?;
        let m = self.attention_map(&xs, &self.skeleton_kernel, &self.skeleton_bias)?;
        let y = m.broadcast_mul(&xs)?.permute(&[0, 2, 1, 3])?;
        unbatch(y, squeeze)
    }

    /// `σ(f(p(X_t))) ⊙ X_t`, returned in the input's `[C, T, V]` layout.
    pub fn frame_attention(&self, x: &Var) -> Result<Var> {
        let (x4, squeeze) = as_batched(x)?;
        let xt = x4.permute(&[0, 3, 2, 1])?;
        let kernel = self.frame_kernel.permute(&[0, 1, 3, 2])?;
        let m = self.attention_map(&xt, &kernel, &self.frame_bias)?;
        let y = m.broadcast_mul(&xt)?.permute(&[0, 3, 2, 1])?;
        unbatch(y, squeeze)
    }

    /// `½(Ȳ_s + Ȳ_t) + X`.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let ys = self.skeleton_attention(x)?;
        let yt = self.frame_attention(x)?;
        ys.add(&yt)?.scale(0.5)?.add(x)
    }
}

fn check_kernel((kc, kl): (usize, usize)) -> Result<(usize, usize)> {
    if kc == 0 || kl == 0 || kc % 2 == 0 || kl % 2 == 0 {
        return Err(Error::Invalid(format!(
            "attention kernel extents must be odd, got {kc}x{kl}"
        )));
    }
    Ok((kc, kl))
}
