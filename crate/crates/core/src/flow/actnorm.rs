use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Per-channel affine map `y = exp(s) * (x + b)` with data-dependent init.
#[derive(Clone, Debug)]
pub struct Actnorm {
    logscale: Var,
    bias: Var,
    initialized: bool,
}

impl Actnorm {
    /// Zero parameters, awaiting data-dependent initialization.
    pub fn new(channels: usize) -> Self {
        Self {
            logscale: Var::parameter(Tensor::zeros(&[channels])),
            bias: Var::parameter(Tensor::zeros(&[channels])),
            initialized: false,
        }
    }

    /// The identity map, already marked initialized.
    pub fn identity(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::new(channels)
        }
    }

    pub fn from_parts(logscale: Tensor, bias: Tensor, initialized: bool) -> Result<Self> {
        if logscale.rank() != 1 || logscale.shape() != bias.shape() {
            return Err(Error::Shape(format!(
                "actnorm parameters must be matching [C], got {:?} and {:?}",
                logscale.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            logscale: Var::parameter(logscale),
            bias: Var::parameter(bias),
            initialized,
        })
    }

    pub fn channels(&self) -> usize {
        self.logscale.shape()[0]
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn logscale(&self) -> &Var {
        &self.logscale
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }

    pub fn parameters(&self) -> Vec<Var> {
        vec![self.logscale.clone(), self.bias.clone()]
    }

    /// Sets bias and log-scale so that `x` maps to zero mean and unit
    /// (population) variance per channel, pooled over batch, frames, joints.
    pub fn initialize(&mut self, x: &Tensor) -> Result<()> {
        let [b, c, t, v] = x.shape()[..] else {
            return Err(Error::Shape(format!(
                "actnorm init expects [B, C, T, V], got {:?}",
                x.shape()
            )));
        };
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "actnorm has {} channels, batch has {c}",
                self.channels()
            )));
        }
        let n = (b * t * v) as f64;
        let mut bias = Tensor::zeros(&[c]);
        let mut logscale = Tensor::zeros(&[c]);
        for ch in 0..c {
            let values: Vec<f64> = (0..b)
                .flat_map(|bi| {
                    let start = (bi * c + ch) * t * v;
                    x.data()[start..start + t * v].iter().copied()
                })
                .collect();
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / n;
            bias.data_mut()[ch] = -mean;
            // a constant channel is only centred
            logscale.data_mut()[ch] = if var > 1e-24 { -0.5 * var.ln() } else { 0.0 };
        }
        self.bias.set_value(bias)?;
        self.logscale.set_value(logscale)?;
        self.initialized = true;
        Ok(())
    }

    fn broadcastable(&self) -> Result<(Var, Var)> {
        let c = self.channels();
        Ok((
            self.logscale.reshape(&[1, c, 1, 1])?,
            self.bias.reshape(&[1, c, 1, 1])?,
        ))
    }

    /// `x: [B, C, T, V]`; returns `y` and the log-det `T·V·Σ s` as shape `[1]`.
    pub fn forward(&self, x: &Var) -> Result<(Var, Var)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let shape = x.shape();
        let (s, b) = self.broadcastable()?;
        let y = x.add(&b)?.mul(&s.exp()?)?;
        let logdet = self.logscale.sum()?.scale((shape[2] * shape[3]) as f64)?;
        Ok((y, logdet))
    }

    /// Returns `x` and the log-det of the inverse map.
    pub fn inverse(&self, y: &Var) -> Result<(Var, Var)> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        let shape = y.shape();
        let (s, b) = self.broadcastable()?;
        let x = y.mul(&s.neg()?.exp()?)?.sub(&b)?;
        let logdet = self
            .logscale
            .sum()?
            .scale(-((shape[2] * shape[3]) as f64))?;
        Ok((x, logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn zero_parameters_are_identity() {
        let a = Actnorm::identity(2);
        let x = Var::constant(Rng::new(1).randn(&[3, 2, 4, 3]));
        let (y, ld) = a.forward(&x).unwrap();
        assert_eq!(y.tensor(), x.tensor());
        assert_eq!(ld.item(), 0.0);
    }

    #[test]
    fn log_two_scale_logdet() {
        let ln2 = 2f64.ln();
        let a = Actnorm::from_parts(Tensor::full(&[2], ln2), Tensor::zeros(&[2]), true).unwrap();
        let x = Var::constant(Tensor::ones(&[1, 2, 4, 3]));
        let (y, ld) = a.forward(&x).unwrap();
        assert!((ld.item() - 12.0 * 2.0 * ln2).abs() < 1e-12);
        assert!((ld.item() - 16.6355).abs() < 5e-5);
        assert!(y.value().data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn data_init_standardizes_each_channel() {
        let mut x = Rng::new(2).randn(&[5, 2, 6, 4]);
        // give the channels different location and spread
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (i / 24) % 2;
            *v = *v * (1.0 + 4.0 * ch as f64) + 10.0 * ch as f64 - 3.0;
        }
        let mut a = Actnorm::new(2);
        assert!(matches!(
            a.forward(&Var::constant(x.clone())),
            Err(Error::Uninitialized)
        ));
        a.initialize(&x).unwrap();
        let y = a.forward(&Var::constant(x)).unwrap().0.tensor();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| y.data()[(b * 2 + ch) * 24..(b * 2 + ch + 1) * 24].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_roundtrip_and_negated_logdet() {
        let mut rng = Rng::new(3);
        let a = Actnorm::from_parts(rng.randn(&[3]), rng.randn(&[3]), true).unwrap();
        let x = Var::constant(rng.randn(&[2, 3, 4, 5]));
        let (y, ld) = a.forward(&x).unwrap();
        let (back, ld_inv) = a.inverse(&y).unwrap();
        assert!(back.tensor().max_abs_diff(&x.tensor()) < 1e-12);
        assert!((ld.item() + ld_inv.item()).abs() < 1e-12);
    }
}
