use crate::error::{Error, Result};
use crate::numerics::linalg::{self, Lu};
use crate::numerics::{Rng, Tensor, Var};
use crate::skeleton::channel_mix;

use super::MixerInit;

/// Invertible 1×1 convolution: `Y[:, t, v] = Q · X[:, t, v]`.
#[derive(Clone, Debug)]
pub struct InvConv {
    q: Var,
}

/// Smallest `|det Q|` accepted as invertible.
pub(crate) const MIN_ABS_DET: f64 = 1e-12;

impl InvConv {
    pub fn new(channels: usize, init: MixerInit, rng: &mut Rng) -> Self {
        let q = match init {
            MixerInit::Identity => Tensor::eye(channels),
            MixerInit::RandomRotation => random_rotation(channels, rng),
        };
        Self {
            q: Var::parameter(q),
        }
    }

    pub fn from_matrix(q: Tensor) -> Result<Self> {
        match q.shape() {
            [r, c] if r == c => {}
            s => return Err(Error::Shape(format!("mixer must be square, got {s:?}"))),
        }
        check_invertible(&q)?;
        Ok(Self {
            q: Var::parameter(q),
        })
    }

    pub fn matrix(&self) -> &Var {
        &self.q
    }

    pub fn parameters(&self) -> Vec<Var> {
        vec![self.q.clone()]
    }

    /// Errors if the current matrix is numerically singular.
    pub fn check(&self) -> Result<()> {
        check_invertible(&self.q.value())
    }

    pub fn forward(&self, x: &Var) -> Result<(Var, Var)> {
        let shape = x.shape();
        let y = channel_mix(&self.q, x)?;
        let logdet = self.q.log_abs_det()?.scale((shape[2] * shape[3]) as f64)?;
        Ok((y, logdet))
    }

    /// Solves `Q · X = Y` per site. The inverse is not differentiated.
    pub fn inverse(&self, y: &Var) -> Result<(Var, Var)> {
        let shape = y.shape();
        let lu = Lu::new(&self.q.value())?;
        let q_inv = lu.inverse();
        let x = channel_mix(&Var::constant(q_inv.clone()), y)?;
        let logdet = linalg::log_abs_det(&q_inv)? * (shape[2] * shape[3]) as f64;
        Ok((x, Var::constant(Tensor::scalar(logdet))))
    }
}

fn check_invertible(q: &Tensor) -> Result<()> {
    match linalg::det(q) {
        Ok(d) if d.abs() > MIN_ABS_DET => Ok(()),
        _ => Err(Error::Singular),
    }
}

/// Orthogonal matrix with determinant +1 from Gram-Schmidt on Gaussian columns.
fn random_rotation(n: usize, rng: &mut Rng) -> Tensor {
    loop {
        let g = rng.randn(&[n, n]);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut degenerate = false;
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g.get(&[i, j])).collect();
            for u in &cols {
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= dot * ui);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
        if degenerate {
            continue;
        }
        let mut q = Tensor::zeros(&[n, n]);
        for (j, col) in cols.iter().enumerate() {
            for (i, &val) in col.iter().enumerate() {
                q.set(&[i, j], val);
            }
        }
        if linalg::det(&q).unwrap_or(0.0) < 0.0 {
            for i in 0..n {
                q.set(&[i, 0], -q.get(&[i, 0]));
            }
        }
        return q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(x: &Tensor, b: usize, t: usize, v: usize) -> Vec<f64> {
        (0..x.shape()[1]).map(|c| x.get(&[b, c, t, v])).collect()
    }

    #[test]
    fn identity_is_identity() {
        let m = InvConv::new(2, MixerInit::Identity, &mut Rng::new(0));
        let x = Var::constant(Rng::new(1).randn(&[2, 2, 4, 3]));
        let (y, ld) = m.forward(&x).unwrap();
        assert_eq!(y.tensor(), x.tensor());
        assert_eq!(ld.item(), 0.0);
    }

    #[test]
    fn swap_exchanges_channels() {
        let m = InvConv::from_matrix(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let x = Rng::new(2).randn(&[1, 2, 4, 3]);
        let (y, ld) = m.forward(&Var::constant(x.clone())).unwrap();
        let y = y.tensor();
        for t in 0..4 {
            for v in 0..3 {
                assert_eq!(y.get(&[0, 0, t, v]), x.get(&[0, 1, t, v]));
                assert_eq!(y.get(&[0, 1, t, v]), x.get(&[0, 0, t, v]));
            }
        }
        assert_eq!(ld.item(), 0.0);
    }

    #[test]
    fn diagonal_logdet() {
        let m = InvConv::from_matrix(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap())
            .unwrap();
        let (_, ld) = m
            .forward(&Var::constant(Tensor::ones(&[1, 2, 4, 3])))
            .unwrap();
        assert!((ld.item() - 12.0 * 6f64.ln()).abs() < 1e-12);
        assert!((ld.item() - 21.5011).abs() < 5e-5);
    }

    #[test]
    fn mixes_every_site() {
        let q = Rng::new(3).randn(&[3, 3]);
        let m = InvConv::from_matrix(q.clone()).unwrap();
        let x = Rng::new(4).randn(&[2, 3, 2, 2]);
        let y = m.forward(&Var::constant(x.clone())).unwrap().0.tensor();
        for b in 0..2 {
            for t in 0..2 {
                for v in 0..2 {
                    let xs = site(&x, b, t, v);
                    let ys = site(&y, b, t, v);
                    for (i, yi) in ys.iter().enumerate() {
                        let expect: f64 = (0..3).map(|j| q.get(&[i, j]) * xs[j]).sum();
                        assert!((yi - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_det() {
        let mut rng = Rng::new(5);
        for n in [2, 3, 5] {
            let q = random_rotation(n, &mut rng);
            assert!((linalg::det(&q).unwrap() - 1.0).abs() < 1e-12);
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|k| q.get(&[k, i]) * q.get(&[k, j])).sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inverse_roundtrip() {
        let m = InvConv::from_matrix(Rng::new(6).randn(&[2, 2])).unwrap();
        let x = Var::constant(Rng::new(7).randn(&[3, 2, 4, 3]));
        let (y, ld) = m.forward(&x).unwrap();
        let (back, ld_inv) = m.inverse(&y).unwrap();
        assert!(back.tensor().max_abs_diff(&x.tensor()) < 1e-12);
        assert!((ld.item() + ld_inv.item()).abs() < 1e-10);
    }

    #[test]
    fn singular_matrix_rejected() {
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(InvConv::from_matrix(q), Err(Error::Singular)));
    }
}
