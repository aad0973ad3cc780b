//! Finite-difference oracles shared by unit tests.

use crate::error::Result;
use crate::numerics::{no_grad, Tensor, Var};

pub(crate) const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that two near-zero values compare as equal.
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs() / 1e-8
    } else {
        (a - b).abs() / scale
    }
}

/// Central-difference gradient of a scalar function of the parameters.
pub(crate) fn numeric_grad(params: &[Var], f: &dyn Fn() -> Result<Var>) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| {
            let base = p.tensor();
            let mut g = Tensor::zeros(base.shape());
            for i in 0..base.numel() {
                let mut plus = base.clone();
                plus.data_mut()[i] += FD_STEP;
                p.set_value(plus).unwrap();
                let fp = no_grad(f).unwrap().item();
                let mut minus = base.clone();
                minus.data_mut()[i] -= FD_STEP;
                p.set_value(minus).unwrap();
                let fm = no_grad(f).unwrap().item();
                g.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
            }
            p.set_value(base).unwrap();
            g
        })
        .collect()
}

/// Worst relative error between reverse-mode and finite-difference gradients.
pub(crate) fn gradcheck(params: &[Var], f: &dyn Fn() -> Result<Var>) -> f64 {
    params.iter().for_each(Var::zero_grad);
    f().unwrap().backward().unwrap();
    let analytic: Vec<Tensor> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape())))
        .collect();
    let numeric = numeric_grad(params, f);
    params.iter().for_each(Var::zero_grad);
    analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| rel_err(x, y)))
        .fold(0.0, f64::max)
}
