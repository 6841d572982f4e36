use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `f` at `params` with central finite
/// differences of step `h`.
///
/// `f` receives a fresh graph and the parameter leaf and must return a
/// scalar. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, params: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Argument(format!("finite difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let p = g.param(params.clone());
    let loss = f(&mut g, p)?;
    g.backward(loss)?;
    let analytic = g.grad(p);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(t);
        let out = f(&mut g, p)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..params.numel() {
        let mut plus = params.clone();
        plus.data_mut()[i] += h;
        let mut minus = params.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
