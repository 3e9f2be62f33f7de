use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of `x`, with central differences of step `eps`.
pub fn gradcheck(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    let all: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, eps, &all)
}

/// [`gradcheck`] restricted to the listed flat coordinates.
pub fn gradcheck_coords(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64> {
    let leaf = x.detach().requires_grad();
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    let base = x.to_vec();
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut d = base.clone();
        d[i] += delta;
        let t = Tensor::new(d, x.shape())?;
        no_grad(|| f(&t)).map(|v| v.item())
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
