use super::{finish, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

impl ReluCache {
    /// Which inputs were active.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

pub fn relu(input: &Tensor) -> (Tensor, ReluCache) {
    let x = input.to_f64();
    let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let data = x
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    (
        finish(input.shape().to_vec(), data).expect("relu of a finite tensor is finite"),
        ReluCache {
            mask,
            shape: input.shape().to_vec(),
        },
    )
}

/// Masks the upstream gradient by positivity of the forward input; the
/// subgradient at exactly zero is zero.
pub fn relu_backward(cache: &ReluCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.shape {
        return Err(Error::dim("relu upstream gradient shape mismatch"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts_unchecked(cache.shape.clone(), data))
}

/// Row-wise softmax over `[B, C]`, stabilised by subtracting the row max.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let (b, c) = input.dims2()?;
    let x = input.to_f64();
    let mut out = vec![0.0f64; b * c];
    for r in 0..b {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        out[r * c..(r + 1) * c].iter_mut().for_each(|o| *o /= z);
    }
    finish(vec![b, c], out)
}

/// Vector-Jacobian product through softmax given its forward output.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c) = output.dims2()?;
    if grad_out.shape() != output.shape() {
        return Err(Error::dim("softmax upstream gradient shape mismatch"));
    }
    let y = output.data();
    let g = grad_out.data();
    let mut dx = vec![0.0f64; b * c];
    for r in 0..b {
        let ys = &y[r * c..(r + 1) * c];
        let gs = &g[r * c..(r + 1) * c];
        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a as f64 * b as f64).sum();
        for k in 0..c {
            dx[r * c + k] = ys[k] as f64 * (gs[k] as f64 - dot);
        }
    }
    finish(vec![b, c], dx)
}
