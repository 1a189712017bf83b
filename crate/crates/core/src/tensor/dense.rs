use super::{finish, LayerParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct DenseCache {
    input: Vec<f64>,
    rows: usize,
    features: usize,
}

/// Affine map `input · Wᵀ + b` over `[B, F]` rows.
pub fn dense(input: &Tensor, params: &LayerParams) -> Result<(Tensor, DenseCache)> {
    let (shape, out, cache) = dense_raw(input, params)?;
    Ok((finish(shape, out)?, cache))
}

fn dense_raw(input: &Tensor, params: &LayerParams) -> Result<(Vec<usize>, Vec<f64>, DenseCache)> {
    let (b, f) = input.dims2()?;
    let (o, wf) = params.weights.dims2()?;
    if wf != f {
        return Err(Error::dim(format!(
            "dense layer expects {wf} features, got {f}"
        )));
    }
    if params.bias.len() != o {
        return Err(Error::dim("dense bias length mismatch"));
    }
    let x = input.to_f64();
    let w = params.weights.data();
    let bias = params.bias.data();
    let mut out = vec![0.0f64; b * o];
    for r in 0..b {
        let xr = &x[r * f..(r + 1) * f];
        for k in 0..o {
            let wr = &w[k * f..(k + 1) * f];
            out[r * o + k] =
                bias[k] as f64 + xr.iter().zip(wr).map(|(a, &w)| a * w as f64).sum::<f64>();
        }
    }
    Ok((
        vec![b, o],
        out,
        DenseCache {
            input: x,
            rows: b,
            features: f,
        },
    ))
}

pub fn dense_backward(
    cache: &DenseCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let gi = backward_impl(cache, params, grad_out, true)?;
    finish(vec![cache.rows, cache.features], gi)
}

pub fn dense_param_grads(
    cache: &DenseCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<()> {
    backward_impl(cache, params, grad_out, false).map(|_| ())
}

fn backward_impl(
    cache: &DenseCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<Vec<f64>> {
    let (b, o) = grad_out.dims2()?;
    let f = cache.features;
    if b != cache.rows || params.weights.shape() != [o, f] {
        return Err(Error::dim("dense upstream gradient shape mismatch"));
    }
    let g = grad_out.to_f64();
    let w = params.weights.to_f64();
    let mut gw = vec![0.0f64; o * f];
    let mut gb = vec![0.0f64; o];
    let mut gi = if want_input {
        vec![0.0f64; b * f]
    } else {
        Vec::new()
    };
    for r in 0..b {
        let xr = &cache.input[r * f..(r + 1) * f];
        for k in 0..o {
            let gv = g[r * o + k];
            gb[k] += gv;
            for (acc, xv) in gw[k * f..(k + 1) * f].iter_mut().zip(xr) {
                *acc += gv * xv;
            }
            if want_input {
                for (acc, wv) in gi[r * f..(r + 1) * f]
                    .iter_mut()
                    .zip(&w[k * f..(k + 1) * f])
                {
                    *acc += gv * wv;
                }
            }
        }
    }
    params.weights.accumulate_grad(&gw);
    params.bias.accumulate_grad(&gb);
    Ok(gi)
}
