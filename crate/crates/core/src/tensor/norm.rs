use super::{finish, LayerKind, LayerParams, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic at each training update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: [usize; 4],
    mode: BnMode,
    batch_stats: Option<BatchStats>,
}

/// Per-channel batch normalisation over `[B, C, H, W]`.
///
/// Train mode normalises with the biased batch variance and folds the batch
/// statistics into the running estimates (unbiased variance); eval mode
/// normalises with the running estimates.
pub fn batch_norm(
    input: &Tensor,
    params: &mut LayerParams,
    mode: BnMode,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (out, cache) = batch_norm_forward(input, params, mode, eps)?;
    cache.update_running(params)?;
    Ok((out, cache))
}

/// [`batch_norm`] without the running-statistics update; apply it later with
/// [`BatchNormCache::update_running`].
pub fn batch_norm_forward(
    input: &Tensor,
    params: &LayerParams,
    mode: BnMode,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (out, cache) = batch_norm_raw(input, params, mode, eps)?;
    Ok((finish(cache.shape.to_vec(), out)?, cache))
}

fn batch_norm_raw(
    input: &Tensor,
    params: &LayerParams,
    mode: BnMode,
    eps: f64,
) -> Result<(Vec<f64>, BatchNormCache)> {
    let (b, c, h, w) = input.dims4()?;
    if params.kind != LayerKind::BatchNorm {
        return Err(Error::dim(format!(
            "{:?} layer passed to batch_norm",
            params.kind
        )));
    }
    if params.weights.len() != c || params.bias.len() != c {
        return Err(Error::dim(format!(
            "batch norm has {} channels, input has {c}",
            params.weights.len()
        )));
    }
    let n = b * h * w;
    if n == 0 {
        return Err(Error::dim("batch norm over an empty batch"));
    }
    let plane = h * w;
    let x = input.to_f64();
    let gamma = params.weights.to_f64();
    let beta = params.bias.to_f64();

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += x[(bi * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += x[(bi * c + ch) * plane..][..plane]
                        .iter()
                        .map(|&v| {
                            let d = v - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / n as f64;
            }
            (mean, var)
        }
        BnMode::Eval => {
            let rm = params
                .running_mean
                .as_ref()
                .ok_or_else(|| Error::dim("batch norm without running mean"))?;
            let rv = params
                .running_var
                .as_ref()
                .ok_or_else(|| Error::dim("batch norm without running variance"))?;
            (rm.to_f64(), rv.to_f64())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let batch_stats = (mode == BnMode::Train).then_some(BatchStats {
        mean,
        var,
        count: n,
    });
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            shape: [b, c, h, w],
            mode,
            batch_stats,
        },
    ))
}

impl BatchNormCache {
    /// Folds this batch's statistics into the running estimates. A no-op for
    /// eval-mode caches.
    pub fn update_running(&self, params: &mut LayerParams) -> Result<()> {
        let Some(stats) = &self.batch_stats else {
            return Ok(());
        };
        let n = stats.count;
        let unbias = if n > 1 {
            n as f64 / (n as f64 - 1.0)
        } else {
            1.0
        };
        let rm = params
            .running_mean
            .as_mut()
            .ok_or_else(|| Error::dim("batch norm without running mean"))?;
        for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (BN_MOMENTUM * *r as f64 + (1.0 - BN_MOMENTUM) * m) as f32;
        }
        let rv = params
            .running_var
            .as_mut()
            .ok_or_else(|| Error::dim("batch norm without running variance"))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (BN_MOMENTUM * *r as f64 + (1.0 - BN_MOMENTUM) * v * unbias) as f32;
        }
        Ok(())
    }
}

pub fn batch_norm_backward(
    cache: &BatchNormCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [b, c, h, w] = cache.shape;
    if grad_out.shape() != cache.shape {
        return Err(Error::dim(format!(
            "batch norm upstream gradient {:?} does not match {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let plane = h * w;
    let n = (b * plane) as f64;
    let g = grad_out.data();
    let gamma = params.weights.to_f64();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                let gv = g[i] as f64;
                dgamma[ch] += gv * cache.xhat[i];
                dbeta[ch] += gv;
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                BnMode::Train => {
                    let mean_g = dbeta[ch] / n;
                    let mean_gx = dgamma[ch] / n;
                    for i in off..off + plane {
                        dx[i] = scale * (g[i] as f64 - mean_g - cache.xhat[i] * mean_gx);
                    }
                }
                BnMode::Eval => {
                    for i in off..off + plane {
                        dx[i] = scale * g[i] as f64;
                    }
                }
            }
        }
    }
    params.weights.accumulate_grad(&dgamma);
    params.bias.accumulate_grad(&dbeta);
    finish(cache.shape.to_vec(), dx)
}
