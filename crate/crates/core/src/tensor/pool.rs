use super::{finish, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_shape: [usize; 4],
    out_shape: [usize; 4],
}

impl PoolCache {
    /// Flat input index selected for each output.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2 in ceil mode: a trailing odd row or column
/// forms a partial window. Ties resolve to the first element in row-major
/// order.
pub fn max_pool2d(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let (b, c, h, w) = input.dims4()?;
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let x = input.to_f64();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                argmax.push(best);
                out.push(x[best]);
            }
        }
    }
    Ok((
        finish(vec![b, c, oh, ow], out)?,
        PoolCache {
            argmax,
            input_shape: [b, c, h, w],
            out_shape: [b, c, oh, ow],
        },
    ))
}

/// Routes each upstream gradient to the argmax of its window.
pub fn max_pool2d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.out_shape {
        return Err(Error::dim("pool upstream gradient shape mismatch"));
    }
    let n: usize = cache.input_shape.iter().product();
    let mut gi = vec![0.0f64; n];
    for (&src, &g) in cache.argmax.iter().zip(grad_out.data()) {
        gi[src] += g as f64;
    }
    finish(cache.input_shape.to_vec(), gi)
}
