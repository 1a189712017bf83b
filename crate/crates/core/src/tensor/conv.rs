use super::{finish, LayerParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial size (odd kernels pad symmetrically).
    Same,
    Valid,
}

/// Saved forward state for [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct Conv2dCache {
    input: Vec<f64>,
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    pad: (usize, usize),
}

struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
}

impl Geometry {
    /// Output index range `[lo, hi)` along one axis for kernel offset `k`.
    fn range(k: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize, isize) {
        let delta = k as isize - pad as isize;
        let lo = (-delta).max(0) as usize;
        let hi = (in_len as isize - delta).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo), delta)
    }
}

fn geometry(input_shape: [usize; 4], params: &LayerParams, padding: Padding) -> Result<Geometry> {
    let [b, c, h, w] = input_shape;
    let (o, ci, kh, kw) = params.weights.dims4()?;
    if ci != c {
        return Err(Error::dim(format!(
            "conv expects {ci} input channels, got {c}"
        )));
    }
    if params.bias.len() != o {
        return Err(Error::dim(format!(
            "conv bias has {} entries for {o} outputs",
            params.bias.len()
        )));
    }
    let (pt, pl, oh, ow) = match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::dim(format!(
                    "{kh}x{kw} kernel does not fit {h}x{w} input"
                )));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(Geometry {
        b,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
        pt,
        pl,
    })
}

/// 2-D cross-correlation over a `[B, C, H, W]` batch.
pub fn conv2d(
    input: &Tensor,
    params: &LayerParams,
    padding: Padding,
) -> Result<(Tensor, Conv2dCache)> {
    let (shape, out, cache) = conv2d_raw(input, params, padding)?;
    Ok((finish(shape, out)?, cache))
}

fn conv2d_raw(
    input: &Tensor,
    params: &LayerParams,
    padding: Padding,
) -> Result<(Vec<usize>, Vec<f64>, Conv2dCache)> {
    let (b, c, h, w) = input.dims4()?;
    let g = geometry([b, c, h, w], params, padding)?;
    let x = input.to_f64();
    let wt = params.weights.to_f64();
    let bias = params.bias.to_f64();
    let plane_in = h * w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0f64; b * g.o * plane_out];

    for bi in 0..b {
        for oc in 0..g.o {
            let acc = &mut out[(bi * g.o + oc) * plane_out..][..plane_out];
            acc.fill(bias[oc]);
            for ic in 0..c {
                let xin = &x[(bi * c + ic) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (y0, y1, dy) = Geometry::range(ky, g.pt, h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wt[((oc * c + ic) * g.kh + ky) * g.kw + kx];
                        let (x0, x1, dx) = Geometry::range(kx, g.pl, w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let src = &xin[iy * w + ix0..][..x1 - x0];
                            let dst = &mut acc[y * g.ow + x0..y * g.ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    let cache = Conv2dCache {
        input: x,
        input_shape: [b, c, h, w],
        out_hw: (g.oh, g.ow),
        pad: (g.pt, g.pl),
    };
    Ok((vec![b, g.o, g.oh, g.ow], out, cache))
}

fn check_grad_shape(cache: &Conv2dCache, g: &Geometry, grad_out: &Tensor) -> Result<()> {
    let expected = [cache.input_shape[0], g.o, cache.out_hw.0, cache.out_hw.1];
    if grad_out.shape() != expected {
        return Err(Error::dim(format!(
            "conv upstream gradient {:?} does not match output {expected:?}",
            grad_out.shape()
        )));
    }
    Ok(())
}

fn cached_geometry(cache: &Conv2dCache, params: &LayerParams) -> Result<Geometry> {
    let [b, c, h, w] = cache.input_shape;
    let (o, ci, kh, kw) = params.weights.dims4()?;
    if ci != c {
        return Err(Error::dim(
            "conv parameters changed shape between forward and backward",
        ));
    }
    Ok(Geometry {
        b,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: cache.out_hw.0,
        ow: cache.out_hw.1,
        pt: cache.pad.0,
        pl: cache.pad.1,
    })
}

/// Backward pass: accumulates weight and bias gradients into `params` and
/// returns the gradient with respect to the input.
pub fn conv2d_backward(
    cache: &Conv2dCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let g = cached_geometry(cache, params)?;
    check_grad_shape(cache, &g, grad_out)?;
    let gi = backward_impl(cache, params, grad_out, &g, true)?;
    finish(
        cache.input_shape.to_vec(),
        gi.expect("input gradient requested"),
    )
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer).
pub fn conv2d_param_grads(
    cache: &Conv2dCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
) -> Result<()> {
    let g = cached_geometry(cache, params)?;
    check_grad_shape(cache, &g, grad_out)?;
    backward_impl(cache, params, grad_out, &g, false)?;
    Ok(())
}

fn backward_impl(
    cache: &Conv2dCache,
    params: &mut LayerParams,
    grad_out: &Tensor,
    g: &Geometry,
    want_input: bool,
) -> Result<Option<Vec<f64>>> {
    let go = grad_out.to_f64();
    let wt = params.weights.to_f64();
    let x = &cache.input;
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gw = vec![0.0f64; wt.len()];
    let mut gb = vec![0.0f64; g.o];
    let mut gi = if want_input {
        vec![0.0f64; x.len()]
    } else {
        Vec::new()
    };

    for bi in 0..g.b {
        for oc in 0..g.o {
            let gplane = &go[(bi * g.o + oc) * plane_out..][..plane_out];
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..g.c {
                let base_in = (bi * g.c + ic) * plane_in;
                for ky in 0..g.kh {
                    let (y0, y1, dy) = Geometry::range(ky, g.pt, g.h, g.oh);
                    for kx in 0..g.kw {
                        let widx = ((oc * g.c + ic) * g.kh + ky) * g.kw + kx;
                        let wv = wt[widx];
                        let (x0, x1, dx) = Geometry::range(kx, g.pl, g.w, g.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = (x0 as isize + dx) as usize;
                        let mut dw = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &gplane[y * g.ow + x0..y * g.ow + x1];
                            let xrow = &x[base_in + iy * g.w + ix0..][..x1 - x0];
                            dw += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            if want_input {
                                let irow = &mut gi[base_in + iy * g.w + ix0..][..x1 - x0];
                                for (d, gv) in irow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        gw[widx] += dw;
                    }
                }
            }
        }
    }
    params.weights.accumulate_grad(&gw);
    params.bias.accumulate_grad(&gb);
    Ok(want_input.then_some(gi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(weights: Tensor) -> LayerParams {
        let o = weights.shape()[0];
        LayerParams::conv_from_tensors(weights, Tensor::zeros(&[o])).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct sliding-window evaluation with explicit zero padding.
    fn sliding_window(input: &Tensor, weights: &Tensor, pad: usize) -> Vec<f64> {
        let (b, c, h, w) = input.dims4().unwrap();
        let (o, _, kh, kw) = weights.dims4().unwrap();
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let at = |bi: usize, ci: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                input.data()[((bi * c + ci) * h + y as usize) * w + x as usize] as f64
            }
        };
        let mut out = Vec::new();
        for bi in 0..b {
            for oc in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wv =
                                        weights.data()[((oc * c + ci) * kh + ky) * kw + kx] as f64;
                                    s += wv
                                        * at(
                                            bi,
                                            ci,
                                            (y + ky) as isize - pad as isize,
                                            (x + kx) as isize - pad as isize,
                                        );
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_valid_sums_to_nine() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let p = layer(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let (y, _) = conv2d(&x, &p, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn delta_kernel_same_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let mut k = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            k[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let p = layer(Tensor::new(vec![3, 3, 3, 3], k).unwrap());
        let (y, _) = conv2d(&x, &p, Padding::Same).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn valid_2x2_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 1, 3, 3], &mut rng);
        let k = random(&[1, 1, 2, 2], &mut rng);
        let expected = sliding_window(&x, &k, 0);
        let (y, _) = conv2d(&x, &layer(k), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn same_3x3_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 3, 7, 7], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let expected = sliding_window(&x, &k, 1);
        let (y, _) = conv2d(&x, &layer(k), Padding::Same).unwrap();
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let p = layer(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(matches!(
            conv2d(&x, &p, Padding::Same),
            Err(Error::Dimension(_))
        ));
        let big = layer(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(
            conv2d(&x, &big, Padding::Valid),
            Err(Error::Dimension(_))
        ));
    }
}
