use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Dense,
    BatchNorm,
}

/// Learnable parameters of one layer.
///
/// Convolutions store weights as `(out_ch, in_ch, kh, kw)`, dense layers as
/// `(out, in)`. Batch norm keeps its scale in `weights`, its shift in `bias`
/// and carries running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

impl LayerParams {
    /// He-normal initialised convolution with zero bias.
    pub fn conv<R: Rng>(kind: LayerKind, out_ch: usize, in_ch: usize, rng: &mut R) -> Self {
        let k = match kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::Conv1x1 => 1,
            other => panic!("{other:?} is not a convolution"),
        };
        let fan_in = in_ch * k * k;
        let weights = he_normal(&[out_ch, in_ch, k, k], fan_in, rng);
        LayerParams {
            kind,
            weights,
            bias: Tensor::zeros(&[out_ch]),
            running_mean: None,
            running_var: None,
        }
    }

    pub fn dense<R: Rng>(out: usize, input: usize, rng: &mut R) -> Self {
        // Xavier-style scale keeps initial softmax outputs near uniform.
        let std = (1.0 / input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..out * input)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        LayerParams {
            kind: LayerKind::Dense,
            weights: Tensor::from_parts_unchecked(vec![out, input], data),
            bias: Tensor::zeros(&[out]),
            running_mean: None,
            running_var: None,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerParams {
            kind: LayerKind::BatchNorm,
            weights: Tensor::filled(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::filled(&[channels], 1.0)),
        }
    }

    /// Builds a layer from explicit tensors, checking the shape contract.
    pub fn from_tensors(kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self> {
        let out = match kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let (o, _, kh, kw) = weights.dims4()?;
                let k = if kind == LayerKind::Conv3x3 { 3 } else { 1 };
                if (kh, kw) != (k, k) {
                    return Err(Error::dim(format!(
                        "{kind:?} needs {k}x{k} kernels, got {kh}x{kw}"
                    )));
                }
                o
            }
            LayerKind::Dense => weights.dims2()?.0,
            LayerKind::BatchNorm => {
                if weights.shape().len() != 1 {
                    return Err(Error::dim("batch norm scale must be a vector"));
                }
                weights.len()
            }
        };
        if bias.shape() != [out] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        let (running_mean, running_var) = if kind == LayerKind::BatchNorm {
            (
                Some(Tensor::zeros(&[out])),
                Some(Tensor::filled(&[out], 1.0)),
            )
        } else {
            (None, None)
        };
        Ok(LayerParams {
            kind,
            weights,
            bias,
            running_mean,
            running_var,
        })
    }

    /// Convolution with an arbitrary kernel size. `conv2d` reads the kernel
    /// geometry from the weight tensor; the kind tag only distinguishes
    /// pointwise from spatial kernels.
    pub fn conv_from_tensors(weights: Tensor, bias: Tensor) -> Result<Self> {
        let (o, _, kh, kw) = weights.dims4()?;
        if bias.shape() != [o] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {o} outputs",
                bias.shape()
            )));
        }
        let kind = if kh == 1 && kw == 1 {
            LayerKind::Conv1x1
        } else {
            LayerKind::Conv3x3
        };
        Ok(LayerParams {
            kind,
            weights,
            bias,
            running_mean: None,
            running_var: None,
        })
    }

    pub fn out_features(&self) -> usize {
        self.bias.len()
    }

    pub fn zero_grad(&mut self) {
        self.weights.zero_grad();
        self.bias.zero_grad();
    }

    /// True for kinds whose `weights` count towards the L2 penalty.
    pub fn is_weight_decayed(&self) -> bool {
        self.kind != LayerKind::BatchNorm
    }
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}
