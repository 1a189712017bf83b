//! Dense f32 tensors and the hand-written layers of the fusion network.
//!
//! Every layer exposes a forward function that returns its output together
//! with a cache, and a backward function that consumes the cache, writes
//! parameter gradients into the parameters' grad slots and returns the
//! gradient with respect to the layer input. Accumulation happens in f64;
//! storage stays f32. Inside [`with_f64_shadow`] every layer output also
//! keeps its unrounded f64 values, which downstream layers read instead of
//! the stored f32 data.

mod activation;
mod conv;
mod dense;
pub mod gradcheck;
mod layer;
mod norm;
mod pool;

pub use activation::{relu, relu_backward, softmax, softmax_backward, ReluCache};
pub use conv::{conv2d, conv2d_backward, conv2d_param_grads, Conv2dCache, Padding};
pub use dense::{dense, dense_backward, dense_param_grads, DenseCache};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layer::{LayerKind, LayerParams};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, BatchNormCache, BnMode, BN_EPS,
    BN_MOMENTUM,
};
pub use pool::{max_pool2d, max_pool2d_backward, PoolCache};

use std::cell::Cell;

use crate::error::{Error, Result};

thread_local! {
    static SHADOW: Cell<bool> = const { Cell::new(false) };
}

/// Evaluates `f` with f64 shadow values carried through every layer, so a
/// chained forward pass is free of intermediate f32 rounding. Read the
/// result with [`Tensor::to_f64`].
pub fn with_f64_shadow<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            SHADOW.with(|s| s.set(self.0));
        }
    }
    let _restore = Restore(SHADOW.with(|s| s.replace(true)));
    f()
}

fn shadow_enabled() -> bool {
    SHADOW.with(Cell::get)
}

/// Row-major f32 array with shape metadata and an optional gradient buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    shadow: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            shadow: None,
        })
    }

    /// Builds a tensor from values accumulated in f64.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        if shape.is_empty()
            || shape.contains(&0)
            || shape.iter().product::<usize>() != data.len()
        {
            return Err(Error::dim(format!(
                "shape {shape:?} does not fit {} values",
                data.len()
            )));
        }
        finish(shape, data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(value.is_finite());
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "bad shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            shadow: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::filled(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep every entry finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        self.shadow = None;
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values widened to f64, or the unrounded shadow when one is present.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.shadow {
            Some(s) => s.clone(),
            None => self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Interprets the tensor as `[B, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds f64-accumulated values into the gradient slot.
    pub fn accumulate_grad(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.data.len());
        let g = self.grad_mut();
        for (dst, &v) in g.iter_mut().zip(values) {
            *dst = (*dst as f64 + v) as f32;
        }
    }

    /// Gradient as a standalone tensor (zeros if no gradient was recorded).
    pub fn grad_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; self.data.len()]),
            grad: None,
            shadow: None,
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Bitwise equality of shape and values (ignores gradients).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .to_f64()
            .into_iter()
            .zip(other.to_f64())
            .map(|(a, b)| a + b)
            .collect();
        finish(self.shape.clone(), data)
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (b, _, h, w) = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?
            .dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::dim(format!("concat shape mismatch {:?}", p.shape())));
            }
            total_c += pc;
        }
        let plane = h * w;
        let values: Vec<Vec<f64>> = parts.iter().map(|p| p.to_f64()).collect();
        let mut data = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for (p, v) in parts.iter().zip(&values) {
                let c = p.shape[1];
                let start = bi * c * plane;
                data.extend_from_slice(&v[start..start + c * plane]);
            }
        }
        finish(vec![b, total_c, h, w], data)
    }

    /// Splits a rank-4 tensor along channels into pieces of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let (b, c, h, w) = self.dims4()?;
        if widths.iter().sum::<usize>() != c {
            return Err(Error::dim(format!(
                "split widths {widths:?} do not sum to {c}"
            )));
        }
        let plane = h * w;
        let values = self.to_f64();
        let mut out: Vec<Vec<f64>> = widths
            .iter()
            .map(|&wc| Vec::with_capacity(b * wc * plane))
            .collect();
        for bi in 0..b {
            let mut offset = bi * c * plane;
            for (k, &wc) in widths.iter().enumerate() {
                out[k].extend_from_slice(&values[offset..offset + wc * plane]);
                offset += wc * plane;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &wc)| finish(vec![b, wc, h, w], d))
            .collect()
    }

    /// Rows `start..start+count` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor> {
        let b = self.shape[0];
        if count == 0 || start + count > b {
            return Err(Error::dim(format!(
                "batch slice {start}+{count} out of {b}"
            )));
        }
        let stride = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Tensor::new(
            shape,
            self.data[start * stride..(start + count) * stride].to_vec(),
        )
    }

    /// Gathers rows along the leading axis.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Tensor> {
        let b = self.shape[0];
        if rows.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let stride = self.data.len() / b;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= b {
                return Err(Error::dim(format!("row {r} out of {b}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim(format!("batch concat mismatch {:?}", p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            shadow: None,
        }
    }
}

/// Compares shape and stored f32 data; shadows are ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Converts f64 buffers produced by a layer into a checked tensor.
pub(crate) fn finish(shape: Vec<usize>, acc: Vec<f64>) -> Result<Tensor> {
    let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut t = Tensor::from_parts_unchecked(shape, data);
    if shadow_enabled() {
        t.shadow = Some(acc);
    }
    Ok(t)
}

/// A fixed, ordered collection of tensors (model parameters, gradient
/// bundles). Aggregation and averaging operate position-wise over it.
pub trait TensorBundle: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// True when both bundles hold the same number of tensors with identical
    /// shapes in the same order.
    fn same_layout(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }
}

impl TensorBundle for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![0, 2], vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Tensor::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::zeros(&[2, 3]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0; 6]);
        t.accumulate_grad(&[0.5; 6]);
        assert_eq!(t.grad().unwrap(), &[1.5; 6]);
        assert_eq!(t.grad_tensor().shape(), t.shape());
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 6]);
    }

    #[test]
    fn channel_concat_and_split_invert() {
        let a = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2, 1, 2], (0..8).map(|v| v as f32 * 10.0).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 1, 2]);
        assert_eq!(&cat.data()[..6], &[1.0, 2.0, 0.0, 10.0, 20.0, 30.0]);
        let parts = cat.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
