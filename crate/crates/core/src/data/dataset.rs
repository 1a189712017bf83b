use std::path::Path;

use super::container::{decode_container, encode_container, NamedArray};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::Tensor;

/// Two co-registered rasters of one scene with shared labels.
///
/// Rasters are `[h, w, c]` row-major. Labels are `0` for background and
/// `1..=C` for classes. Pixel indices are flat `row * w + col`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub modality1: Tensor,
    pub modality2: Tensor,
    pub labels: Vec<i32>,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl MultimodalDataset {
    pub fn raster(&self, m: Modality) -> &Tensor {
        match m {
            Modality::M1 => &self.modality1,
            Modality::M2 => &self.modality2,
        }
    }

    pub fn channels(&self, m: Modality) -> usize {
        self.raster(m).shape()[2]
    }

    pub fn label_at(&self, index: usize) -> i32 {
        self.labels[index]
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        for (name, r) in [("modality1", &self.modality1), ("modality2", &self.modality2)] {
            if r.shape().len() != 3 || r.shape()[0] != h || r.shape()[1] != w {
                return Err(Error::dim(format!("{name} raster {:?} does not match {h}x{w}", r.shape())));
            }
        }
        if self.labels.len() != h * w {
            return Err(Error::dim(format!("{} labels for a {h}x{w} scene", self.labels.len())));
        }
        if self.class_count < 1 {
            return Err(Error::arg("class count must be positive"));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l < 0 || l as usize > self.class_count) {
            return Err(Error::arg(format!("label {bad} outside 0..={}", self.class_count)));
        }
        let mut seen = vec![false; h * w];
        for (name, idx) in [("train", &self.train_idx), ("test", &self.test_idx)] {
            for &i in idx {
                if i >= h * w {
                    return Err(Error::arg(format!("{name} index {i} outside the raster")));
                }
                if self.labels[i] == 0 {
                    return Err(Error::arg(format!("{name} index {i} is background")));
                }
                if seen[i] {
                    return Err(Error::arg(format!("pixel {i} listed twice across train/test")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let idx = |v: &[usize]| v.iter().map(|&i| i as i32).collect::<Vec<_>>();
        vec![
            NamedArray::f32("modality1", self.modality1.shape().to_vec(), self.modality1.data().to_vec()),
            NamedArray::f32("modality2", self.modality2.shape().to_vec(), self.modality2.data().to_vec()),
            NamedArray::i32("labels", vec![self.height, self.width], self.labels.clone()),
            NamedArray::i32("class_count", vec![1], vec![self.class_count as i32]),
            NamedArray::i32("train_idx", vec![self.train_idx.len()], idx(&self.train_idx)),
            NamedArray::i32("test_idx", vec![self.test_idx.len()], idx(&self.test_idx)),
        ]
    }

    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::arg(format!("dataset is missing array {name:?}")))
        };
        let raster = |name: &str| -> Result<Tensor> {
            let a = find(name)?;
            let data = a.as_f32().ok_or_else(|| Error::arg(format!("{name} must be f32")))?;
            Tensor::new(a.dims.clone(), data.to_vec())
        };
        let ints = |name: &str| -> Result<(&[usize], &[i32])> {
            let a = find(name)?;
            let data = a.as_i32().ok_or_else(|| Error::arg(format!("{name} must be i32")))?;
            Ok((&a.dims, data))
        };
        let indices = |name: &str| -> Result<Vec<usize>> {
            let (_, v) = ints(name)?;
            v.iter()
                .map(|&i| usize::try_from(i).map_err(|_| Error::arg(format!("negative index in {name}"))))
                .collect()
        };
        let (dims, labels) = ints("labels")?;
        if dims.len() != 2 {
            return Err(Error::dim("labels must be rank 2"));
        }
        let (_, cc) = ints("class_count")?;
        let class_count = match cc {
            [c] if *c > 0 => *c as usize,
            _ => return Err(Error::arg("class_count must hold one positive value")),
        };
        let d = MultimodalDataset {
            modality1: raster("modality1")?,
            modality2: raster("modality2")?,
            labels: labels.to_vec(),
            height: dims[0],
            width: dims[1],
            class_count,
            train_idx: indices("train_idx")?,
            test_idx: indices("test_idx")?,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        encode_container(&self.to_arrays())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        MultimodalDataset::from_arrays(&decode_container(bytes)?)
    }
}

pub fn save_dataset(d: &MultimodalDataset, path: &Path) -> Result<()> {
    std::fs::write(path, d.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<MultimodalDataset> {
    MultimodalDataset::from_bytes(&std::fs::read(path)?)
}
