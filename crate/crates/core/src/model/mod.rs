//! The cross-modal fusion network.
//!
//! Per modality: a conv3x3 + BN + ReLU encoder, then two identically shaped
//! "upsample" modules (two rounds of conv1x1 + BN + ReLU + 2x2 max pool)
//! producing the feature pair `(Y^f1, Y^f2)`. The cross-fusion combiner sums
//! and concatenates those pairs and three dense + softmax heads classify the
//! own, partner and fused features.

mod loss;
mod network;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use loss::{
    compute_loss, loss_gradients, predict, HeadGrads, Loss, LossParts, Prediction, LOG_CLAMP,
};
pub use network::{
    branch_backward, branch_forward, client_backward, client_forward, extract_features,
    fuse_features, heads_backward, heads_forward, train_gradients, upsample_backward,
    upsample_module, BranchCache, ClientPass, HeadsCache, UpsampleCache,
};
pub use params::{BranchParams, FusionModelParams, TensorRole, UpsampleParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::M1, Modality::M2];

    pub fn index(self) -> usize {
        match self {
            Modality::M1 => 0,
            Modality::M2 => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::M1 => Modality::M2,
            Modality::M2 => Modality::M1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::M1 => "m1",
            Modality::M2 => "m2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpsampleBranch {
    F1,
    F2,
}

/// Which heads and loss terms a client uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// Own features plus partner features: CE + MSE + L2.
    Fusion,
    /// Own modality only, partner features replaced by zeros: CE + L2.
    Single,
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: [usize; 2],
    pub branch_channels: usize,
    pub upsample_channels: usize,
    pub patch: usize,
    pub classes: usize,
    pub l2_coeff: f64,
}

impl ModelConfig {
    /// Default architecture: 32-channel encoders, 64-channel upsample
    /// modules, 7x7 patches.
    pub fn new(in_channels: [usize; 2], classes: usize) -> Self {
        ModelConfig {
            in_channels,
            branch_channels: 32,
            upsample_channels: 64,
            patch: 7,
            classes,
            l2_coeff: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels[0],
            self.in_channels[1],
            self.branch_channels,
            self.upsample_channels,
            self.patch,
        ];
        if dims.contains(&0) || self.classes < 2 {
            return Err(Error::arg(format!("invalid model config {self:?}")));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::arg("l2_coeff must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Spatial size after the two ceil-mode pools.
    pub fn feature_hw(&self) -> usize {
        self.patch.div_ceil(2).div_ceil(2)
    }

    /// Shape `(P, Q)` of the per-sample feature matrix: channels by
    /// flattened spatial positions.
    pub fn feature_matrix_shape(&self) -> (usize, usize) {
        let s = self.feature_hw();
        (self.upsample_channels, s * s)
    }

    pub fn feature_len(&self) -> usize {
        let (p, q) = self.feature_matrix_shape();
        p * q
    }

    pub fn max_rank(&self) -> usize {
        let (p, q) = self.feature_matrix_shape();
        p.min(q)
    }
}

/// Output pair of the two upsample modules for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub y_f1: Tensor,
    pub y_f2: Tensor,
    pub modality: Modality,
}

impl FeatureBundle {
    pub fn new(y_f1: Tensor, y_f2: Tensor, modality: Modality) -> Result<Self> {
        y_f1.dims4()?;
        if y_f1.shape() != y_f2.shape() {
            return Err(Error::dim(format!(
                "feature pair shapes differ: {:?} vs {:?}",
                y_f1.shape(),
                y_f2.shape()
            )));
        }
        Ok(FeatureBundle {
            y_f1,
            y_f2,
            modality,
        })
    }

    pub fn zeros(shape: &[usize], modality: Modality) -> Self {
        FeatureBundle {
            y_f1: Tensor::zeros(shape),
            y_f2: Tensor::zeros(shape),
            modality,
        }
    }

    pub fn batch(&self) -> usize {
        self.y_f1.shape()[0]
    }

    pub fn gather(&self, rows: &[usize]) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            y_f1: self.y_f1.gather_batch(rows)?,
            y_f2: self.y_f2.gather_batch(rows)?,
            modality: self.modality,
        })
    }
}

/// Cross-fusion outputs: the two per-modality sums and the fused stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub j_self: Tensor,
    pub j_other: Tensor,
    pub j_fusion: Tensor,
}

/// Post-softmax class probabilities of the three heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub o1: Tensor,
    pub o2: Tensor,
    pub o_fusion: Tensor,
}
