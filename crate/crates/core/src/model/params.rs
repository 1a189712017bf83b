use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Modality, ModelConfig, UpsampleBranch};
use crate::data::container::NamedArray;
use crate::error::{Error, Result};
use crate::tensor::{LayerKind, LayerParams, Tensor, TensorBundle};

/// Encoder of one modality: conv3x3 (same) + batch norm (+ ReLU).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub conv: LayerParams,
    pub bn: LayerParams,
}

/// Two sets of conv1x1 + batch norm (+ ReLU + 2x2 max pool).
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleParams {
    pub conv_a: LayerParams,
    pub bn_a: LayerParams,
    pub conv_b: LayerParams,
    pub bn_b: LayerParams,
}

impl UpsampleParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (b, u) = (cfg.branch_channels, cfg.upsample_channels);
        UpsampleParams {
            conv_a: LayerParams::conv(LayerKind::Conv1x1, u, b, rng),
            bn_a: LayerParams::batch_norm(u),
            conv_b: LayerParams::conv(LayerKind::Conv1x1, u, u, rng),
            bn_b: LayerParams::batch_norm(u),
        }
    }

    fn layers(&self) -> [&LayerParams; 4] {
        [&self.conv_a, &self.bn_a, &self.conv_b, &self.bn_b]
    }

    fn layers_mut(&mut self) -> [&mut LayerParams; 4] {
        [
            &mut self.conv_a,
            &mut self.bn_a,
            &mut self.conv_b,
            &mut self.bn_b,
        ]
    }

    pub fn same_shapes(&self, other: &UpsampleParams) -> bool {
        self.layers().iter().zip(other.layers()).all(|(a, b)| {
            a.weights.shape() == b.weights.shape() && a.bias.shape() == b.bias.shape()
        })
    }
}

/// All learnable state of the fusion network: one encoder per modality, the
/// two upsample modules shared by both modalities, and the three classifier
/// heads (own features, partner features, fused features).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModelParams {
    pub config: ModelConfig,
    pub branches: [BranchParams; 2],
    pub upsample_f1: UpsampleParams,
    pub upsample_f2: UpsampleParams,
    pub head_self: LayerParams,
    pub head_other: LayerParams,
    pub head_fusion: LayerParams,
}

/// Which parts of a layer a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }

    fn suffix(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::BnScale => "scale",
            TensorRole::BnShift => "shift",
            TensorRole::RunningMean => "running_mean",
            TensorRole::RunningVar => "running_var",
        }
    }
}

fn layer_entries<'a>(
    prefix: String,
    layer: &'a LayerParams,
    out: &mut Vec<(String, TensorRole, &'a Tensor)>,
) {
    let mut push = |role: TensorRole, t: &'a Tensor| {
        out.push((format!("{prefix}.{}", role.suffix()), role, t))
    };
    if layer.kind == LayerKind::BatchNorm {
        push(TensorRole::BnScale, &layer.weights);
        push(TensorRole::BnShift, &layer.bias);
        if let Some(m) = &layer.running_mean {
            push(TensorRole::RunningMean, m);
        }
        if let Some(v) = &layer.running_var {
            push(TensorRole::RunningVar, v);
        }
    } else {
        push(TensorRole::Weight, &layer.weights);
        push(TensorRole::Bias, &layer.bias);
    }
}

fn layer_entries_mut<'a>(layer: &'a mut LayerParams, out: &mut Vec<(TensorRole, &'a mut Tensor)>) {
    if layer.kind == LayerKind::BatchNorm {
        out.push((TensorRole::BnScale, &mut layer.weights));
        out.push((TensorRole::BnShift, &mut layer.bias));
        if let Some(m) = layer.running_mean.as_mut() {
            out.push((TensorRole::RunningMean, m));
        }
        if let Some(v) = layer.running_var.as_mut() {
            out.push((TensorRole::RunningVar, v));
        }
    } else {
        out.push((TensorRole::Weight, &mut layer.weights));
        out.push((TensorRole::Bias, &mut layer.bias));
    }
}

impl FusionModelParams {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = |c_in: usize, rng: &mut ChaCha8Rng| BranchParams {
            conv: LayerParams::conv(LayerKind::Conv3x3, config.branch_channels, c_in, rng),
            bn: LayerParams::batch_norm(config.branch_channels),
        };
        let branches = [
            branch(config.in_channels[0], &mut rng),
            branch(config.in_channels[1], &mut rng),
        ];
        let upsample_f1 = UpsampleParams::init(&config, &mut rng);
        let upsample_f2 = UpsampleParams::init(&config, &mut rng);
        let feat = config.feature_len();
        let head_self = LayerParams::dense(config.classes, feat, &mut rng);
        let head_other = LayerParams::dense(config.classes, feat, &mut rng);
        let head_fusion = LayerParams::dense(config.classes, 2 * feat, &mut rng);
        Ok(FusionModelParams {
            config,
            branches,
            upsample_f1,
            upsample_f2,
            head_self,
            head_other,
            head_fusion,
        })
    }

    pub fn branch(&self, m: Modality) -> &BranchParams {
        &self.branches[m.index()]
    }

    pub fn branch_mut(&mut self, m: Modality) -> &mut BranchParams {
        &mut self.branches[m.index()]
    }

    pub fn upsample(&self, which: UpsampleBranch) -> &UpsampleParams {
        match which {
            UpsampleBranch::F1 => &self.upsample_f1,
            UpsampleBranch::F2 => &self.upsample_f2,
        }
    }

    pub fn upsample_mut(&mut self, which: UpsampleBranch) -> &mut UpsampleParams {
        match which {
            UpsampleBranch::F1 => &mut self.upsample_f1,
            UpsampleBranch::F2 => &mut self.upsample_f2,
        }
    }

    pub fn l2_coeff(&self) -> f64 {
        self.config.l2_coeff
    }

    fn layers(&self) -> Vec<(String, &LayerParams)> {
        let mut v = Vec::new();
        for m in Modality::ALL {
            let b = self.branch(m);
            v.push((format!("branch.{m}.conv"), &b.conv));
            v.push((format!("branch.{m}.bn"), &b.bn));
        }
        for (tag, up) in [("f1", &self.upsample_f1), ("f2", &self.upsample_f2)] {
            for (name, l) in ["conv_a", "bn_a", "conv_b", "bn_b"].iter().zip(up.layers()) {
                v.push((format!("upsample.{tag}.{name}"), l));
            }
        }
        v.push(("head.self".into(), &self.head_self));
        v.push(("head.other".into(), &self.head_other));
        v.push(("head.fusion".into(), &self.head_fusion));
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut v: Vec<&mut LayerParams> = Vec::new();
        for b in self.branches.iter_mut() {
            v.push(&mut b.conv);
            v.push(&mut b.bn);
        }
        v.extend(self.upsample_f1.layers_mut());
        v.extend(self.upsample_f2.layers_mut());
        v.push(&mut self.head_self);
        v.push(&mut self.head_other);
        v.push(&mut self.head_fusion);
        v
    }

    /// Every tensor with its canonical name and role, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layer) in self.layers() {
            layer_entries(prefix, layer, &mut out);
        }
        out
    }

    pub fn tensors_with_roles_mut(&mut self) -> Vec<(TensorRole, &mut Tensor)> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            layer_entries_mut(layer, &mut out);
        }
        out
    }

    /// Canonical tensor names, the schema of model messages and checkpoints.
    pub fn tensor_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for layer in self.layers_mut() {
            layer.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.tensors_with_roles_mut() {
            t.clear_grad();
        }
    }

    /// Gradient bundle with the same layout as the parameters. Running
    /// statistics carry zeros.
    pub fn gradients(&self) -> FusionModelParams {
        let mut g = self.clone();
        for (_, t) in g.tensors_with_roles_mut() {
            let grad = t.grad_tensor();
            *t = grad;
        }
        g
    }

    /// Squared norm of every parameter tensor, useful for logging.
    pub fn sum_squares(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, _, t)| t.sum_squares())
            .sum()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &FusionModelParams) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn max_abs_diff(&self, other: &FusionModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    /// Serialises the parameters (and the architecture) as named arrays.
    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let c = &self.config;
        let mut arrays = vec![
            NamedArray::i32(
                "config.shape",
                vec![6],
                [
                    c.in_channels[0],
                    c.in_channels[1],
                    c.branch_channels,
                    c.upsample_channels,
                    c.patch,
                    c.classes,
                ]
                .iter()
                .map(|&v| v as i32)
                .collect(),
            ),
            // f64 bit pattern split into low and high words
            NamedArray::i32("config.l2_coeff", vec![2], {
                let bits = c.l2_coeff.to_bits();
                vec![bits as u32 as i32, (bits >> 32) as u32 as i32]
            }),
        ];
        for (name, _, t) in self.named_tensors() {
            arrays.push(NamedArray::f32(name, t.shape().to_vec(), t.data().to_vec()));
        }
        arrays
    }

    /// Rebuilds parameters from [`to_arrays`](Self::to_arrays) output,
    /// checking names and shapes against the declared architecture.
    pub fn from_arrays(arrays: &[NamedArray]) -> Result<Self> {
        let find = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::arg(format!("checkpoint is missing {name}")))
        };
        let shape = find("config.shape")?
            .as_i32()
            .filter(|v| v.len() == 6 && v.iter().all(|&x| x > 0))
            .ok_or_else(|| Error::arg("malformed config.shape"))?;
        let l2 = find("config.l2_coeff")?
            .as_i32()
            .filter(|v| v.len() == 2)
            .map(|v| f64::from_bits((v[0] as u32 as u64) | ((v[1] as u32 as u64) << 32)))
            .ok_or_else(|| Error::arg("malformed config.l2_coeff"))?;
        let config = ModelConfig {
            in_channels: [shape[0] as usize, shape[1] as usize],
            branch_channels: shape[2] as usize,
            upsample_channels: shape[3] as usize,
            patch: shape[4] as usize,
            classes: shape[5] as usize,
            l2_coeff: l2,
        };
        let mut params = FusionModelParams::init(config, 0)?;
        let names = params.tensor_names();
        if arrays.len() != names.len() + 2 {
            return Err(Error::arg(format!(
                "checkpoint holds {} arrays, architecture needs {}",
                arrays.len(),
                names.len() + 2
            )));
        }
        for (name, (_, t)) in names.iter().zip(params.tensors_with_roles_mut()) {
            let a = find(name)?;
            let data = a
                .as_f32()
                .ok_or_else(|| Error::arg(format!("{name} must be f32")))?;
            if a.dims != t.shape() {
                return Err(Error::dim(format!(
                    "{name}: expected {:?}, found {:?}",
                    t.shape(),
                    a.dims
                )));
            }
            *t = Tensor::new(a.dims.clone(), data.to_vec())?;
        }
        Ok(params)
    }

    /// Weight tensors that take part in a client's forward pass and hence in
    /// its L2 penalty.
    pub(crate) fn decayed_layers_mut(
        &mut self,
        own: Modality,
        fusion: bool,
    ) -> Vec<&mut LayerParams> {
        let mut v: Vec<&mut LayerParams> = vec![&mut self.branches[own.index()].conv];
        v.push(&mut self.upsample_f1.conv_a);
        v.push(&mut self.upsample_f1.conv_b);
        v.push(&mut self.upsample_f2.conv_a);
        v.push(&mut self.upsample_f2.conv_b);
        v.push(&mut self.head_self);
        if fusion {
            v.push(&mut self.head_other);
            v.push(&mut self.head_fusion);
        }
        v
    }

    pub(crate) fn decayed_layers(&self, own: Modality, fusion: bool) -> Vec<&LayerParams> {
        let mut v: Vec<&LayerParams> = vec![&self.branches[own.index()].conv];
        v.push(&self.upsample_f1.conv_a);
        v.push(&self.upsample_f1.conv_b);
        v.push(&self.upsample_f2.conv_a);
        v.push(&self.upsample_f2.conv_b);
        v.push(&self.head_self);
        if fusion {
            v.push(&self.head_other);
            v.push(&self.head_fusion);
        }
        v
    }
}

impl TensorBundle for FusionModelParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors()
            .into_iter()
            .map(|(_, _, t)| t)
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_with_roles_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    }
}
