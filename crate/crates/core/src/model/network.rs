use super::loss::{compute_loss, loss_gradients, HeadGrads, Loss};
use super::{
    FeatureBundle, FusedFeatures, FusionModelParams, HeadOutputs, Modality, Path, UpsampleBranch,
};
use crate::error::{Error, Result};
use crate::tensor::{
    batch_norm_backward, batch_norm_forward, conv2d, conv2d_backward, conv2d_param_grads, dense,
    dense_backward, dense_param_grads, max_pool2d, max_pool2d_backward, relu, relu_backward,
    softmax, softmax_backward, BatchNormCache, BnMode, Conv2dCache, DenseCache, LayerParams,
    Padding, PoolCache, ReluCache, Tensor, BN_EPS,
};

#[derive(Clone, Debug)]
pub struct BranchCache {
    conv: Conv2dCache,
    bn: BatchNormCache,
    relu: ReluCache,
}

/// Encoder of one modality: conv3x3 (same padding), batch norm, ReLU.
pub fn branch_forward(
    patch: &Tensor,
    params: &FusionModelParams,
    modality: Modality,
    mode: BnMode,
) -> Result<(Tensor, BranchCache)> {
    let (_, c, h, w) = patch.dims4()?;
    let expected = params.config.in_channels[modality.index()];
    if c != expected {
        return Err(Error::dim(format!(
            "modality {modality} expects {expected} channels, got {c}"
        )));
    }
    let p = params.config.patch;
    if (h, w) != (p, p) {
        return Err(Error::dim(format!("expected {p}x{p} patches, got {h}x{w}")));
    }
    let branch = params.branch(modality);
    let (x, conv) = conv2d(patch, &branch.conv, Padding::Same)?;
    let (x, bn) = batch_norm_forward(&x, &branch.bn, mode, BN_EPS)?;
    let (x, relu) = relu(&x);
    Ok((x, BranchCache { conv, bn, relu }))
}

/// Accumulates encoder parameter gradients; the patch gradient is not needed.
pub fn branch_backward(
    cache: &BranchCache,
    params: &mut FusionModelParams,
    modality: Modality,
    grad: &Tensor,
) -> Result<()> {
    let branch = params.branch_mut(modality);
    let g = relu_backward(&cache.relu, grad)?;
    let g = batch_norm_backward(&cache.bn, &mut branch.bn, &g)?;
    conv2d_param_grads(&cache.conv, &mut branch.conv, &g)
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2dCache,
    bn: BatchNormCache,
    relu: ReluCache,
    pool: PoolCache,
}

#[derive(Clone, Debug)]
pub struct UpsampleCache {
    stages: [Stage; 2],
}

fn stage_forward(
    x: &Tensor,
    conv: &LayerParams,
    bn: &LayerParams,
    mode: BnMode,
) -> Result<(Tensor, Stage)> {
    let (x, conv_c) = conv2d(x, conv, Padding::Same)?;
    let (x, bn_c) = batch_norm_forward(&x, bn, mode, BN_EPS)?;
    let (x, relu_c) = relu(&x);
    let (x, pool_c) = max_pool2d(&x)?;
    Ok((
        x,
        Stage {
            conv: conv_c,
            bn: bn_c,
            relu: relu_c,
            pool: pool_c,
        },
    ))
}

fn stage_backward(
    stage: &Stage,
    conv: &mut LayerParams,
    bn: &mut LayerParams,
    grad: &Tensor,
) -> Result<Tensor> {
    let g = max_pool2d_backward(&stage.pool, grad)?;
    let g = relu_backward(&stage.relu, &g)?;
    let g = batch_norm_backward(&stage.bn, bn, &g)?;
    conv2d_backward(&stage.conv, conv, &g)
}

/// `[B, 32, 7, 7] -> [B, 64, 2, 2]` with the default architecture.
pub fn upsample_module(
    x: &Tensor,
    params: &FusionModelParams,
    which: UpsampleBranch,
    mode: BnMode,
) -> Result<(Tensor, UpsampleCache)> {
    let up = params.upsample(which);
    let (x, a) = stage_forward(x, &up.conv_a, &up.bn_a, mode)?;
    let (x, b) = stage_forward(&x, &up.conv_b, &up.bn_b, mode)?;
    Ok((x, UpsampleCache { stages: [a, b] }))
}

pub fn upsample_backward(
    cache: &UpsampleCache,
    params: &mut FusionModelParams,
    which: UpsampleBranch,
    grad: &Tensor,
) -> Result<Tensor> {
    let up = params.upsample_mut(which);
    let g = stage_backward(&cache.stages[1], &mut up.conv_b, &mut up.bn_b, grad)?;
    stage_backward(&cache.stages[0], &mut up.conv_a, &mut up.bn_a, &g)
}

/// Cross fusion of two feature bundles:
/// `j_self = a.f1 + a.f2`, `j_other = b.f1 + b.f2`,
/// `j_fusion = [a.f1 + b.f2 ; b.f1 + a.f2]` stacked along channels.
pub fn fuse_features(a: &FeatureBundle, b: &FeatureBundle) -> Result<FusedFeatures> {
    let shape = a.y_f1.shape();
    for t in [&a.y_f2, &b.y_f1, &b.y_f2] {
        if t.shape() != shape {
            return Err(Error::dim(format!(
                "feature shapes differ: {:?} vs {:?}",
                shape,
                t.shape()
            )));
        }
    }
    let j_self = a.y_f1.add(&a.y_f2)?;
    let j_other = b.y_f1.add(&b.y_f2)?;
    let cross_1 = a.y_f1.add(&b.y_f2)?;
    let cross_2 = b.y_f1.add(&a.y_f2)?;
    let j_fusion = Tensor::concat_channels(&[&cross_1, &cross_2])?;
    Ok(FusedFeatures {
        j_self,
        j_other,
        j_fusion,
    })
}

#[derive(Clone, Debug)]
pub struct HeadsCache {
    own: DenseCache,
    other: DenseCache,
    fusion: DenseCache,
    feature_shape: Vec<usize>,
    fusion_shape: Vec<usize>,
}

fn flatten(t: &Tensor) -> Result<Tensor> {
    let b = t.shape()[0];
    t.clone().reshape(vec![b, t.len() / b])
}

fn head(features: &Tensor, layer: &LayerParams) -> Result<(Tensor, DenseCache)> {
    let flat = flatten(features)?;
    let (logits, cache) = dense(&flat, layer)?;
    Ok((softmax(&logits)?, cache))
}

/// Flatten, dense, softmax for each of the three feature stacks.
pub fn heads_forward(
    f: &FusedFeatures,
    params: &FusionModelParams,
) -> Result<(HeadOutputs, HeadsCache)> {
    let (o1, own) = head(&f.j_self, &params.head_self)?;
    let (o2, other) = head(&f.j_other, &params.head_other)?;
    let (o_fusion, fusion) = head(&f.j_fusion, &params.head_fusion)?;
    Ok((
        HeadOutputs { o1, o2, o_fusion },
        HeadsCache {
            own,
            other,
            fusion,
            feature_shape: f.j_self.shape().to_vec(),
            fusion_shape: f.j_fusion.shape().to_vec(),
        },
    ))
}

/// Backward through the heads. Returns gradients with respect to `j_self`
/// and (when the fused head received a gradient) `j_fusion`. `j_other` is
/// partner data and gets parameter gradients only.
pub fn heads_backward(
    cache: &HeadsCache,
    out: &HeadOutputs,
    params: &mut FusionModelParams,
    grads: &HeadGrads,
) -> Result<(Tensor, Option<Tensor>)> {
    let g = softmax_backward(&out.o1, &grads.o1)?;
    let g_self = dense_backward(&cache.own, &mut params.head_self, &g)?
        .reshape(cache.feature_shape.clone())?;
    if let Some(g2) = &grads.o2 {
        let g = softmax_backward(&out.o2, g2)?;
        dense_param_grads(&cache.other, &mut params.head_other, &g)?;
    }
    let g_fusion = match &grads.o_fusion {
        Some(gf) => {
            let g = softmax_backward(&out.o_fusion, gf)?;
            Some(
                dense_backward(&cache.fusion, &mut params.head_fusion, &g)?
                    .reshape(cache.fusion_shape.clone())?,
            )
        }
        None => None,
    };
    Ok((g_self, g_fusion))
}

/// Forward state of one client's pass over a minibatch.
#[derive(Clone, Debug)]
pub struct ClientPass {
    pub own: Modality,
    pub path: Path,
    pub mode: BnMode,
    pub outputs: HeadOutputs,
    pub own_features: FeatureBundle,
    branch: BranchCache,
    up_f1: UpsampleCache,
    up_f2: UpsampleCache,
    heads: HeadsCache,
}

/// Own-modality features for a batch of patches.
pub fn extract_features(
    params: &FusionModelParams,
    modality: Modality,
    patches: &Tensor,
    mode: BnMode,
) -> Result<FeatureBundle> {
    let (x, _) = branch_forward(patches, params, modality, mode)?;
    let (f1, _) = upsample_module(&x, params, UpsampleBranch::F1, mode)?;
    let (f2, _) = upsample_module(&x, params, UpsampleBranch::F2, mode)?;
    FeatureBundle::new(f1, f2, modality)
}

/// Full forward pass from the viewpoint of a client holding `own`
/// patches. On the fusion path `remote` carries the partner's features for
/// the same samples; on the single path it is ignored and zeros are used.
pub fn client_forward(
    params: &FusionModelParams,
    own: Modality,
    patches: &Tensor,
    remote: Option<&FeatureBundle>,
    mode: BnMode,
    path: Path,
) -> Result<ClientPass> {
    let (x, branch) = branch_forward(patches, params, own, mode)?;
    let (f1, up_f1) = upsample_module(&x, params, UpsampleBranch::F1, mode)?;
    let (f2, up_f2) = upsample_module(&x, params, UpsampleBranch::F2, mode)?;
    let own_features = FeatureBundle::new(f1, f2, own)?;
    let zeros;
    let partner = match (path, remote) {
        (Path::Fusion, Some(r)) => {
            if r.modality == own {
                return Err(Error::arg(
                    "partner features must come from the other modality",
                ));
            }
            r
        }
        (Path::Fusion, None) => return Err(Error::arg("fusion path needs partner features")),
        (Path::Single, _) => {
            zeros = FeatureBundle::zeros(own_features.y_f1.shape(), own.other());
            &zeros
        }
    };
    let fused = fuse_features(&own_features, partner)?;
    let (outputs, heads) = heads_forward(&fused, params)?;
    Ok(ClientPass {
        own,
        path,
        mode,
        outputs,
        own_features,
        branch,
        up_f1,
        up_f2,
        heads,
    })
}

impl ClientPass {
    /// Applies the train-mode batch statistics to the running estimates.
    pub fn commit_running_stats(&self, params: &mut FusionModelParams) -> Result<()> {
        self.branch
            .bn
            .update_running(&mut params.branch_mut(self.own).bn)?;
        for (which, cache) in [
            (UpsampleBranch::F1, &self.up_f1),
            (UpsampleBranch::F2, &self.up_f2),
        ] {
            let up = params.upsample_mut(which);
            cache.stages[0].bn.update_running(&mut up.bn_a)?;
            cache.stages[1].bn.update_running(&mut up.bn_b)?;
        }
        Ok(())
    }

    /// Hash of every ReLU mask and pooling argmax in the pass. Two passes
    /// with equal signatures lie on the same smooth piece of the loss.
    pub fn activation_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.branch.relu.mask().hash(&mut h);
        for up in [&self.up_f1, &self.up_f2] {
            for stage in &up.stages {
                stage.relu.mask().hash(&mut h);
                stage.pool.argmax().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Computes the loss of a forward pass and accumulates the gradient of the
/// total loss into the parameters' grad slots.
pub fn client_backward(
    pass: &ClientPass,
    params: &mut FusionModelParams,
    target: &Tensor,
) -> Result<Loss> {
    let loss = compute_loss(&pass.outputs, target, params, pass.own, pass.path)?;
    let grads = loss_gradients(&pass.outputs, target, pass.path)?;
    let (g_self, g_fusion) = heads_backward(&pass.heads, &pass.outputs, params, &grads)?;
    let (g_f1, g_f2) = match g_fusion {
        Some(gf) => {
            let c = g_self.shape()[1];
            let blocks = gf.split_channels(&[c, c])?;
            (g_self.add(&blocks[0])?, g_self.add(&blocks[1])?)
        }
        None => (g_self.clone(), g_self),
    };
    let gx1 = upsample_backward(&pass.up_f1, params, UpsampleBranch::F1, &g_f1)?;
    let gx2 = upsample_backward(&pass.up_f2, params, UpsampleBranch::F2, &g_f2)?;
    branch_backward(&pass.branch, params, pass.own, &gx1.add(&gx2)?)?;

    let coeff = params.l2_coeff();
    if coeff > 0.0 {
        for layer in params.decayed_layers_mut(pass.own, pass.path == Path::Fusion) {
            let g: Vec<f64> = layer
                .weights
                .data()
                .iter()
                .map(|&w| 2.0 * coeff * w as f64)
                .collect();
            layer.weights.accumulate_grad(&g);
        }
    }
    Ok(loss)
}

/// One training-mode forward/backward over a minibatch: clears gradients,
/// updates batch-norm running statistics and leaves the minibatch gradient
/// in the grad slots.
pub fn train_gradients(
    params: &mut FusionModelParams,
    own: Modality,
    patches: &Tensor,
    remote: Option<&FeatureBundle>,
    target: &Tensor,
    path: Path,
) -> Result<Loss> {
    params.zero_grad();
    let pass = client_forward(params, own, patches, remote, BnMode::Train, path)?;
    pass.commit_running_stats(params)?;
    client_backward(&pass, params, target)
}
