use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use super::sampling::{derive_seed, STREAM_MINIBATCH};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::{train_gradients, FeatureBundle, FusionModelParams, Modality, Path};

/// A participant: its modality and the patches of its shard.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub modality: Modality,
    pub data: PatchSet,
    pub lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl ClientState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("client {} learning rate must be positive", self.id)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }
}

/// Epoch-level shuffle of a client's `n` samples.
pub fn minibatch_order(seed: u64, round: usize, client: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[STREAM_MINIBATCH, round as u64, client as u64, epoch as u64],
    ));
    order.shuffle(&mut rng);
    order
}

/// Mean per-sample loss terms over one local update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub loss_l2: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: FusionModelParams,
    pub samples: usize,
    pub loss: LossSummary,
    /// Gradient of the loss over the whole shard at the broadcast model;
    /// `None` when not requested or the shard is empty.
    pub gradient: Option<FusionModelParams>,
}

/// Round-level settings shared by every client update.
#[derive(Clone, Copy, Debug)]
pub struct UpdateContext<'a> {
    pub seed: u64,
    pub round: usize,
    pub optimizer: &'a OptimizerConfig,
    pub gradient_report: bool,
}

/// Copies the global model and runs `E` epochs of minibatch steps. With
/// `remote` the fusion path is trained, otherwise the single path.
pub fn client_update(
    c: &ClientState,
    global: &FusionModelParams,
    remote: Option<&FeatureBundle>,
    ctx: UpdateContext<'_>,
) -> Result<ClientUpdate> {
    c.validate()?;
    let mut params = global.clone();
    let n = c.samples();
    if n == 0 {
        return Ok(ClientUpdate {
            client: c.id,
            params,
            samples: 0,
            loss: LossSummary::default(),
            gradient: None,
        });
    }
    if let Some(r) = remote {
        if r.batch() != n {
            return Err(Error::Protocol(format!(
                "client {} holds {n} samples but received {} remote features",
                c.id,
                r.batch()
            )));
        }
    }
    let path = if remote.is_some() { Path::Fusion } else { Path::Single };

    let gradient = if ctx.gradient_report {
        let mut probe = global.clone();
        train_gradients(&mut probe, c.modality, &c.data.patches, remote, &c.data.targets, path)?;
        Some(probe.gradients())
    } else {
        None
    };

    let mut opt = ctx.optimizer.build();
    let (mut ce, mut mse, mut l2, mut seen) = (0.0, 0.0, 0.0, 0usize);
    let mut steps = 0;
    for epoch in 0..c.local_epochs {
        let order = minibatch_order(ctx.seed, ctx.round, c.id, epoch, n);
        for rows in order.chunks(c.batch_size) {
            let batch = c.data.gather(rows)?;
            let remote_batch = remote.map(|r| r.gather(rows)).transpose()?;
            let loss = train_gradients(
                &mut params,
                c.modality,
                &batch.patches,
                remote_batch.as_ref(),
                &batch.targets,
                path,
            )?;
            opt.step(&mut params, c.lr)?;
            let b = rows.len() as f64;
            ce += loss.parts.ce;
            mse += loss.parts.mse * b;
            l2 += loss.parts.l2 * b;
            seen += rows.len();
            steps += 1;
        }
    }
    params.clear_grads();
    let loss = if seen > 0 {
        let s = seen as f64;
        LossSummary {
            loss_ce: ce / s,
            loss_mse: mse / s,
            loss_l2: l2 / s,
            steps,
        }
    } else {
        LossSummary::default()
    };
    Ok(ClientUpdate {
        client: c.id,
        params,
        samples: n,
        loss,
        gradient,
    })
}
