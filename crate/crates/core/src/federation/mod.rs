//! The federated protocol: client sampling, feature exchange between
//! modality partners, local updates and weighted model averaging.

mod client;
mod exchange;
mod optim;
mod sampling;
mod server;
mod wire;

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};

pub use client::{client_update, minibatch_order, ClientState, ClientUpdate, LossSummary, UpdateContext};
pub use exchange::{decode_features, encode_features, exchange_features, transmit, CodecMode, Exchange};
pub use optim::{scheduled_lr, Adam, Optimizer, OptimizerConfig, OptimizerKind, Sgd};
pub use sampling::{derive_seed, sample_clients, RoundPlan};
pub use server::{aggregate_models, average_gradients, AggregationWeights, GradientSet, StalenessReport};
pub use wire::{
    audit_message, decode_model_message, encode_model_message, AuditReport, Endpoint, WireCapture, WireKind,
    WireMessage,
};

use crate::codec::CommLedger;
use crate::data::{extract_patches, partition_noniid, MultimodalDataset, PatchSet};
use crate::error::{Error, Result};
use crate::model::{client_forward, extract_features, predict, FusionModelParams, Modality, ModelConfig, Path};
use crate::tensor::{BnMode, Tensor};

/// Which modalities take part in training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keep {
    M1,
    M2,
    Both,
}

impl Keep {
    pub fn only(self) -> Option<Modality> {
        match self {
            Keep::M1 => Some(Modality::M1),
            Keep::M2 => Some(Modality::M2),
            Keep::Both => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Total clients, half per modality.
    pub clients: usize,
    /// Clients drawn per round before pair completion.
    pub selected: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub optimizer: OptimizerConfig,
    pub codec: CodecMode,
    pub keep: Keep,
    pub label_skew: f64,
    pub gradient_report: bool,
    pub parallel: bool,
    pub capture_wire: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            seed: 0,
            rounds: 300,
            clients: 16,
            selected: 16,
            local_epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_interval: 60,
            optimizer: OptimizerConfig::default(),
            codec: CodecMode::Svd { k: 2 },
            keep: Keep::Both,
            label_skew: 0.0,
            gradient_report: false,
            parallel: false,
            capture_wire: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.clients < 2 || !self.clients.is_multiple_of(2) {
            return Err(Error::arg(format!("client count must be even and at least 2, got {}", self.clients)));
        }
        if self.selected == 0 || self.selected > self.clients {
            return Err(Error::arg(format!("selected must lie in [1, {}], got {}", self.clients, self.selected)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::arg("lr decay factor must lie in (0, 1]"));
        }
        if self.rounds > u16::MAX as usize + 1 {
            return Err(Error::arg("round indices must fit the 16-bit wire field"));
        }
        self.optimizer.validate()?;
        self.codec.validate(model.max_rank())
    }

    /// Clients sampled per round among the candidates of a single-modality
    /// run: the same fraction as `selected / clients`, rounded up.
    fn selected_among(&self, candidates: usize) -> usize {
        (self.selected * candidates).div_ceil(self.clients).max(1)
    }
}

/// Per-client entry of a [`RoundLog`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub client: usize,
    pub samples: usize,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub loss_l2: f64,
    pub bytes_out: u64,
    pub bytes_in: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub t: usize,
    pub selected: Vec<usize>,
    pub lr: f64,
    pub per_client: Vec<ClientLog>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stale: Option<StalenessReport>,
}

impl RoundLog {
    /// Sample-weighted mean cross-entropy of the round.
    pub fn mean_loss_ce(&self) -> f64 {
        let n: usize = self.per_client.iter().map(|c| c.samples).sum();
        if n == 0 {
            return 0.0;
        }
        self.per_client.iter().map(|c| c.loss_ce * c.samples as f64).sum::<f64>() / n as f64
    }
}

pub fn rounds_to_jsonl(logs: &[RoundLog]) -> Result<String> {
    let mut s = String::new();
    for l in logs {
        s.push_str(&serde_json::to_string(l).map_err(|e| Error::arg(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// A running simulation.
pub struct Federation {
    config: FederationConfig,
    clients: Vec<ClientState>,
    global: FusionModelParams,
    ledger: CommLedger,
    logs: Vec<RoundLog>,
    capture: Option<WireCapture>,
    gradients: GradientSet<FusionModelParams>,
    next_round: usize,
}

pub(crate) const STREAM_INIT: u64 = sampling::STREAM_INIT;

/// Seed the global model is initialised from.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[STREAM_INIT])
}

fn empty_patches(model: &ModelConfig, m: Modality) -> PatchSet {
    let s = model.patch;
    PatchSet {
        patches: Tensor::zeros(&[0, model.in_channels[m.index()], s, s]),
        targets: Tensor::zeros(&[0, model.classes]),
        labels: Vec::new(),
        indices: Vec::new(),
    }
}

impl Federation {
    pub fn new(dataset: &MultimodalDataset, model: ModelConfig, config: FederationConfig) -> Result<Self> {
        config.validate(&model)?;
        dataset.validate()?;
        if model.in_channels != [dataset.channels(Modality::M1), dataset.channels(Modality::M2)]
            || model.classes != dataset.class_count
        {
            return Err(Error::arg("model configuration does not match the dataset"));
        }
        let shards = partition_noniid(dataset, config.clients, config.label_skew)?;
        let mut clients = Vec::new();
        for shard in shards {
            if config.keep.only().is_some_and(|m| m != shard.modality) {
                continue;
            }
            let data = if shard.indices.iter().any(|&i| dataset.labels[i] > 0) {
                extract_patches(dataset, &shard.indices, shard.modality)?
            } else {
                empty_patches(&model, shard.modality)
            };
            clients.push(ClientState {
                id: shard.client,
                modality: shard.modality,
                data,
                lr: config.lr,
                local_epochs: config.local_epochs,
                batch_size: config.batch_size,
            });
        }
        let global = FusionModelParams::init(model, init_seed(config.seed))?;
        Ok(Federation {
            capture: config.capture_wire.then(WireCapture::new),
            config,
            clients,
            global,
            ledger: CommLedger::new(),
            logs: Vec::new(),
            gradients: GradientSet::new(),
            next_round: 0,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global(&self) -> &FusionModelParams {
        &self.global
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn capture(&self) -> Option<&WireCapture> {
        self.capture.as_ref()
    }

    pub fn gradients(&self) -> &GradientSet<FusionModelParams> {
        &self.gradients
    }

    pub fn plan(&self, round: usize) -> Result<RoundPlan> {
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        match self.config.keep {
            Keep::Both => sample_clients(&ids, self.config.clients, self.config.selected, self.config.seed, round, true),
            _ => sample_clients(
                &ids,
                self.config.clients,
                self.config.selected_among(ids.len()),
                self.config.seed,
                round,
                false,
            ),
        }
    }

    /// Executes the next round and returns its log.
    pub fn run_round(&mut self) -> Result<&RoundLog> {
        let t = self.next_round;
        let log = self.round(t).map_err(|e| e.in_round(t))?;
        self.logs.push(log);
        self.next_round += 1;
        Ok(self.logs.last().expect("just pushed"))
    }

    fn round(&mut self, t: usize) -> Result<RoundLog> {
        let cfg = self.config.clone();
        let plan = self.plan(t)?;
        let lr = scheduled_lr(cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_interval, t);
        for c in self.clients.iter_mut() {
            c.lr = lr;
        }
        let selected: Vec<&ClientState> = self.clients.iter().filter(|c| plan.selected.contains(&c.id)).collect();

        // broadcast
        let mut received: BTreeMap<usize, FusionModelParams> = BTreeMap::new();
        if let Some(cap) = self.capture.as_mut() {
            let bytes = encode_model_message(&self.global)?;
            for c in &selected {
                cap.record(t, WireKind::ModelBroadcast, Endpoint::Server, Endpoint::Client(c.id), bytes.clone());
                received.insert(c.id, decode_model_message(&bytes)?);
            }
        }

        let exchange = match cfg.keep {
            Keep::Both => exchange_features(&plan, &self.global, &self.clients, cfg.codec, self.capture.as_mut(), cfg.parallel)?,
            _ => Exchange::default(),
        };

        let ctx = UpdateContext {
            seed: cfg.seed,
            round: t,
            optimizer: &cfg.optimizer,
            gradient_report: cfg.gradient_report,
        };
        let global = &self.global;
        let update = |c: &&ClientState| {
            let model = received.get(&c.id).unwrap_or(global);
            let remote = exchange.remote.get(&c.id);
            if cfg.keep == Keep::Both && remote.is_none() && !c.data.is_empty() {
                return Err(Error::Protocol(format!("client {} received no partner features", c.id)));
            }
            client_update(c, model, remote, ctx)
        };
        let updates: Vec<ClientUpdate> = if cfg.parallel {
            use rayon::prelude::*;
            selected.par_iter().map(update).collect::<Result<_>>()?
        } else {
            selected.iter().map(update).collect::<Result<_>>()?
        };

        // upload
        if let Some(cap) = self.capture.as_mut() {
            for u in &updates {
                let bytes = encode_model_message(&u.params)?;
                cap.record(t, WireKind::ModelUpload, Endpoint::Client(u.client), Endpoint::Server, bytes);
            }
        }

        let stale = if cfg.gradient_report {
            self.gradients.begin_round(t, self.clients.iter().map(|c| c.id));
            for u in &updates {
                self.gradients.report(u.client, u.gradient.clone());
            }
            Some(average_gradients(&self.gradients)?.1)
        } else {
            None
        };

        let counts: Vec<(usize, usize)> = updates.iter().map(|u| (u.client, u.samples)).collect();
        let weights = AggregationWeights::from_counts(&counts)?;
        let mut per_client = Vec::with_capacity(updates.len());
        let mut models = BTreeMap::new();
        for u in updates {
            let traffic = exchange.ledger.round_entries(t).find(|e| e.client == u.client);
            per_client.push(ClientLog {
                client: u.client,
                samples: u.samples,
                loss_ce: u.loss.loss_ce,
                loss_mse: u.loss.loss_mse,
                loss_l2: u.loss.loss_l2,
                bytes_out: traffic.map_or(0, |e| e.bytes_out),
                bytes_in: traffic.map_or(0, |e| e.bytes_in),
            });
            models.insert(u.client, u.params);
        }
        self.global = aggregate_models(&models, &weights)?;
        self.ledger.merge(&exchange.ledger);
        let log = RoundLog {
            t,
            selected: plan.selected,
            lr,
            per_client,
            stale,
        };
        debug!("round {t}: mean ce {:.4}", log.mean_loss_ce());
        Ok(log)
    }

    pub fn run(&mut self) -> Result<()> {
        while self.next_round < self.config.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainingOutcome {
        TrainingOutcome {
            model: self.global,
            logs: self.logs,
            ledger: self.ledger,
            capture: self.capture,
        }
    }
}

pub struct TrainingOutcome {
    pub model: FusionModelParams,
    pub logs: Vec<RoundLog>,
    pub ledger: CommLedger,
    pub capture: Option<WireCapture>,
}

/// Partitions the dataset, initialises the global model and runs every
/// configured round.
pub fn run_training(dataset: &MultimodalDataset, model: ModelConfig, config: FederationConfig) -> Result<TrainingOutcome> {
    let mut fed = Federation::new(dataset, model, config)?;
    fed.run()?;
    Ok(fed.into_outcome())
}

/// Pixels evaluated per forward chunk.
const EVAL_CHUNK: usize = 512;

/// Predictions for labelled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub indices: Vec<usize>,
    /// One-based predicted classes.
    pub predicted: Vec<usize>,
    /// One-based true classes.
    pub truth: Vec<usize>,
    /// Fraction of pixels whose winning probability reached `tau`.
    pub confident: f64,
}

/// Class probabilities for a set of pixels.
///
/// Single-modality models use the own head. Full models average the fused
/// head over both client views, each fed the other modality's features
/// after a pass through the codec.
pub fn class_probabilities(
    params: &FusionModelParams,
    dataset: &MultimodalDataset,
    indices: &[usize],
    keep: Keep,
    codec: CodecMode,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let mut probs = Vec::new();
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    let labelled: Vec<usize> = indices.iter().copied().filter(|&i| dataset.labels.get(i).is_some_and(|&l| l > 0)).collect();
    for chunk in labelled.chunks(EVAL_CHUNK) {
        let p = match keep.only() {
            Some(m) => {
                let set = extract_patches(dataset, chunk, m)?;
                kept.extend(set.indices.iter().copied());
                labels.extend(set.labels.iter().copied());
                client_forward(params, m, &set.patches, None, BnMode::Eval, Path::Single)?.outputs.o1
            }
            None => {
                let s1 = extract_patches(dataset, chunk, Modality::M1)?;
                let s2 = extract_patches(dataset, chunk, Modality::M2)?;
                kept.extend(s1.indices.iter().copied());
                labels.extend(s1.labels.iter().copied());
                let f1 = extract_features(params, Modality::M1, &s1.patches, BnMode::Eval)?;
                let f2 = extract_features(params, Modality::M2, &s2.patches, BnMode::Eval)?;
                let (r1, _) = transmit(&f1, codec, 0, 0)?;
                let (r2, _) = transmit(&f2, codec, 0, 0)?;
                let a = client_forward(params, Modality::M1, &s1.patches, Some(&r2), BnMode::Eval, Path::Fusion)?;
                let b = client_forward(params, Modality::M2, &s2.patches, Some(&r1), BnMode::Eval, Path::Fusion)?;
                let mean: Vec<f64> = a
                    .outputs
                    .o_fusion
                    .data()
                    .iter()
                    .zip(b.outputs.o_fusion.data())
                    .map(|(&x, &y)| 0.5 * (x as f64 + y as f64))
                    .collect();
                Tensor::from_f64(a.outputs.o_fusion.shape().to_vec(), &mean)?
            }
        };
        probs.push(p);
    }
    let probs = if probs.is_empty() {
        Tensor::zeros(&[0, params.config.classes])
    } else {
        Tensor::concat_batch(&probs)?
    };
    Ok((probs, kept, labels))
}

/// Hard predictions on labelled pixels among `indices`.
pub fn predict_pixels(
    params: &FusionModelParams,
    dataset: &MultimodalDataset,
    indices: &[usize],
    keep: Keep,
    codec: CodecMode,
    tau: f64,
) -> Result<Predictions> {
    let (probs, kept, labels) = class_probabilities(params, dataset, indices, keep, codec)?;
    if kept.is_empty() {
        return Ok(Predictions {
            indices: kept,
            predicted: Vec::new(),
            truth: Vec::new(),
            confident: 0.0,
        });
    }
    let pred = predict(&probs, tau)?;
    let confident = pred.binary.iter().map(|&b| b as f64).sum::<f64>() / pred.binary.len() as f64;
    Ok(Predictions {
        indices: kept,
        predicted: pred.labels.iter().map(|l| l + 1).collect(),
        truth: labels.iter().map(|l| l + 1).collect(),
        confident,
    })
}
