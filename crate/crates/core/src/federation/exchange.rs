use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sampling::RoundPlan;
use super::wire::{Endpoint, WireCapture, WireKind};
use super::ClientState;
use crate::codec::{compress, decode_packet, encode_raw, CommLedger, FeaturePacket, Matrix, PacketMeta};
use crate::error::{Error, Result};
use crate::model::{extract_features, FeatureBundle, FusionModelParams};
use crate::tensor::{BnMode, Tensor};

/// How features travel between partners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum CodecMode {
    /// Rank-`k` truncated SVD factors in binary16.
    Svd { k: usize },
    /// Uncompressed f32 matrices, the communication baseline.
    Raw,
}

impl CodecMode {
    pub fn validate(&self, max_rank: usize) -> Result<()> {
        match *self {
            CodecMode::Svd { k } if k == 0 || k > max_rank => Err(Error::arg(format!(
                "K = {k} must satisfy 1 <= K <= min(P,Q) = {max_rank}"
            ))),
            _ => Ok(()),
        }
    }
}

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::WireFormat(format!("{what} {v} does not fit in 16 bits")))
}

/// Encodes every per-sample `[P, Q]` matrix of one feature tensor, one packet
/// per sample.
pub fn encode_features(
    features: &Tensor,
    codec: CodecMode,
    sender: usize,
    round: usize,
) -> Result<Vec<FeaturePacket>> {
    let (b, p, h, w) = features.dims4()?;
    let q = h * w;
    let sender = u16_field(sender, "sender id")?;
    let round = u16_field(round, "round")?;
    let mut packets = Vec::with_capacity(b);
    for (i, sample) in features.data().chunks_exact(p * q).enumerate() {
        let m = Matrix::new(p, q, sample.iter().map(|&v| v as f64).collect())?;
        let meta = PacketMeta {
            sender,
            round,
            sample_start: u32::try_from(i).map_err(|_| Error::WireFormat("sample index overflows u32".into()))?,
        };
        packets.push(match codec {
            CodecMode::Svd { k } => compress(&m, k, meta)?,
            CodecMode::Raw => encode_raw(&m, meta)?,
        });
    }
    Ok(packets)
}

/// Rebuilds a `[B, P, h, w]` feature tensor from packets in sample order.
pub fn decode_features(packets: &[FeaturePacket], shape: [usize; 4]) -> Result<Tensor> {
    let [b, p, h, w] = shape;
    if packets.len() != b {
        return Err(Error::Protocol(format!("expected {b} packets, received {}", packets.len())));
    }
    let mut data = Vec::with_capacity(b * p * h * w);
    for (i, packet) in packets.iter().enumerate() {
        let hd = packet.header();
        if hd.meta.sample_start as usize != i {
            return Err(Error::Protocol(format!(
                "packet for sample {} arrived in slot {i}",
                hd.meta.sample_start
            )));
        }
        if (hd.p as usize, hd.q as usize) != (p, h * w) {
            return Err(Error::Protocol(format!("packet shape {}x{} does not match {p}x{}", hd.p, hd.q, h * w)));
        }
        data.extend(decode_packet(packet)?.data().iter().map(|&v| v as f32));
    }
    Tensor::new(shape.to_vec(), data)
}

/// Sends a feature bundle through the codec and returns what the receiver
/// reconstructs, with the packets sent for each feature type.
pub fn transmit(
    features: &FeatureBundle,
    codec: CodecMode,
    sender: usize,
    round: usize,
) -> Result<(FeatureBundle, [Vec<FeaturePacket>; 2])> {
    let shape: [usize; 4] = features
        .y_f1
        .shape()
        .try_into()
        .map_err(|_| Error::dim("features must be 4-d"))?;
    let f1 = encode_features(&features.y_f1, codec, sender, round)?;
    let f2 = encode_features(&features.y_f2, codec, sender, round)?;
    let bundle = FeatureBundle::new(decode_features(&f1, shape)?, decode_features(&f2, shape)?, features.modality)?;
    Ok((bundle, [f1, f2]))
}

/// Result of one round's feature exchange.
#[derive(Clone, Debug, Default)]
pub struct Exchange {
    /// Reconstructed partner features keyed by the receiving client.
    pub remote: BTreeMap<usize, FeatureBundle>,
    pub ledger: CommLedger,
}

/// Every paired client computes its features with the broadcast model in
/// eval mode and sends them, one packet per sample and feature type, to its
/// partner through the server.
pub fn exchange_features(
    plan: &RoundPlan,
    global: &FusionModelParams,
    clients: &[ClientState],
    codec: CodecMode,
    capture: Option<&mut WireCapture>,
    parallel: bool,
) -> Result<Exchange> {
    let by_id: BTreeMap<usize, &ClientState> = clients.iter().map(|c| (c.id, c)).collect();
    let lookup = |id: usize| {
        by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Protocol(format!("unknown client {id}")))
    };
    let mut senders = Vec::new();
    for &(a, b) in &plan.pairs {
        let (ca, cb) = (lookup(a)?, lookup(b)?);
        if ca.data.indices != cb.data.indices {
            return Err(Error::Protocol(format!(
                "clients {a} and {b} hold different sample ranges"
            )));
        }
        if ca.modality == cb.modality {
            return Err(Error::Protocol(format!("clients {a} and {b} share a modality")));
        }
        if !ca.data.is_empty() {
            senders.push((ca, b));
            senders.push((cb, a));
        }
    }
    let send = |&(c, to): &(&ClientState, usize)| -> Result<(usize, usize, FeatureBundle, [Vec<FeaturePacket>; 2])> {
        let f = extract_features(global, c.modality, &c.data.patches, BnMode::Eval)?;
        let (recv, packets) = transmit(&f, codec, c.id, plan.round)?;
        Ok((c.id, to, recv, packets))
    };
    let sent: Vec<_> = if parallel {
        use rayon::prelude::*;
        senders.par_iter().map(send).collect::<Result<_>>()?
    } else {
        senders.iter().map(send).collect::<Result<_>>()?
    };

    let (p, q) = global.config.feature_matrix_shape();
    let uncompressed = (2 * p * q) as u64;
    let mut out = Exchange::default();
    let mut capture = capture;
    for (from, to, recv, packets) in sent {
        for packet in packets.iter().flatten() {
            out.ledger
                .record_transfer(plan.round, from, to, packet.byte_len() as u64, uncompressed);
            if let Some(cap) = capture.as_deref_mut() {
                cap.record(plan.round, WireKind::Feature, Endpoint::Client(from), Endpoint::Client(to), packet.to_bytes());
            }
        }
        out.remote.insert(to, recv);
    }
    Ok(out)
}
