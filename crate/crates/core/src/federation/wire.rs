use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::{FeaturePacket, PacketKind};
use crate::data::container::{decode_container, encode_container, ArrayData};
use crate::error::{Error, Result};
use crate::model::FusionModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireKind {
    ModelBroadcast,
    ModelUpload,
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Client(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub round: usize,
    pub kind: WireKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub bytes: Vec<u8>,
}

/// Every message a run put on the wire, in send order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WireCapture {
    pub messages: Vec<WireMessage>,
}

impl WireCapture {
    pub fn new() -> Self {
        WireCapture::default()
    }

    pub fn record(&mut self, round: usize, kind: WireKind, from: Endpoint, to: Endpoint, bytes: Vec<u8>) {
        self.messages.push(WireMessage {
            round,
            kind,
            from,
            to,
            bytes,
        });
    }

    pub fn count(&self, kind: WireKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    /// Audits every message against the schema allowed for its kind.
    pub fn audit(&self, template: &FusionModelParams) -> Result<AuditReport> {
        let mut report = AuditReport::default();
        for (i, m) in self.messages.iter().enumerate() {
            audit_message(m, template).map_err(|e| Error::Protocol(format!("message {i}: {e}")))?;
            match m.kind {
                WireKind::Feature => report.feature_packets += 1,
                _ => report.model_messages += 1,
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub feature_packets: usize,
    pub model_messages: usize,
}

/// Model payload of a broadcast or upload.
pub fn encode_model_message(params: &FusionModelParams) -> Result<Vec<u8>> {
    encode_container(&params.to_arrays())
}

pub fn decode_model_message(bytes: &[u8]) -> Result<FusionModelParams> {
    FusionModelParams::from_arrays(&decode_container(bytes)?)
}

/// Feature messages must parse as a packet whose header and payload length
/// match exactly; model messages may only hold the architecture words and
/// the named parameter tensors of `template`, with their shapes.
pub fn audit_message(m: &WireMessage, template: &FusionModelParams) -> Result<()> {
    match m.kind {
        WireKind::Feature => {
            let p = FeaturePacket::from_bytes(&m.bytes)?;
            let h = p.header();
            let (fp, fq) = template.config.feature_matrix_shape();
            if (h.p as usize, h.q as usize) != (fp, fq) {
                return Err(Error::Protocol(format!("feature packet of shape {}x{}", h.p, h.q)));
            }
            if h.kind == PacketKind::Factors && (h.k as usize) > fp.min(fq) {
                return Err(Error::Protocol(format!("rank {} exceeds the feature shape", h.k)));
            }
            if Some(h.meta.sender as usize) != match m.from {
                Endpoint::Client(c) => Some(c),
                Endpoint::Server => None,
            } {
                return Err(Error::Protocol("packet sender differs from the message source".into()));
            }
            Ok(())
        }
        WireKind::ModelBroadcast | WireKind::ModelUpload => {
            let arrays = decode_container(&m.bytes)?;
            let allowed: BTreeSet<(String, Vec<usize>)> = template
                .named_tensors()
                .into_iter()
                .map(|(n, _, t)| (n, t.shape().to_vec()))
                .collect();
            for a in &arrays {
                let ok = match (&a.data, a.name.as_str()) {
                    (ArrayData::I32(_), "config.shape") => a.dims == [6],
                    (ArrayData::I32(_), "config.l2_coeff") => a.dims == [2],
                    (ArrayData::F32(_), _) => allowed.contains(&(a.name.clone(), a.dims.clone())),
                    _ => false,
                };
                if !ok {
                    return Err(Error::Protocol(format!(
                        "model message carries a non-parameter array {:?} {:?}",
                        a.name, a.dims
                    )));
                }
            }
            if arrays.len() != allowed.len() + 2 {
                return Err(Error::Protocol("model message is missing arrays".into()));
            }
            Ok(())
        }
    }
}
