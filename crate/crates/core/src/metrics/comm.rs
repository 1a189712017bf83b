use serde::{Deserialize, Serialize};

use crate::codec::CommLedger;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBytes {
    pub round: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub total_bytes: u64,
    pub uncompressed_bytes: u64,
    pub per_round: Vec<RoundBytes>,
    /// Uncompressed over actual bytes; `None` for an empty ledger.
    pub ratio_vs_uncompressed: Option<f64>,
}

/// Sums the bytes each message cost once (at its sender).
pub fn comm_report(ledger: &CommLedger) -> CommReport {
    let mut per_round: Vec<RoundBytes> = Vec::new();
    for e in ledger.entries() {
        match per_round.last_mut() {
            Some(r) if r.round == e.round => r.bytes += e.bytes_out,
            _ => per_round.push(RoundBytes {
                round: e.round,
                bytes: e.bytes_out,
            }),
        }
    }
    let totals = ledger.totals();
    CommReport {
        total_bytes: totals.bytes_out,
        uncompressed_bytes: totals.uncompressed_equivalent_bytes,
        per_round,
        ratio_vs_uncompressed: (totals.bytes_out > 0)
            .then(|| totals.uncompressed_equivalent_bytes as f64 / totals.bytes_out as f64),
    }
}
