use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Traffic of one client in one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub round: usize,
    pub client: usize,
    pub bytes_out: u64,
    pub bytes_in: u64,
    /// Uncompressed equivalent of the sent features, 2·P·Q bytes per matrix.
    pub uncompressed_equivalent_bytes: u64,
}

/// Accumulates feature-exchange traffic keyed by `(round, client)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: BTreeMap<(usize, usize), CommEntry>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub bytes_out: u64,
    pub bytes_in: u64,
    pub uncompressed_equivalent_bytes: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        CommLedger::default()
    }

    fn entry(&mut self, round: usize, client: usize) -> &mut CommEntry {
        self.entries.entry((round, client)).or_insert(CommEntry {
            round,
            client,
            ..CommEntry::default()
        })
    }

    /// Records one message from `sender` to `receiver`.
    pub fn record_transfer(&mut self, round: usize, sender: usize, receiver: usize, bytes: u64, uncompressed: u64) {
        let out = self.entry(round, sender);
        out.bytes_out += bytes;
        out.uncompressed_equivalent_bytes += uncompressed;
        self.entry(round, receiver).bytes_in += bytes;
    }

    /// Entries in `(round, client)` order.
    pub fn entries(&self) -> impl Iterator<Item = &CommEntry> {
        self.entries.values()
    }

    pub fn round_entries(&self, round: usize) -> impl Iterator<Item = &CommEntry> {
        self.entries.range((round, 0)..(round + 1, 0)).map(|(_, e)| e)
    }

    pub fn totals(&self) -> CommTotals {
        self.entries().fold(CommTotals::default(), |t, e| CommTotals {
            bytes_out: t.bytes_out + e.bytes_out,
            bytes_in: t.bytes_in + e.bytes_in,
            uncompressed_equivalent_bytes: t.uncompressed_equivalent_bytes + e.uncompressed_equivalent_bytes,
        })
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for e in other.entries() {
            let mine = self.entry(e.round, e.client);
            mine.bytes_out += e.bytes_out;
            mine.bytes_in += e.bytes_in;
            mine.uncompressed_equivalent_bytes += e.uncompressed_equivalent_bytes;
        }
    }

    /// One JSON object per line, one line per `(round, client)`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(e).expect("ledger entries serialise"));
            out.push('\n');
        }
        out
    }
}
