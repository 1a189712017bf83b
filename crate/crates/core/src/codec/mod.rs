//! Truncated-SVD compression of feature matrices, the binary16 wire format
//! and communication accounting.

mod ledger;
mod matrix;
mod svd;
mod wire;

pub use ledger::{CommEntry, CommLedger, CommTotals};
pub use matrix::Matrix;
pub use svd::{svd_decompose, truncate, SvdFactors, CONVERGENCE, MAX_SWEEPS};
pub use wire::{
    decode_packet, encode_packet, encode_raw, factor_packet_bytes, factor_payload_bytes, raw_packet_bytes,
    FeaturePacket, PacketHeader, PacketKind, PacketMeta, HEADER_BYTES, PACKET_MAGIC, RAW_MAGIC, WIRE_VERSION,
};

use crate::error::{Error, Result};

/// Analytic ratio `P·Q / (K·(P+Q+1))` of matrix entries to factor entries.
pub fn compression_ratio(p: usize, q: usize, k: usize) -> f64 {
    (p * q) as f64 / (k * (p + q + 1)) as f64
}

/// Compresses a matrix to rank `k` and encodes it.
pub fn compress(m: &Matrix, k: usize, meta: PacketMeta) -> Result<FeaturePacket> {
    if k == 0 || k > m.rows().min(m.cols()) {
        return Err(Error::arg(format!(
            "K = {k} must satisfy 1 <= K <= min(P,Q) = {}",
            m.rows().min(m.cols())
        )));
    }
    encode_packet(&truncate(&svd_decompose(m)?, k)?, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_formula() {
        assert!((compression_ratio(64, 4, 1) - 256.0 / 69.0).abs() < 1e-12);
        assert!((compression_ratio(64, 4, 1) - 3.710).abs() < 1e-3);
        assert_eq!(compression_ratio(64, 4, 2), compression_ratio(64, 4, 1) / 2.0);
        assert!(compression_ratio(4, 4, 4) <= 1.0);
    }

    #[test]
    fn compress_rejects_bad_rank() {
        let m = Matrix::identity(4);
        assert!(compress(&m, 0, PacketMeta { sender: 0, round: 0, sample_start: 0 }).is_err());
        assert!(compress(&m, 5, PacketMeta { sender: 0, round: 0, sample_start: 0 }).is_err());
    }
}
