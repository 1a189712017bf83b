//! Little-endian wire format for feature messages.
//!
//! ```text
//! offset size field
//!      0    4 magic        "FFPK" (factors) or "FFRW" (raw f32)
//!      4    2 version
//!      6    2 sender
//!      8    2 round
//!     10    4 sample_start
//!     14    2 sample_count (always 1)
//!     16    2 P
//!     18    2 Q
//!     20    2 K            (0 for raw)
//!     22    4 scale        f32
//!     26      payload
//! ```
//!
//! A factor payload holds `U` row-major, `σ`, then `V` row-major as
//! binary16. A raw payload holds the matrix row-major as f32.

use half::f16;

use super::{Matrix, SvdFactors};
use crate::error::{Error, Result};

pub const PACKET_MAGIC: [u8; 4] = *b"FFPK";
pub const RAW_MAGIC: [u8; 4] = *b"FFRW";
pub const WIRE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 26;

const F16_MAX: f64 = 65504.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PacketKind {
    /// Rank-K factors in binary16.
    Factors,
    /// Uncompressed f32 matrix.
    Raw,
}

/// Header fields chosen by the sender.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PacketMeta {
    pub sender: u16,
    pub round: u16,
    pub sample_start: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacketHeader {
    pub kind: PacketKind,
    pub meta: PacketMeta,
    pub p: u16,
    pub q: u16,
    pub k: u16,
    pub scale: f32,
}

impl PacketHeader {
    pub fn payload_bytes(&self) -> usize {
        let (p, q, k) = (self.p as usize, self.q as usize, self.k as usize);
        match self.kind {
            PacketKind::Factors => factor_payload_bytes(p, q, k),
            PacketKind::Raw => 4 * p * q,
        }
    }
}

/// An encoded feature message; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePacket {
    header: PacketHeader,
    payload: Vec<u8>,
}

/// `2·(P·K + K + K·Q)`.
pub fn factor_payload_bytes(p: usize, q: usize, k: usize) -> usize {
    2 * (p * k + k + k * q)
}

pub fn factor_packet_bytes(p: usize, q: usize, k: usize) -> usize {
    HEADER_BYTES + factor_payload_bytes(p, q, k)
}

pub fn raw_packet_bytes(p: usize, q: usize) -> usize {
    HEADER_BYTES + 4 * p * q
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::WireFormat(format!("{what} {v} does not fit in u16")))
}

fn push_f16(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&f16::from_f64(v).to_bits().to_le_bytes());
}

/// Encodes rank-K factors as binary16 (round to nearest even). Singular
/// values above the binary16 range are divided by a power-of-two scale that
/// is stored in the header.
pub fn encode_packet(f: &SvdFactors, meta: PacketMeta) -> Result<FeaturePacket> {
    let (p, q) = f.shape();
    let k = f.rank();
    if k == 0 || k > p.min(q) || f.u.cols() != k || f.v.rows() != k {
        return Err(Error::WireFormat(format!("inconsistent factors for rank {k}")));
    }
    let all = f.u.data().iter().chain(&f.sigma).chain(f.v.data());
    if all.clone().any(|v| v.is_nan()) {
        return Err(Error::WireFormat("NaN in factors".into()));
    }
    let uv_max = f.u.data().iter().chain(f.v.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    if uv_max > F16_MAX {
        return Err(Error::WireFormat(format!("singular vector entry {uv_max} exceeds binary16 range")));
    }
    let sigma_max = f.sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if sigma_max > F16_MAX {
        (sigma_max / F16_MAX).log2().ceil().exp2()
    } else {
        1.0
    };
    let header = PacketHeader {
        kind: PacketKind::Factors,
        meta,
        p: to_u16(p, "P")?,
        q: to_u16(q, "Q")?,
        k: to_u16(k, "K")?,
        scale: scale as f32,
    };
    let mut payload = Vec::with_capacity(header.payload_bytes());
    f.u.data().iter().for_each(|&v| push_f16(&mut payload, v));
    f.sigma.iter().for_each(|&v| push_f16(&mut payload, v / scale));
    f.v.data().iter().for_each(|&v| push_f16(&mut payload, v));
    Ok(FeaturePacket { header, payload })
}

/// Encodes a matrix uncompressed as f32.
pub fn encode_raw(m: &Matrix, meta: PacketMeta) -> Result<FeaturePacket> {
    let header = PacketHeader {
        kind: PacketKind::Raw,
        meta,
        p: to_u16(m.rows(), "P")?,
        q: to_u16(m.cols(), "Q")?,
        k: 0,
        scale: 1.0,
    };
    let mut payload = Vec::with_capacity(header.payload_bytes());
    for &v in m.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(FeaturePacket { header, payload })
}

/// Rebuilds the `[P, Q]` matrix carried by a packet. Factor packets yield
/// `U·diag(σ)·V` with every product formed from the decoded binary16 values.
pub fn decode_packet(packet: &FeaturePacket) -> Result<Matrix> {
    let h = &packet.header;
    let (p, q, k) = (h.p as usize, h.q as usize, h.k as usize);
    match h.kind {
        PacketKind::Raw => {
            let data = packet
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Matrix::new(p, q, data)
        }
        PacketKind::Factors => {
            let vals: Vec<f64> = packet
                .payload
                .chunks_exact(2)
                .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
                .collect();
            let (u, rest) = vals.split_at(p * k);
            let (sigma, v) = rest.split_at(k);
            let f = SvdFactors {
                u: Matrix::new(p, k, u.to_vec())?,
                sigma: sigma.iter().map(|s| s * h.scale as f64).collect(),
                v: Matrix::new(k, q, v.to_vec())?,
            };
            let m = f.reconstruct()?;
            // the receiver holds the result in 32-bit
            Matrix::new(p, q, m.data().iter().map(|&x| x as f32 as f64).collect())
        }
    }
}

impl FeaturePacket {
    pub fn header(&self) -> &PacketHeader {
        &self.header
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(match h.kind {
            PacketKind::Factors => &PACKET_MAGIC,
            PacketKind::Raw => &RAW_MAGIC,
        });
        out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
        out.extend_from_slice(&h.meta.sender.to_le_bytes());
        out.extend_from_slice(&h.meta.round.to_le_bytes());
        out.extend_from_slice(&h.meta.sample_start.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&h.p.to_le_bytes());
        out.extend_from_slice(&h.q.to_le_bytes());
        out.extend_from_slice(&h.k.to_le_bytes());
        out.extend_from_slice(&h.scale.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_BYTES);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses and validates a message: magic, version, sample count, rank
    /// bounds, scale and exact payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::WireFormat(format!(
                "message of {} bytes is shorter than the {HEADER_BYTES}-byte header",
                bytes.len()
            )));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let kind = match &bytes[0..4] {
            m if m == PACKET_MAGIC => PacketKind::Factors,
            m if m == RAW_MAGIC => PacketKind::Raw,
            m => return Err(Error::WireFormat(format!("bad magic {m:?}"))),
        };
        let version = u16_at(4);
        if version != WIRE_VERSION {
            return Err(Error::WireFormat(format!("unsupported version {version}")));
        }
        if u16_at(14) != 1 {
            return Err(Error::WireFormat(format!("sample count {} != 1", u16_at(14))));
        }
        let header = PacketHeader {
            kind,
            meta: PacketMeta {
                sender: u16_at(6),
                round: u16_at(8),
                sample_start: u32_at(10),
            },
            p: u16_at(16),
            q: u16_at(18),
            k: u16_at(20),
            scale: f32::from_bits(u32_at(22)),
        };
        if header.p == 0 || header.q == 0 {
            return Err(Error::WireFormat("empty matrix".into()));
        }
        let rank_ok = match kind {
            PacketKind::Factors => header.k >= 1 && header.k <= header.p.min(header.q),
            PacketKind::Raw => header.k == 0,
        };
        if !rank_ok {
            return Err(Error::WireFormat(format!(
                "rank {} invalid for {}x{}",
                header.k, header.p, header.q
            )));
        }
        if !(header.scale.is_finite() && header.scale > 0.0) {
            return Err(Error::WireFormat(format!("invalid scale {}", header.scale)));
        }
        let payload = &bytes[HEADER_BYTES..];
        if payload.len() != header.payload_bytes() {
            return Err(Error::WireFormat(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                header.payload_bytes()
            )));
        }
        Ok(FeaturePacket {
            header,
            payload: payload.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{svd_decompose, truncate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const META: PacketMeta = PacketMeta {
        sender: 3,
        round: 7,
        sample_start: 42,
    };

    /// Bit-level binary16 encoder written against the IEEE 754 layout,
    /// independent of the `half` crate. Normal range only.
    fn f16_bits_oracle(x: f64) -> u16 {
        let sign = if x < 0.0 { 0x8000u16 } else { 0 };
        let a = x.abs();
        let mut e = a.log2().floor() as i32;
        if a / 2f64.powi(e) >= 2.0 {
            e += 1;
        }
        let m = a / 2f64.powi(e) - 1.0;
        let scaled = m * 1024.0;
        let mut frac = scaled.floor();
        let rem = scaled - frac;
        if rem > 0.5 || (rem == 0.5 && frac as u32 % 2 == 1) {
            frac += 1.0;
        }
        let mut bits = (((e + 15) as u32) << 10) + frac as u32;
        if frac >= 1024.0 {
            bits = ((e + 16) as u32) << 10;
        }
        sign | bits as u16
    }

    #[test]
    fn one_third_encodes_to_0x3555() {
        assert_eq!(f16_bits_oracle(1.0 / 3.0), 0x3555);
        let mut out = Vec::new();
        push_f16(&mut out, 1.0 / 3.0);
        assert_eq!(u16::from_le_bytes([out[0], out[1]]), 0x3555);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-1000.0..1000.0);
            if x.abs() < 1e-4 {
                continue;
            }
            assert_eq!(f16::from_f64(x).to_bits(), f16_bits_oracle(x), "{x}");
        }
    }

    #[test]
    fn payload_size_for_feature_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::new(64, 4, (0..256).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let f = truncate(&svd_decompose(&a).unwrap(), 2).unwrap();
        let p = encode_packet(&f, META).unwrap();
        assert_eq!(p.payload().len(), 276);
        assert_eq!(p.to_bytes().len(), 26 + 276);
        assert_eq!(factor_packet_bytes(64, 4, 2), 302);
        assert_eq!(encode_raw(&a, META).unwrap().to_bytes().len(), raw_packet_bytes(64, 4));
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let f = svd_decompose(&Matrix::from_diag(&[2.0, 1.0]).unwrap()).unwrap();
        let bytes = encode_packet(&f, META).unwrap().to_bytes();
        assert_eq!(&bytes[0..4], b"FFPK");
        assert_eq!(&bytes[4..26], &[1, 0, 3, 0, 7, 0, 42, 0, 0, 0, 1, 0, 2, 0, 2, 0, 2, 0, 0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn roundtrip_within_half_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::new(8, 4, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = svd_decompose(&a).unwrap();
        let packet = FeaturePacket::from_bytes(&encode_packet(&f, META).unwrap().to_bytes()).unwrap();
        let decoded = decode_packet(&packet).unwrap();

        // oracle: quantise every factor entry, then reconstruct
        let q = |v: f64| f16::from_f64(v).to_f64();
        let qf = SvdFactors {
            u: Matrix::new(8, 4, f.u.data().iter().map(|&v| q(v)).collect()).unwrap(),
            sigma: f.sigma.iter().map(|&v| q(v)).collect(),
            v: Matrix::new(4, 4, f.v.data().iter().map(|&v| q(v)).collect()).unwrap(),
        };
        let expected = qf.reconstruct().unwrap();
        assert!(decoded.distance(&expected).unwrap() < 1e-6 * a.frobenius());
        let envelope = 2f64.powi(-11) * 3.0 * (f.sigma.iter().sum::<f64>()) * 8.0;
        assert!(decoded.distance(&a).unwrap() < envelope);
    }

    #[test]
    fn rank_one_reconstructs() {
        let mut a = Matrix::zeros(16, 4);
        for r in 0..16 {
            for c in 0..4 {
                a.set(r, c, (r as f64 + 1.0) * (c as f64 - 1.5));
            }
        }
        let f = truncate(&svd_decompose(&a).unwrap(), 1).unwrap();
        let d = decode_packet(&encode_packet(&f, META).unwrap()).unwrap();
        assert!(d.distance(&a).unwrap() < 1e-3 * a.frobenius());
    }

    #[test]
    fn large_values_use_scale() {
        let f = svd_decompose(&Matrix::from_diag(&[1e6, 3.0]).unwrap()).unwrap();
        let p = encode_packet(&f, META).unwrap();
        assert!(p.header().scale > 1.0);
        let d = decode_packet(&p).unwrap();
        assert!((d.get(0, 0) - 1e6).abs() / 1e6 < 2f64.powi(-10));
    }

    #[test]
    fn corrupted_messages_are_rejected() {
        let f = svd_decompose(&Matrix::from_diag(&[2.0, 1.0]).unwrap()).unwrap();
        let bytes = encode_packet(&f, META).unwrap().to_bytes();
        assert!(FeaturePacket::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(FeaturePacket::from_bytes(&longer).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(FeaturePacket::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[20] = 3;
        assert!(FeaturePacket::from_bytes(&bad).is_err());
        assert!(FeaturePacket::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn nan_is_rejected() {
        let mut f = svd_decompose(&Matrix::from_diag(&[2.0, 1.0]).unwrap()).unwrap();
        f.sigma[1] = f64::NAN;
        assert!(matches!(encode_packet(&f, META), Err(Error::WireFormat(_))));
    }
}
