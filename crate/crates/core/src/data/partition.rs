use serde::{Deserialize, Serialize};

use super::MultimodalDataset;
use crate::error::{Error, Result};
use crate::model::Modality;

/// One client's view of the scene: a modality and a list of train pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub client: usize,
    pub modality: Modality,
    pub indices: Vec<usize>,
}

/// Client `i < n` holds modality 1 and client `n + i` holds modality 2 of
/// the same block.
pub fn modality_of(client: usize, clients: usize) -> Modality {
    if client < clients / 2 {
        Modality::M1
    } else {
        Modality::M2
    }
}

/// The client holding the other modality of the same block.
pub fn partner_of(client: usize, clients: usize) -> usize {
    let n = clients / 2;
    if client < n {
        client + n
    } else {
        client - n
    }
}

/// Splits the train pixels into `clients / 2` contiguous blocks and hands
/// each block to one client per modality.
///
/// Blocks follow row-major order. `label_skew` in `[0, 1]` blends the
/// ordering key towards the label so blocks become more label-pure; `0`
/// gives purely spatial blocks.
pub fn partition_noniid(d: &MultimodalDataset, clients: usize, label_skew: f64) -> Result<Vec<Shard>> {
    if clients < 2 || !clients.is_multiple_of(2) {
        return Err(Error::arg(format!("client count must be even and at least 2, got {clients}")));
    }
    if !(0.0..=1.0).contains(&label_skew) {
        return Err(Error::arg(format!("label_skew {label_skew} outside [0, 1]")));
    }
    let n = clients / 2;
    if d.train_idx.len() < n {
        return Err(Error::arg(format!(
            "{} train pixels cannot fill {n} blocks",
            d.train_idx.len()
        )));
    }
    let mut order = d.train_idx.clone();
    order.sort_unstable();
    if label_skew > 0.0 {
        let total = (d.height * d.width) as f64;
        let key = |i: usize| {
            (1.0 - label_skew) * (i as f64 / total) + label_skew * (d.labels[i] as f64 / d.class_count as f64)
        };
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    }
    let base = order.len() / n;
    let extra = order.len() % n;
    let mut blocks = Vec::with_capacity(n);
    let mut start = 0;
    for b in 0..n {
        let len = base + usize::from(b < extra);
        let mut block = order[start..start + len].to_vec();
        block.sort_unstable();
        blocks.push(block);
        start += len;
    }
    let mut shards = Vec::with_capacity(clients);
    for m in Modality::ALL {
        for (b, block) in blocks.iter().enumerate() {
            shards.push(Shard {
                client: m.index() * n + b,
                modality: m,
                indices: block.clone(),
            });
        }
    }
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    #[test]
    fn sixteen_clients_pair_up() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let shards = partition_noniid(&d, 16, 0.0).unwrap();
        assert_eq!(shards.len(), 16);
        for i in 0..8 {
            assert_eq!(shards[i].modality, Modality::M1);
            assert_eq!(shards[i + 8].modality, Modality::M2);
            assert_eq!(shards[i].indices, shards[i + 8].indices);
            assert_eq!(partner_of(i, 16), i + 8);
            assert_eq!(partner_of(i + 8, 16), i);
        }
        let mut all: Vec<usize> = shards[..8].iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, d.train_idx);
    }

    #[test]
    fn blocks_have_different_label_mixes() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let shards = partition_noniid(&d, 16, 0.0).unwrap();
        let hist = |s: &Shard| {
            let mut h = vec![0.0; d.class_count + 1];
            for &i in &s.indices {
                h[d.labels[i] as usize] += 1.0 / s.indices.len() as f64;
            }
            h
        };
        let hs: Vec<_> = shards[..8].iter().map(hist).collect();
        let mut max_tv = 0.0f64;
        for a in &hs {
            for b in &hs {
                max_tv = max_tv.max(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>());
            }
        }
        assert!(max_tv > 0.0);
    }

    #[test]
    fn label_skew_purifies_blocks() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let purity = |skew| {
            let shards = partition_noniid(&d, 12, skew).unwrap();
            shards[..6]
                .iter()
                .map(|s| {
                    let mut h = vec![0usize; d.class_count + 1];
                    s.indices.iter().for_each(|&i| h[d.labels[i] as usize] += 1);
                    *h.iter().max().unwrap() as f64 / s.indices.len() as f64
                })
                .sum::<f64>()
        };
        assert!(purity(1.0) > purity(0.0));
    }

    #[test]
    fn odd_counts_are_rejected() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        assert!(partition_noniid(&d, 7, 0.0).is_err());
        assert!(partition_noniid(&d, 0, 0.0).is_err());
    }
}
