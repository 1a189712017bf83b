use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{modality_of, partner_of};
use crate::error::{Error, Result};
use crate::model::Modality;

/// SplitMix64 finaliser folded over `parts`, used to derive independent
/// stream seeds from the experiment seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub(crate) const STREAM_SAMPLING: u64 = 1;
pub(crate) const STREAM_MINIBATCH: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;

/// Clients chosen for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundPlan {
    pub round: usize,
    /// Ascending client ids.
    pub selected: Vec<usize>,
    /// `(m1 client, m2 client)` pairs, ascending by the m1 id. Empty when
    /// the round does not exchange features.
    pub pairs: Vec<(usize, usize)>,
}

impl RoundPlan {
    pub fn partner(&self, client: usize) -> Option<usize> {
        self.pairs.iter().find_map(|&(a, b)| {
            if a == client {
                Some(b)
            } else if b == client {
                Some(a)
            } else {
                None
            }
        })
    }
}

/// Draws `m` of `candidates` uniformly without replacement. With `paired`
/// set, every selected client's partner is added as well and must itself be
/// a candidate.
pub fn sample_clients(
    candidates: &[usize],
    total_clients: usize,
    m: usize,
    seed: u64,
    round: usize,
    paired: bool,
) -> Result<RoundPlan> {
    if m == 0 {
        return Err(Error::Scheduling("cannot select zero clients".into()));
    }
    if m > candidates.len() {
        return Err(Error::Scheduling(format!(
            "cannot select {m} of {} clients",
            candidates.len()
        )));
    }
    let mut pool = candidates.to_vec();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() != candidates.len() {
        return Err(Error::Scheduling("duplicate client ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SAMPLING, round as u64]));
    let mut selected: Vec<usize> = pool.choose_multiple(&mut rng, m).copied().collect();
    let mut pairs = Vec::new();
    if paired {
        for c in selected.clone() {
            let p = partner_of(c, total_clients);
            if pool.binary_search(&p).is_err() {
                return Err(Error::Scheduling(format!("partner {p} of client {c} is not available")));
            }
            if !selected.contains(&p) {
                selected.push(p);
            }
        }
    }
    selected.sort_unstable();
    if paired {
        for &c in &selected {
            if modality_of(c, total_clients) == Modality::M1 {
                pairs.push((c, partner_of(c, total_clients)));
            }
        }
        if pairs.len() * 2 != selected.len() {
            return Err(Error::Scheduling("selection cannot be completed into pairs".into()));
        }
    }
    Ok(RoundPlan { round, selected, pairs })
}
