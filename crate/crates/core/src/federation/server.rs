use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorBundle;

/// Per-client aggregation weights `I_s / I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    weights: BTreeMap<usize, f64>,
}

impl AggregationWeights {
    /// Weights proportional to sample counts. Clients with zero samples get
    /// weight zero; at least one count must be positive.
    pub fn from_counts(counts: &[(usize, usize)]) -> Result<Self> {
        let total: usize = counts.iter().map(|&(_, n)| n).sum();
        if total == 0 {
            return Err(Error::Aggregation("no samples among selected clients".into()));
        }
        let mut weights = BTreeMap::new();
        for &(client, n) in counts {
            if weights.insert(client, n as f64 / total as f64).is_some() {
                return Err(Error::Aggregation(format!("client {client} listed twice")));
            }
        }
        Ok(AggregationWeights { weights })
    }

    pub fn from_map(weights: BTreeMap<usize, f64>) -> Result<Self> {
        let w = AggregationWeights { weights };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Aggregation("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Aggregation(format!("weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn get(&self, client: usize) -> Option<f64> {
        self.weights.get(&client).copied()
    }

    /// `(client, weight)` in ascending client order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights.iter().map(|(&c, &w)| (c, w))
    }
}

/// Weighted per-tensor sum of client models, accumulated in f64 in
/// ascending client-id order and rounded once.
pub fn aggregate_models<B: TensorBundle>(
    updates: &BTreeMap<usize, B>,
    weights: &AggregationWeights,
) -> Result<B> {
    weights.validate()?;
    let mut entries = Vec::with_capacity(updates.len());
    for (&client, update) in updates {
        let w = weights
            .get(client)
            .ok_or_else(|| Error::Aggregation(format!("no weight for client {client}")))?;
        entries.push((w, update));
    }
    if weights.iter().count() != entries.len() {
        return Err(Error::Aggregation("weights name clients without updates".into()));
    }
    let (_, first) = entries
        .first()
        .ok_or_else(|| Error::Aggregation("nothing to aggregate".into()))?;
    let mut out = (*first).clone();
    for (_, u) in &entries[1..] {
        if !u.same_layout(first) {
            return Err(Error::Protocol("client update shapes differ from the global model".into()));
        }
    }
    let mut acc: Vec<Vec<f64>> = out.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (w, u) in &entries {
        for (a, t) in acc.iter_mut().zip(u.tensors()) {
            for (ai, &x) in a.iter_mut().zip(t.data()) {
                *ai += w * x as f64;
            }
        }
    }
    for (t, a) in out.tensors_mut().into_iter().zip(&acc) {
        for (x, &v) in t.data_mut().iter_mut().zip(a) {
            *x = v as f32;
        }
        t.clear_grad();
    }
    Ok(out)
}

/// Latest dataset-average gradient per client. `None` marks a client that
/// did not report this round; any earlier entry for it is kept as a stale
/// reserve and never averaged.
#[derive(Clone, Debug, Default)]
pub struct GradientSet<B> {
    fresh: BTreeMap<usize, Option<B>>,
    reserve: BTreeMap<usize, (usize, B)>,
    round: usize,
}

/// Clients missing from an average.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessReport {
    /// Absent clients in ascending order.
    pub absent: Vec<usize>,
    /// Absent clients holding a reserved gradient, with the round it dates
    /// from.
    pub reserved: Vec<(usize, usize)>,
}

impl<B: TensorBundle> GradientSet<B> {
    pub fn new() -> Self {
        GradientSet {
            fresh: BTreeMap::new(),
            reserve: BTreeMap::new(),
            round: 0,
        }
    }

    /// Starts a new round: every client becomes absent until it reports.
    pub fn begin_round(&mut self, round: usize, clients: impl IntoIterator<Item = usize>) {
        for (client, g) in std::mem::take(&mut self.fresh) {
            if let Some(g) = g {
                self.reserve.insert(client, (self.round, g));
            }
        }
        self.round = round;
        self.fresh = clients.into_iter().map(|c| (c, None)).collect();
    }

    pub fn report(&mut self, client: usize, gradient: Option<B>) {
        self.fresh.insert(client, gradient);
    }

    pub fn get(&self, client: usize) -> Option<&B> {
        self.fresh.get(&client).and_then(Option::as_ref)
    }

    /// The reserved entry of a client that is absent this round.
    pub fn reserved(&self, client: usize) -> Option<&(usize, B)> {
        match self.fresh.get(&client) {
            Some(Some(_)) => None,
            _ => self.reserve.get(&client),
        }
    }
}

/// Mean over the present entries only.
pub fn average_gradients<B: TensorBundle>(g: &GradientSet<B>) -> Result<(B, StalenessReport)> {
    let present: Vec<&B> = g.fresh.values().flatten().collect();
    let first = *present
        .first()
        .ok_or_else(|| Error::Aggregation("every gradient entry is absent".into()))?;
    if present.iter().any(|b| !b.same_layout(first)) {
        return Err(Error::Protocol("gradient bundle shapes differ".into()));
    }
    let n = present.len() as f64;
    let mut out = first.clone();
    for (k, t) in out.tensors_mut().into_iter().enumerate() {
        let mut acc = vec![0.0f64; t.len()];
        for b in &present {
            for (a, &x) in acc.iter_mut().zip(b.tensors()[k].data()) {
                *a += x as f64;
            }
        }
        for (x, a) in t.data_mut().iter_mut().zip(acc) {
            *x = (a / n) as f32;
        }
    }
    let absent: Vec<usize> = g
        .fresh
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(&c, _)| c)
        .collect();
    let reserved = absent
        .iter()
        .filter_map(|&c| g.reserve.get(&c).map(|(r, _)| (c, *r)))
        .collect();
    Ok((out, StalenessReport { absent, reserved }))
}
