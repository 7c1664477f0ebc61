//! Negative sampling strategies.
//!
//! Every strategy returns a [`SamplerOutput`]. Two-pass strategies (DNS, ANS)
//! first draw a [`CandidateSet`] of `M` unobserved items uniformly without
//! replacement, then pick one of them.

use std::collections::HashSet;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ans::{self, AnsConfig, AnsTrace, CandidateDetail};
use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::ParamStore;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Rns,
    Dns,
    Ans,
    Hns,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Rns => "rns",
            SamplerKind::Dns => "dns",
            SamplerKind::Ans => "ans",
            SamplerKind::Hns => "hns",
        }
    }

    /// Whether the strategy routes negatives through the gate tensors.
    pub fn uses_gates(self) -> bool {
        matches!(self, SamplerKind::Ans | SamplerKind::Hns)
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rns" => Ok(SamplerKind::Rns),
            "dns" => Ok(SamplerKind::Dns),
            "ans" => Ok(SamplerKind::Ans),
            "hns" => Ok(SamplerKind::Hns),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// First-pass draw for one `(user, positive)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub user: usize,
    pub positive: usize,
    pub items: Vec<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalNegative {
    Item(usize),
    /// A vector that is not a row of the item table, derived from `base_item`.
    Synthetic {
        base_item: usize,
        vector: Vec<f64>,
    },
}

impl FinalNegative {
    pub fn base_item(&self) -> usize {
        match *self {
            FinalNegative::Item(i) => i,
            FinalNegative::Synthetic { base_item, .. } => base_item,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub provenance: SamplerKind,
    pub final_negative: FinalNegative,
    /// Mean contrastive loss over the candidate set (ANS only, else 0).
    pub aux_contrastive: f64,
    /// Mean disentanglement loss over the candidate set (ANS only, else 0).
    pub aux_disentangle: f64,
    /// Frozen sampling decisions the objective needs to recompute the ANS loss.
    pub trace: Option<AnsTrace>,
    /// First-pass candidate scores, kept for diagnostics.
    pub candidate_scores: Vec<f64>,
}

impl SamplerOutput {
    fn plain(provenance: SamplerKind, item: usize) -> Self {
        SamplerOutput {
            provenance,
            final_negative: FinalNegative::Item(item),
            aux_contrastive: 0.0,
            aux_disentangle: 0.0,
            trace: None,
            candidate_scores: Vec::new(),
        }
    }
}

/// Draws `m` distinct items the user has not interacted with in `train`,
/// uniformly without replacement.
pub fn draw_candidates(
    user: usize,
    positive: usize,
    train: &InteractionSet,
    m: usize,
    rng: &mut StreamRng,
) -> Result<CandidateSet> {
    let observed = train.user_items(user);
    let n_items = train.n_items();
    let available = n_items - observed.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "candidate set size must be at least 1".into(),
        ));
    }
    if m > available {
        return Err(Error::PoolExhausted {
            requested: m,
            available,
        });
    }
    let items = if available >= 4 * m {
        // Rejection sampling: each accepted draw is uniform over the items not
        // yet taken, which is sampling without replacement.
        let mut taken = HashSet::with_capacity(m);
        let mut items = Vec::with_capacity(m);
        while items.len() < m {
            let i = rng.random_range(0..n_items);
            if observed.binary_search(&i).is_err() && taken.insert(i) {
                items.push(i);
            }
        }
        items
    } else {
        let pool = unobserved_pool(observed, n_items);
        index::sample(rng, pool.len(), m)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    };
    Ok(CandidateSet {
        user,
        positive,
        items,
    })
}

fn unobserved_pool(observed: &[usize], n_items: usize) -> Vec<usize> {
    let mut pool = Vec::with_capacity(n_items - observed.len());
    let mut obs = observed.iter().peekable();
    for i in 0..n_items {
        if obs.peek() == Some(&&i) {
            obs.next();
        } else {
            pool.push(i);
        }
    }
    pool
}

/// Uniform choice from an explicit pool.
pub fn rns_select(pool: &[usize], rng: &mut StreamRng) -> Result<SamplerOutput> {
    let &item = pool
        .choose(rng)
        .ok_or_else(|| Error::Empty("negative pool".into()))?;
    Ok(SamplerOutput::plain(SamplerKind::Rns, item))
}

/// Index of the highest-scoring candidate; ties go to the lowest item id.
pub fn argmax_by_score(scores: &[f64], items: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for k in 0..scores.len() {
        best = match best {
            None => Some(k),
            Some(b) if scores[k] > scores[b] || (scores[k] == scores[b] && items[k] < items[b]) => {
                Some(k)
            }
            keep => keep,
        };
    }
    best
}

/// Picks the candidate with the highest score against `u_vec`.
pub fn dns_select(
    u_vec: &[f64],
    candidates: &CandidateSet,
    params: &ParamStore,
) -> Result<SamplerOutput> {
    let scores: Vec<f64> = candidates
        .items
        .iter()
        .map(|&i| dot(u_vec, params.item(i)))
        .collect();
    let k = argmax_by_score(&scores, &candidates.items)
        .ok_or_else(|| Error::Empty("candidate set".into()))?;
    let mut out = SamplerOutput::plain(SamplerKind::Dns, candidates.items[k]);
    out.candidate_scores = scores;
    Ok(out)
}

/// Sampler selection plus the knobs each strategy reads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// First-pass candidate count for DNS and ANS.
    pub m: usize,
    pub ans: AnsConfig,
}

/// Random streams for one batch element.
pub struct ElementRngs {
    pub candidates: StreamRng,
    pub noise: StreamRng,
}

/// Produces the negative for one training pair.
pub fn sample_negative(
    cfg: &SamplerConfig,
    user: usize,
    positive: usize,
    train: &InteractionSet,
    params: &ParamStore,
    rngs: &mut ElementRngs,
) -> Result<SamplerOutput> {
    sample_negative_detailed(cfg, user, positive, train, params, rngs, false).map(|(out, _)| out)
}

/// Like [`sample_negative`], also returning per-candidate ANS internals when
/// `keep_details` is set. Other samplers return no details. Random streams
/// are consumed identically either way.
pub fn sample_negative_detailed(
    cfg: &SamplerConfig,
    user: usize,
    positive: usize,
    train: &InteractionSet,
    params: &ParamStore,
    rngs: &mut ElementRngs,
    keep_details: bool,
) -> Result<(SamplerOutput, Vec<CandidateDetail>)> {
    let plain = match cfg.kind {
        SamplerKind::Rns => {
            let c = draw_candidates(user, positive, train, 1, &mut rngs.candidates)?;
            rns_select(&c.items, &mut rngs.candidates)
        }
        SamplerKind::Hns => {
            let c = draw_candidates(user, positive, train, 1, &mut rngs.candidates)?;
            let item = c.items[0];
            let vector = ans::hns_transform(params.item(item), params.user(user), params);
            Ok(SamplerOutput {
                provenance: SamplerKind::Hns,
                final_negative: FinalNegative::Synthetic {
                    base_item: item,
                    vector,
                },
                aux_contrastive: 0.0,
                aux_disentangle: 0.0,
                trace: None,
                candidate_scores: Vec::new(),
            })
        }
        SamplerKind::Dns => {
            let c = draw_candidates(user, positive, train, cfg.m, &mut rngs.candidates)?;
            dns_select(params.user(user), &c, params)
        }
        SamplerKind::Ans => {
            let c = draw_candidates(user, positive, train, cfg.m, &mut rngs.candidates)?;
            let s = ans::ans_sample(&c, params, &cfg.ans, &mut rngs.noise, keep_details)?;
            return Ok((s.output, s.details));
        }
    };
    plain.map(|out| (out, Vec::new()))
}
