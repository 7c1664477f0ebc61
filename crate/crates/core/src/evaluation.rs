//! Full-ranking top-K evaluation and the pairwise exclusive-hit ratio.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{union_items, InteractionSet};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::ParamStore;

pub const DEFAULT_KS: [usize; 3] = [10, 15, 20];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
}

/// Orders by score descending, then item id ascending.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top `k` items for `user` by inner product, skipping `exclusions` (sorted).
pub fn rank_topk(
    params: &ParamStore,
    user: usize,
    k: usize,
    exclusions: &[usize],
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if user >= params.n_users() {
        return Err(Error::InvalidArgument(format!("user {user} out of range")));
    }
    let u = params.user(user);
    let mut scored: Vec<(f64, usize)> = (0..params.n_items())
        .filter(|i| exclusions.binary_search(i).is_err())
        // adding 0.0 turns -0.0 into 0.0 so signed zeros tie on id
        .map(|i| (dot(u, params.item(i)) + 0.0, i))
        .collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_order);
    Ok(RankedList {
        user,
        items: scored.into_iter().map(|(_, i)| i).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub hit: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Hit, recall and binary-relevance NDCG of the first `k` ranked items.
/// `test_items` must be sorted.
pub fn metrics_at_k(ranked: &[usize], test_items: &[usize], k: usize) -> Result<UserMetrics> {
    if test_items.is_empty() {
        return Err(Error::Empty("test items".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in ranked.iter().take(k).enumerate() {
        if test_items.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(test_items.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Ok(UserMetrics {
        hit: if hits > 0 { 1.0 } else { 0.0 },
        recall: hits as f64 / test_items.len() as f64,
        ndcg: dcg / idcg,
    })
}

/// Test interactions a method ranked inside its top `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitSet {
    pub tag: String,
    pub k: usize,
    pub hits: BTreeSet<(usize, usize)>,
}

/// Share of `x`'s hits that `y` missed.
pub fn per(x: &HitSet, y: &HitSet) -> Result<f64> {
    if x.hits.is_empty() {
        return Err(Error::Empty(format!("hit set of {}", x.tag)));
    }
    let exclusive = x.hits.difference(&y.hits).count();
    Ok(exclusive as f64 / x.hits.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hit_ratio: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: Vec<KMetrics>,
    pub evaluated_users: usize,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// NDCG at `k`, or 0 when `k` was not evaluated.
    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(0.0, |m| m.ndcg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// One hit set per evaluated K, in the order of `ks`.
    pub hits: Vec<HitSet>,
}

impl Evaluation {
    pub fn hits_at(&self, k: usize) -> Option<&HitSet> {
        self.hits.iter().find(|h| h.k == k)
    }
}

/// Ranks every item for each user with held-out interactions in `target`,
/// excluding what the user has in any of `exclude`, and macro-averages.
pub fn evaluate(
    params: &ParamStore,
    target: &InteractionSet,
    exclude: &[&InteractionSet],
    ks: &[usize],
    tag: &str,
) -> Result<Evaluation> {
    let max_k = *ks
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidArgument("no K values".into()))?;
    let users: Vec<usize> = target.active_users().collect();
    let per_user: Vec<(usize, Vec<usize>, Vec<UserMetrics>)> = users
        .par_iter()
        .map(|&user| {
            let exclusions = union_items(user, exclude);
            let ranked = rank_topk(params, user, max_k, &exclusions)?;
            let test = target.user_items(user);
            let m = ks
                .iter()
                .map(|&k| metrics_at_k(&ranked.items, test, k))
                .collect::<Result<Vec<_>>>()?;
            Ok((user, ranked.items, m))
        })
        .collect::<Result<_>>()?;

    let n = per_user.len();
    let mut metrics = Vec::with_capacity(ks.len());
    let mut hits = Vec::with_capacity(ks.len());
    for (j, &k) in ks.iter().enumerate() {
        let (mut h, mut r, mut g) = (0.0, 0.0, 0.0);
        let mut set = BTreeSet::new();
        for (user, ranked, m) in &per_user {
            h += m[j].hit;
            r += m[j].recall;
            g += m[j].ndcg;
            let test = target.user_items(*user);
            set.extend(
                ranked
                    .iter()
                    .take(k)
                    .filter(|i| test.binary_search(i).is_ok())
                    .map(|&i| (*user, i)),
            );
        }
        let denom = n.max(1) as f64;
        metrics.push(KMetrics {
            k,
            hit_ratio: h / denom,
            recall: r / denom,
            ndcg: g / denom,
        });
        hits.push(HitSet {
            tag: tag.to_string(),
            k,
            hits: set,
        });
    }
    Ok(Evaluation {
        report: MetricReport {
            metrics,
            evaluated_users: n,
            seed: None,
            config: None,
        },
        hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use crate::linalg::Matrix;

    fn one_dim(items: &[f64]) -> ParamStore {
        let mut p = ParamStore::zeros(1, items.len(), 1);
        p.user_emb = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        p.item_emb = Matrix::from_vec(items.len(), 1, items.to_vec()).unwrap();
        p
    }

    #[test]
    fn ranks_by_score() {
        let p = one_dim(&[3.0, 1.0, 2.0]);
        assert_eq!(rank_topk(&p, 0, 2, &[]).unwrap().items, vec![0, 2]);
        assert_eq!(rank_topk(&p, 0, 10, &[]).unwrap().items, vec![0, 2, 1]);
        assert_eq!(rank_topk(&p, 0, 2, &[0]).unwrap().items, vec![2, 1]);
        assert!(rank_topk(&p, 0, 0, &[]).is_err());
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let p = one_dim(&[1.0, 2.0, 2.0, 1.0, 2.0]);
        assert_eq!(rank_topk(&p, 0, 4, &[]).unwrap().items, vec![1, 2, 4, 0]);
    }

    #[test]
    fn metric_examples() {
        let (a, b, x, y) = (1, 2, 7, 8);
        let m = metrics_at_k(&[a, x, y], &[a, b], 3).unwrap();
        assert_eq!((m.hit, m.recall), (1.0, 0.5));
        let m = metrics_at_k(&[x, a, y], &[a], 3).unwrap();
        assert!((m.ndcg - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((m.ndcg - 0.6309).abs() < 1e-4);
        let m = metrics_at_k(&[x, y], &[a], 3).unwrap();
        assert_eq!((m.hit, m.recall, m.ndcg), (0.0, 0.0, 0.0));
        assert!(metrics_at_k(&[x], &[], 3).is_err());
    }

    #[test]
    fn perfect_ranking_has_unit_ndcg() {
        let m = metrics_at_k(&[4, 5, 6, 9], &[4, 5, 6], 2).unwrap();
        assert_eq!(m.ndcg, 1.0);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    fn hs(v: &[(usize, usize)]) -> HitSet {
        HitSet {
            tag: "t".into(),
            k: 20,
            hits: v.iter().copied().collect(),
        }
    }

    #[test]
    fn per_examples() {
        let x = hs(&[(0, 1), (0, 2), (0, 3)]);
        assert!((per(&x, &hs(&[(0, 2)])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            per(&x, &hs(&[(0, 1), (0, 2), (0, 3), (1, 1)])).unwrap(),
            0.0
        );
        assert_eq!(per(&x, &hs(&[(5, 5)])).unwrap(), 1.0);
        assert_eq!(per(&x, &x).unwrap(), 0.0);
        assert!(per(&hs(&[]), &x).is_err());
    }

    #[test]
    fn evaluate_excludes_training_items_and_averages() {
        // user 0 trains on item 0, tests on item 1; user 1 has no test items
        let mut p = ParamStore::zeros(2, 3, 1);
        p.user_emb = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        p.item_emb = Matrix::from_vec(3, 1, vec![3.0, 1.0, 2.0]).unwrap();
        let it = |user, item| Interaction {
            user,
            item,
            timestamp: None,
        };
        let train = InteractionSet::new(2, 3, vec![it(0, 0), it(1, 2)]).unwrap();
        let test = InteractionSet::new(2, 3, vec![it(0, 1)]).unwrap();
        let e = evaluate(&p, &test, &[&train], &[1, 2], "rns").unwrap();
        assert_eq!(e.report.evaluated_users, 1);
        assert_eq!(e.report.at(1).unwrap().hit_ratio, 0.0);
        let k2 = e.report.at(2).unwrap();
        assert_eq!((k2.hit_ratio, k2.recall), (1.0, 1.0));
        assert!((k2.ndcg - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!(e.hits_at(1).unwrap().hits.is_empty());
        assert_eq!(
            e.hits_at(2)
                .unwrap()
                .hits
                .iter()
                .copied()
                .collect::<Vec<_>>(),
            vec![(0, 1)]
        );
    }
}
