#![allow(dead_code)]

use ansrec::ans::{ans_sample, AnsConfig};
use ansrec::dataset::{Interaction, InteractionSet};
use ansrec::model::ParamStore;
use ansrec::objective::{joint_loss, TrainBatch};
use ansrec::rng::{stream, StreamRng};
use ansrec::sampler::{sample_negative, ElementRngs, SamplerConfig, SamplerKind, SamplerOutput};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

/// A small random training problem with frozen sampler decisions.
pub struct Instance {
    pub params: ParamStore,
    pub train: InteractionSet,
    pub batch: TrainBatch,
    pub outputs: Vec<SamplerOutput>,
    pub gamma: f64,
    pub lambda: f64,
    pub kind: SamplerKind,
}

pub fn random_params(r: &mut StreamRng, n_users: usize, n_items: usize, d: usize) -> ParamStore {
    let mut p = ParamStore::zeros(n_users, n_items, d);
    for t in p.tensors_mut() {
        for x in t.as_mut_slice() {
            *x = r.random_range(-1.0..1.0);
        }
    }
    p
}

pub fn random_instance(seed: u64, kind: SamplerKind) -> Instance {
    let mut r = stream(seed, "gradcheck-instance", &[]);
    let m = r.random_range(1..=4usize);
    let n_items = r.random_range((m + 2)..=10usize);
    let n_users = r.random_range(2..=10usize);
    let d = r.random_range(1..=8usize);
    let mut inter = Vec::new();
    for user in 0..n_users {
        let k = r.random_range(1..=(n_items - m));
        let mut items: Vec<usize> = (0..n_items).collect();
        items.shuffle(&mut r);
        for &item in &items[..k] {
            inter.push(Interaction {
                user,
                item,
                timestamp: None,
            });
        }
    }
    let train = InteractionSet::new(n_users, n_items, inter).unwrap();
    let params = random_params(&mut r, n_users, n_items, d);
    let pairs: Vec<(usize, usize)> = train.pairs().collect();
    let b = r.random_range(1..=6usize);
    let batch = TrainBatch::new((0..b).map(|_| *pairs.choose(&mut r).unwrap()).collect());
    let cfg = SamplerConfig {
        kind,
        m,
        ans: AnsConfig {
            epsilon: r.random_range(0.0..=1.0),
            noise_high: r.random_range(0.05..1.0),
            mag_clamp: 1e-8,
        },
    };
    let gamma = r.random_range(0.0..1.0);
    let lambda = r.random_range(0.0..0.1);
    let outputs = batch
        .pairs
        .iter()
        .enumerate()
        .map(|(k, &(u, p))| {
            let mut rngs = ElementRngs {
                candidates: stream(seed, "gc-cand", &[k as u64]),
                noise: stream(seed, "gc-noise", &[k as u64]),
            };
            sample_negative(&cfg, u, p, &train, &params, &mut rngs).unwrap()
        })
        .collect();
    Instance {
        params,
        train,
        batch,
        outputs,
        gamma,
        lambda,
        kind,
    }
}

/// Central finite differences of the joint loss w.r.t. every parameter.
pub fn finite_difference(inst: &Instance, h: f64) -> ParamStore {
    let mut fd = inst.params.zeros_like();
    let mut p = inst.params.clone();
    for t in 0..5 {
        let len = inst.params.tensors()[t].as_slice().len();
        for j in 0..len {
            let orig = inst.params.tensors()[t].as_slice()[j];
            p.tensors_mut()[t].as_mut_slice()[j] = orig + h;
            let plus = joint_loss(&inst.batch, &p, &inst.outputs, inst.gamma, inst.lambda)
                .unwrap()
                .total;
            p.tensors_mut()[t].as_mut_slice()[j] = orig - h;
            let minus = joint_loss(&inst.batch, &p, &inst.outputs, inst.gamma, inst.lambda)
                .unwrap()
                .total;
            p.tensors_mut()[t].as_mut_slice()[j] = orig;
            fd.tensors_mut()[t].as_mut_slice()[j] = (plus - minus) / (2.0 * h);
        }
    }
    fd
}

/// Per-coordinate relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamStore, b: &ParamStore, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (t, (x, y)) in a.tensors().iter().zip(b.tensors()).enumerate() {
        for (j, (&p, &q)) in x.as_slice().iter().zip(y.as_slice()).enumerate() {
            let rel = (p - q).abs() / p.abs().max(q.abs()).max(floor);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!(
                        "{}[{j}]: analytic {p:e} vs fd {q:e}",
                        ansrec::model::TENSOR_NAMES[t]
                    ),
                );
            }
        }
    }
    worst
}

/// Re-run ANS with a fresh noise stream, to get candidate-level details.
pub fn ans_details(
    params: &ParamStore,
    candidates: &ansrec::sampler::CandidateSet,
    cfg: &AnsConfig,
    seed: u64,
) -> ansrec::ans::AnsSample {
    let mut r = stream(seed, "details", &[]);
    ans_sample(candidates, params, cfg, &mut r, true).unwrap()
}
