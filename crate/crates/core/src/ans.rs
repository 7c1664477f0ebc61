//! Augmented negative sampling.
//!
//! For each first-pass candidate `n` of a `(user, positive)` pair:
//!
//! 1. a per-dimension gate `σ(W_item·n ⊙ W_user·u)` splits `n` into a hard
//!    factor `n ⊙ gate` and an easy factor `n − hard`; the positive item is
//!    split with the same gate into `p′` and `p″`;
//! 2. the easy factor is pushed towards `p″` along `sgn(p″ − easy)` by a
//!    uniform noise vector whose L2 norm is capped by the margin
//!    `σ(1 / W_mag·(hard ⊙ p′))`;
//! 3. the candidate maximising `score + ε·gain` wins, where `gain` is the
//!    score change caused by the augmentation.
//!
//! The contrastive and disentanglement losses over the whole candidate set are
//! returned alongside the winner so the objective can train the gates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sgn, sigmoid};
use crate::model::ParamStore;
use crate::rng::StreamRng;
use crate::sampler::{argmax_by_score, CandidateSet, FinalNegative, SamplerKind, SamplerOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnsConfig {
    /// Weight of the augmentation gain in the final selection.
    pub epsilon: f64,
    /// Upper end of the uniform noise interval `[0, noise_high]`.
    pub noise_high: f64,
    /// Smallest magnitude allowed for the margin denominator.
    pub mag_clamp: f64,
}

impl Default for AnsConfig {
    fn default() -> Self {
        AnsConfig {
            epsilon: 0.5,
            noise_high: 0.1,
            mag_clamp: 1e-8,
        }
    }
}

/// Hard/easy split of one negative embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub gate: Vec<f64>,
    pub hard: Vec<f64>,
    pub easy: Vec<f64>,
}

/// The positive item split with a negative's gate.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveFactors {
    pub p_prime: Vec<f64>,
    pub p_dprime: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedNegative {
    pub base_item: usize,
    pub aug_vec: Vec<f64>,
    pub direction: Vec<f64>,
    pub delta: Vec<f64>,
    pub margin: f64,
    pub score_before: f64,
    pub score_after: f64,
    pub gain: f64,
}

/// Sampling decisions that carry no gradient: the candidate list, the
/// winner, and the winner's noise draw, direction and regulation branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AnsTrace {
    pub candidates: Vec<usize>,
    pub winner: usize,
    pub noise: Vec<f64>,
    pub direction: Vec<f64>,
    pub rescaled: bool,
    /// Margin fixed by the denominator clamp, if the clamp fired.
    pub clamped_margin: Option<f64>,
    /// Candidate DNS would have picked from the same set.
    pub dns_choice: usize,
}

impl AnsTrace {
    pub fn winner_item(&self) -> usize {
        self.candidates[self.winner]
    }
}

#[inline]
fn gate_from_projections(item_proj: &[f64], user_proj: &[f64]) -> Vec<f64> {
    item_proj
        .iter()
        .zip(user_proj)
        .map(|(a, b)| sigmoid(a * b))
        .collect()
}

/// `σ(W_item·n ⊙ W_user·u)`.
pub fn compute_gate(u_vec: &[f64], n_vec: &[f64], params: &ParamStore) -> Vec<f64> {
    let user_proj = params.w_user.matvec(u_vec);
    let item_proj = params.w_item.matvec(n_vec);
    gate_from_projections(&item_proj, &user_proj)
}

pub fn disentangle(n_vec: &[f64], gate: &[f64]) -> FactorPair {
    let hard: Vec<f64> = n_vec.iter().zip(gate).map(|(n, g)| n * g).collect();
    let easy = n_vec.iter().zip(&hard).map(|(n, h)| n - h).collect();
    FactorPair {
        gate: gate.to_vec(),
        hard,
        easy,
    }
}

pub fn positive_factors(p_vec: &[f64], gate: &[f64]) -> PositiveFactors {
    let p_prime: Vec<f64> = p_vec.iter().zip(gate).map(|(p, g)| p * g).collect();
    let p_dprime = p_vec.iter().zip(&p_prime).map(|(p, h)| p - h).collect();
    PositiveFactors { p_prime, p_dprime }
}

#[inline]
fn contrastive_term(u_vec: &[f64], f: &FactorPair) -> f64 {
    dot(u_vec, &f.easy) - dot(u_vec, &f.hard)
}

#[inline]
fn disentangle_term(pos: &PositiveFactors, f: &FactorPair) -> f64 {
    let dist: f64 = pos
        .p_prime
        .iter()
        .zip(&f.hard)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    dist + dot(&pos.p_dprime, &f.easy)
}

/// Mean over candidates of `s(u, easy) − s(u, hard)`.
pub fn contrastive_loss(u_vec: &[f64], factors: &[FactorPair]) -> Result<f64> {
    if factors.is_empty() {
        return Err(Error::Empty("candidate set".into()));
    }
    Ok(factors
        .iter()
        .map(|f| contrastive_term(u_vec, f))
        .sum::<f64>()
        / factors.len() as f64)
}

/// Mean over candidates of `‖p′ − hard‖² + s(p″, easy)`.
pub fn disentanglement_loss(positives: &[PositiveFactors], factors: &[FactorPair]) -> Result<f64> {
    if factors.is_empty() {
        return Err(Error::Empty("candidate set".into()));
    }
    if positives.len() != factors.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} positive factor pairs", factors.len()),
            actual: positives.len().to_string(),
        });
    }
    Ok(positives
        .iter()
        .zip(factors)
        .map(|(p, f)| disentangle_term(p, f))
        .sum::<f64>()
        / factors.len() as f64)
}

/// `sgn(p″ − easy)` with `sgn(0) = 0`.
pub fn augment_direction(p_dprime: &[f64], easy: &[f64]) -> Vec<f64> {
    p_dprime.iter().zip(easy).map(|(p, e)| sgn(p - e)).collect()
}

/// Margin `σ(1 / W_mag·(hard ⊙ p′))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margin {
    pub value: f64,
    /// The raw denominator `W_mag·(hard ⊙ p′)`.
    pub similarity: f64,
    pub clamped: bool,
}

// Keeps the margin strictly inside (0, 1) once the sigmoid saturates.
const MARGIN_FLOOR: f64 = f64::MIN_POSITIVE;
const MARGIN_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn margin(hard: &[f64], p_prime: &[f64], w_mag: &[f64], mag_clamp: f64) -> Margin {
    let similarity: f64 = w_mag
        .iter()
        .zip(hard)
        .zip(p_prime)
        .map(|((w, h), p)| w * h * p)
        .sum();
    let clamped = similarity.abs() < mag_clamp;
    let denom = if clamped {
        mag_clamp.copysign(similarity)
    } else {
        similarity
    };
    Margin {
        value: sigmoid(1.0 / denom).clamp(MARGIN_FLOOR, MARGIN_CEIL),
        similarity,
        clamped,
    }
}

/// The margin pulled in by the worst-case rounding of a `d`-term norm, so
/// that a vector regulated to this radius has norm at most `margin` however
/// the norm is evaluated.
pub fn regulation_radius(margin: f64, d: usize) -> f64 {
    margin * (1.0 - (d as f64 + 2.0) * f64::EPSILON)
}

/// Scales `noise` into the L2 ball of radius `margin` when it lies outside.
/// Returns the regulated vector and whether scaling happened.
pub fn regulate(noise: &[f64], margin: f64) -> (Vec<f64>, bool) {
    let radius = regulation_radius(margin, noise.len());
    let len = norm(noise);
    if len <= radius {
        return (noise.to_vec(), false);
    }
    let scale = radius / len;
    let mut delta: Vec<f64> = noise.iter().map(|x| x * scale).collect();
    // Rounding can leave the norm a few ulps above the radius. The shrink step
    // widens each round so subnormal vectors also make progress.
    let mut step = f64::EPSILON;
    while norm(&delta) > radius {
        delta.iter_mut().for_each(|x| *x *= 1.0 - step);
        step = (step * 2.0).min(0.5);
    }
    (delta, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Magnitude {
    pub delta: Vec<f64>,
    pub noise: Vec<f64>,
    pub margin: Margin,
    pub rescaled: bool,
}

/// Draws `Uniform[0, noise_high]^d` noise and regulates it by the margin.
pub fn augment_magnitude(
    hard: &[f64],
    p_prime: &[f64],
    w_mag: &[f64],
    cfg: &AnsConfig,
    rng: &mut StreamRng,
) -> Magnitude {
    let noise: Vec<f64> = (0..hard.len())
        .map(|_| rng.random::<f64>() * cfg.noise_high)
        .collect();
    let margin = margin(hard, p_prime, w_mag, cfg.mag_clamp);
    let (delta, rescaled) = regulate(&noise, margin.value);
    Magnitude {
        delta,
        noise,
        margin,
        rescaled,
    }
}

/// `(easy + Δ ⊙ dir) + hard`. Because `easy + hard` is the original
/// negative, this is evaluated as `n + Δ ⊙ dir`.
pub fn augment(n_vec: &[f64], delta: &[f64], direction: &[f64]) -> Vec<f64> {
    n_vec
        .iter()
        .zip(delta)
        .zip(direction)
        .map(|((n, d), s)| n + d * s)
        .collect()
}

/// Index maximising `score_after + ε·gain`; ties go to the lowest base item.
pub fn select_final(augmented: &[AugmentedNegative], epsilon: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [0, 1]"
        )));
    }
    let values: Vec<f64> = augmented
        .iter()
        .map(|a| a.score_after + epsilon * a.gain)
        .collect();
    let ids: Vec<usize> = augmented.iter().map(|a| a.base_item).collect();
    argmax_by_score(&values, &ids).ok_or_else(|| Error::Empty("augmented candidate set".into()))
}

/// Per-candidate intermediates, kept when a caller asks for them.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDetail {
    pub original: Vec<f64>,
    pub factors: FactorPair,
    pub positive: PositiveFactors,
    pub augmented: AugmentedNegative,
}

#[derive(Debug, Clone)]
pub struct AnsSample {
    pub output: SamplerOutput,
    /// Empty unless requested.
    pub details: Vec<CandidateDetail>,
}

/// Runs gate → factors → losses → direction → magnitude → augmentation →
/// selection over every candidate and returns the winning synthetic negative.
pub fn ans_sample(
    candidates: &CandidateSet,
    params: &ParamStore,
    cfg: &AnsConfig,
    noise_rng: &mut StreamRng,
    keep_details: bool,
) -> Result<AnsSample> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set".into()));
    }
    let u = params.user(candidates.user);
    let p = params.item(candidates.positive);
    let user_proj = params.w_user.matvec(u);
    let w_mag = params.w_mag_row();

    let m = candidates.len();
    let mut lc = 0.0;
    let mut ld = 0.0;
    let mut augmented = Vec::with_capacity(m);
    let mut magnitudes = Vec::with_capacity(m);
    let mut details = Vec::new();
    for &item in &candidates.items {
        let n = params.item(item);
        let gate = gate_from_projections(&params.w_item.matvec(n), &user_proj);
        let factors = disentangle(n, &gate);
        let positive = positive_factors(p, &gate);
        lc += contrastive_term(u, &factors);
        ld += disentangle_term(&positive, &factors);

        let direction = augment_direction(&positive.p_dprime, &factors.easy);
        let mag = augment_magnitude(&factors.hard, &positive.p_prime, w_mag, cfg, noise_rng);
        let aug_vec = augment(n, &mag.delta, &direction);
        let score_before = dot(u, n);
        let score_after = dot(u, &aug_vec);
        let a = AugmentedNegative {
            base_item: item,
            aug_vec,
            direction,
            delta: mag.delta.clone(),
            margin: mag.margin.value,
            score_before,
            score_after,
            gain: score_after - score_before,
        };
        if keep_details {
            details.push(CandidateDetail {
                original: n.to_vec(),
                factors,
                positive,
                augmented: a.clone(),
            });
        }
        augmented.push(a);
        magnitudes.push(mag);
    }

    let winner = select_final(&augmented, cfg.epsilon)?;
    let before: Vec<f64> = augmented.iter().map(|a| a.score_before).collect();
    let dns_choice =
        candidates.items[argmax_by_score(&before, &candidates.items).expect("non-empty")];
    let mag = magnitudes.swap_remove(winner);
    let chosen = augmented.swap_remove(winner);
    let trace = AnsTrace {
        candidates: candidates.items.clone(),
        winner,
        noise: mag.noise,
        direction: chosen.direction,
        rescaled: mag.rescaled,
        clamped_margin: mag.margin.clamped.then_some(mag.margin.value),
        dns_choice,
    };
    Ok(AnsSample {
        output: SamplerOutput {
            provenance: SamplerKind::Ans,
            final_negative: FinalNegative::Synthetic {
                base_item: chosen.base_item,
                vector: chosen.aug_vec,
            },
            aux_contrastive: lc / m as f64,
            aux_disentangle: ld / m as f64,
            trace: Some(trace),
            candidate_scores: before,
        },
        details,
    })
}

/// Hard factor of `n_vec` with respect to `u_vec`, used directly as the
/// negative embedding by the hard-factor-only ablation.
pub fn hns_transform(n_vec: &[f64], u_vec: &[f64], params: &ParamStore) -> Vec<f64> {
    let gate = compute_gate(u_vec, n_vec, params);
    n_vec.iter().zip(&gate).map(|(n, g)| n * g).collect()
}
