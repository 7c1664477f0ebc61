//! Joint training objective and its exact gradient.
//!
//! Per batch of `B` pairs:
//!
//! ```text
//! total = mean_b bpr_b + γ·(mean_b Lc_b + mean_b Ld_b) + λ·l2
//! l2    = mean_b (‖e_u‖² + ‖e_p‖² + ‖e_base‖²) + Σ ‖gate tensor‖²
//! ```
//!
//! `Lc_b`, `Ld_b` are already means over the pair's candidate set. The gate
//! tensors enter `l2` only when the batch's sampler routes through them.
//!
//! The sampler's argmax, the direction signs, the noise draw and the
//! regulation branch are read from the [`AnsTrace`] and held constant.

use crate::ans::{self, AnsTrace};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softplus, squared_norm};
use crate::model::{LossBreakdown, ParamStore};
use crate::sampler::{FinalNegative, SamplerKind, SamplerOutput};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainBatch {
    pub pairs: Vec<(usize, usize)>,
}

impl TrainBatch {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        TrainBatch { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn joint_loss(
    batch: &TrainBatch,
    params: &ParamStore,
    outputs: &[SamplerOutput],
    gamma: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    evaluate(batch, params, outputs, gamma, lambda, None)
}

/// Loss and full gradient.
pub fn backward(
    batch: &TrainBatch,
    params: &ParamStore,
    outputs: &[SamplerOutput],
    gamma: f64,
    lambda: f64,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut grads = params.zeros_like();
    let loss = backward_into(batch, params, outputs, gamma, lambda, &mut grads)?;
    Ok((loss, grads))
}

/// Like [`backward`] but writes into a caller-owned gradient store, which is
/// cleared first.
pub fn backward_into(
    batch: &TrainBatch,
    params: &ParamStore,
    outputs: &[SamplerOutput],
    gamma: f64,
    lambda: f64,
    grads: &mut ParamStore,
) -> Result<LossBreakdown> {
    if !params.same_shape(grads) {
        return Err(Error::ShapeMismatch {
            expected: "gradient store congruent to parameters".into(),
            actual: "different shapes".into(),
        });
    }
    grads.clear();
    let loss = evaluate(batch, params, outputs, gamma, lambda, Some(grads))?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(loss)
}

/// Gate state for one candidate, recomputed from the current parameters.
struct CandidateState {
    item: usize,
    item_proj: Vec<f64>,
    gate: Vec<f64>,
    hard: Vec<f64>,
    easy: Vec<f64>,
    p_prime: Vec<f64>,
    p_dprime: Vec<f64>,
}

impl CandidateState {
    fn new(item: usize, params: &ParamStore, user_proj: &[f64], pos: &[f64]) -> Self {
        let n = params.item(item);
        let item_proj = params.w_item.matvec(n);
        let gate: Vec<f64> = item_proj
            .iter()
            .zip(user_proj)
            .map(|(a, b)| sigmoid(a * b))
            .collect();
        let f = ans::disentangle(n, &gate);
        let pf = ans::positive_factors(pos, &gate);
        CandidateState {
            item,
            item_proj,
            gate,
            hard: f.hard,
            easy: f.easy,
            p_prime: pf.p_prime,
            p_dprime: pf.p_dprime,
        }
    }
}

/// Upstream gradients on one candidate's factors.
struct FactorGrads {
    hard: Vec<f64>,
    easy: Vec<f64>,
    p_prime: Vec<f64>,
    p_dprime: Vec<f64>,
}

impl FactorGrads {
    fn zeros(d: usize) -> Self {
        FactorGrads {
            hard: vec![0.0; d],
            easy: vec![0.0; d],
            p_prime: vec![0.0; d],
            p_dprime: vec![0.0; d],
        }
    }
}

/// Pushes factor gradients back through the split and the gate into the
/// candidate embedding, the positive, the user and both projections.
#[allow(clippy::too_many_arguments)]
fn factor_backward(
    c: &CandidateState,
    fg: &FactorGrads,
    params: &ParamStore,
    u: &[f64],
    user_proj: &[f64],
    pos: &[f64],
    d_user: &mut [f64],
    d_pos: &mut [f64],
    d_item: &mut [f64],
    grads: &mut ParamStore,
) {
    let n = params.item(c.item);
    let d = n.len();
    let mut d_gate = vec![0.0; d];
    for k in 0..d {
        // hard = n·g, easy = n − hard
        let dh = fg.hard[k] - fg.easy[k];
        d_item[k] += fg.easy[k] + dh * c.gate[k];
        d_gate[k] += dh * n[k];
        // p′ = p·g, p″ = p − p′
        let dp = fg.p_prime[k] - fg.p_dprime[k];
        d_pos[k] += fg.p_dprime[k] + dp * c.gate[k];
        d_gate[k] += dp * pos[k];
    }
    gate_backward(c, &d_gate, params, u, user_proj, n, d_user, d_item, grads);
}

#[allow(clippy::too_many_arguments)]
fn gate_backward(
    c: &CandidateState,
    d_gate: &[f64],
    params: &ParamStore,
    u: &[f64],
    user_proj: &[f64],
    n: &[f64],
    d_user: &mut [f64],
    d_item: &mut [f64],
    grads: &mut ParamStore,
) {
    let d = n.len();
    let mut d_item_proj = vec![0.0; d];
    let mut d_user_proj = vec![0.0; d];
    for k in 0..d {
        let g = c.gate[k];
        let dz = d_gate[k] * g * (1.0 - g);
        d_item_proj[k] = dz * user_proj[k];
        d_user_proj[k] = dz * c.item_proj[k];
    }
    grads.w_item.add_outer(&d_item_proj, n);
    params.w_item.add_transpose_matvec(&d_item_proj, d_item);
    grads.w_user.add_outer(&d_user_proj, u);
    params.w_user.add_transpose_matvec(&d_user_proj, d_user);
}

fn ans_trace(out: &SamplerOutput) -> Result<&AnsTrace> {
    out.trace
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("ANS sampler output without a trace".into()))
}

fn evaluate(
    batch: &TrainBatch,
    params: &ParamStore,
    outputs: &[SamplerOutput],
    gamma: f64,
    lambda: f64,
    mut grads: Option<&mut ParamStore>,
) -> Result<LossBreakdown> {
    if outputs.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} sampler outputs", batch.len()),
            actual: outputs.len().to_string(),
        });
    }
    if batch.is_empty() {
        return Ok(LossBreakdown::compose(0.0, 0.0, 0.0, 0.0, gamma, lambda));
    }
    let d = params.dim();
    let w = 1.0 / batch.len() as f64;
    let reg = 2.0 * lambda * w;

    let mut bpr_sum = 0.0;
    let mut lc_sum = 0.0;
    let mut ld_sum = 0.0;
    let mut l2_sum = 0.0;
    let mut uses_gates = false;
    let mut uses_mag = false;

    for (&(user, positive), out) in batch.pairs.iter().zip(outputs) {
        let u = params.user(user);
        let pos = params.item(positive);
        let base = out.final_negative.base_item();
        let base_vec = params.item(base);

        // Recompute the negative vector and whatever gate state it needs.
        let mut hns_state: Option<CandidateState> = None;
        let mut ans_states: Vec<CandidateState> = Vec::new();
        let mut user_proj: Vec<f64> = Vec::new();
        let mut winner_delta: Option<(Vec<f64>, f64, ans::Margin)> = None;
        let neg: Vec<f64> = match (out.provenance, &out.final_negative) {
            (SamplerKind::Rns | SamplerKind::Dns, FinalNegative::Item(i)) => {
                params.item(*i).to_vec()
            }
            (SamplerKind::Hns, FinalNegative::Synthetic { base_item, .. }) => {
                uses_gates = true;
                user_proj = params.w_user.matvec(u);
                let st = CandidateState::new(*base_item, params, &user_proj, pos);
                let v = st.hard.clone();
                hns_state = Some(st);
                v
            }
            (SamplerKind::Ans, FinalNegative::Synthetic { .. }) => {
                uses_gates = true;
                uses_mag = true;
                let trace = ans_trace(out)?;
                if trace.candidate_item_mismatch(base) {
                    return Err(Error::InvalidArgument(
                        "trace winner disagrees with final negative".into(),
                    ));
                }
                user_proj = params.w_user.matvec(u);
                ans_states = trace
                    .candidates
                    .iter()
                    .map(|&i| CandidateState::new(i, params, &user_proj, pos))
                    .collect();
                let win = &ans_states[trace.winner];
                let margin = match trace.clamped_margin {
                    Some(value) => ans::Margin {
                        value,
                        similarity: 0.0,
                        clamped: true,
                    },
                    None => ans::margin(&win.hard, &win.p_prime, params.w_mag_row(), 0.0),
                };
                let delta = if trace.rescaled {
                    let norm = squared_norm(&trace.noise).sqrt();
                    let radius = ans::regulation_radius(margin.value, trace.noise.len());
                    trace.noise.iter().map(|x| x * (radius / norm)).collect()
                } else {
                    trace.noise.clone()
                };
                let v = ans::augment(base_vec, &delta, &trace.direction);
                winner_delta = Some((delta, squared_norm(&trace.noise).sqrt(), margin));
                v
            }
            (kind, _) => {
                return Err(Error::InvalidArgument(format!(
                    "final negative shape does not match provenance {kind}"
                )))
            }
        };

        let s_pos = dot(u, pos);
        let s_neg = dot(u, &neg);
        bpr_sum += softplus(s_neg - s_pos);
        l2_sum += squared_norm(u) + squared_norm(pos) + squared_norm(base_vec);

        let mut lc = 0.0;
        let mut ld = 0.0;
        if !ans_states.is_empty() {
            let m = ans_states.len() as f64;
            for c in &ans_states {
                lc += dot(u, &c.easy) - dot(u, &c.hard);
                let dist: f64 = c
                    .p_prime
                    .iter()
                    .zip(&c.hard)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                ld += dist + dot(&c.p_dprime, &c.easy);
            }
            lc /= m;
            ld /= m;
            lc_sum += lc;
            ld_sum += ld;
        }

        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };

        // BPR and per-pair L2, shared by every sampler.
        let c = w * sigmoid(s_neg - s_pos);
        let mut d_user: Vec<f64> = (0..d).map(|k| c * (neg[k] - pos[k]) + reg * u[k]).collect();
        let mut d_pos: Vec<f64> = (0..d).map(|k| -c * u[k] + reg * pos[k]).collect();
        let d_neg: Vec<f64> = u.iter().map(|x| c * x).collect();
        let mut d_base: Vec<f64> = (0..d).map(|k| reg * base_vec[k]).collect();

        match out.provenance {
            SamplerKind::Rns | SamplerKind::Dns => axpy(1.0, &d_neg, &mut d_base),
            SamplerKind::Hns => {
                let st = hns_state.as_ref().expect("hns state");
                let mut d_gate = vec![0.0; d];
                for k in 0..d {
                    d_base[k] += d_neg[k] * st.gate[k];
                    d_gate[k] = d_neg[k] * base_vec[k];
                }
                gate_backward(
                    st,
                    &d_gate,
                    params,
                    u,
                    &user_proj,
                    base_vec,
                    &mut d_user,
                    &mut d_base,
                    grads,
                );
            }
            SamplerKind::Ans => {
                axpy(1.0, &d_neg, &mut d_base);
                let trace = ans_trace(out)?;
                let (_, noise_norm, margin) = winner_delta.as_ref().expect("winner delta");
                let margin_path = trace.rescaled && !margin.clamped;
                let aux = gamma != 0.0;
                let weight = gamma * w / ans_states.len() as f64;
                for (j, st) in ans_states.iter().enumerate() {
                    let is_winner = j == trace.winner;
                    if !aux && !(is_winner && margin_path) {
                        continue;
                    }
                    let mut fg = FactorGrads::zeros(d);
                    if aux {
                        for k in 0..d {
                            // Lc = u·easy − u·hard
                            d_user[k] += weight * (st.easy[k] - st.hard[k]);
                            fg.easy[k] += weight * u[k];
                            fg.hard[k] -= weight * u[k];
                            // Ld = ‖p′ − hard‖² + p″·easy
                            let diff = 2.0 * weight * (st.p_prime[k] - st.hard[k]);
                            fg.p_prime[k] += diff;
                            fg.hard[k] -= diff;
                            fg.p_dprime[k] += weight * st.easy[k];
                            fg.easy[k] += weight * st.p_dprime[k];
                        }
                    }
                    if is_winner && margin_path {
                        // delta = noise · c·margin / ‖noise‖, margin = σ(1/s), s = w_mag·(hard ⊙ p′)
                        let c = ans::regulation_radius(1.0, d);
                        let d_margin: f64 = (0..d)
                            .map(|k| {
                                d_neg[k] * trace.direction[k] * trace.noise[k] * c / noise_norm
                            })
                            .sum();
                        let s = margin.similarity;
                        let sig = sigmoid(1.0 / s);
                        let d_s = d_margin * sig * (1.0 - sig) * (-1.0 / (s * s));
                        let w_mag = params.w_mag_row();
                        let dw = grads.w_mag.row_mut(0);
                        for k in 0..d {
                            dw[k] += d_s * st.hard[k] * st.p_prime[k];
                            fg.hard[k] += d_s * w_mag[k] * st.p_prime[k];
                            fg.p_prime[k] += d_s * w_mag[k] * st.hard[k];
                        }
                    }
                    if is_winner {
                        factor_backward(
                            st,
                            &fg,
                            params,
                            u,
                            &user_proj,
                            pos,
                            &mut d_user,
                            &mut d_pos,
                            &mut d_base,
                            grads,
                        );
                    } else {
                        let mut d_item = vec![0.0; d];
                        factor_backward(
                            st,
                            &fg,
                            params,
                            u,
                            &user_proj,
                            pos,
                            &mut d_user,
                            &mut d_pos,
                            &mut d_item,
                            grads,
                        );
                        axpy(1.0, &d_item, grads.item_emb.row_mut(st.item));
                    }
                }
            }
        }

        axpy(1.0, &d_user, grads.user_emb.row_mut(user));
        axpy(1.0, &d_pos, grads.item_emb.row_mut(positive));
        axpy(1.0, &d_base, grads.item_emb.row_mut(base));
    }

    let mut l2 = w * l2_sum;
    if uses_gates {
        l2 += params.w_item.squared_norm() + params.w_user.squared_norm();
        if let Some(g) = grads.as_deref_mut() {
            axpy(
                2.0 * lambda,
                params.w_item.as_slice(),
                g.w_item.as_mut_slice(),
            );
            axpy(
                2.0 * lambda,
                params.w_user.as_slice(),
                g.w_user.as_mut_slice(),
            );
        }
    }
    if uses_mag {
        l2 += params.w_mag.squared_norm();
        if let Some(g) = grads {
            axpy(
                2.0 * lambda,
                params.w_mag.as_slice(),
                g.w_mag.as_mut_slice(),
            );
        }
    }
    let loss = LossBreakdown::compose(w * bpr_sum, w * lc_sum, w * ld_sum, l2, gamma, lambda);
    loss.check_finite()?;
    Ok(loss)
}

impl AnsTrace {
    fn candidate_item_mismatch(&self, base: usize) -> bool {
        self.candidates.get(self.winner) != Some(&base)
    }
}
