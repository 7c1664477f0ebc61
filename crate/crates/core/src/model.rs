//! Learnable parameters of the MF-BPR model and the augmentation gates, the
//! inner-product score and the BPR loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;

/// User/item embedding tables plus the three gate weights used by augmented
/// sampling. Gradients and Adam moments reuse this type, so every tensor has a
/// congruent counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    /// Projects negative-item embeddings into the shared gating space.
    pub w_item: Matrix,
    /// Projects user embeddings into the shared gating space.
    pub w_user: Matrix,
    /// `1 × d` map from the hard-factor similarity vector to the margin logit.
    pub w_mag: Matrix,
}

pub const TENSOR_NAMES: [&str; 5] = ["user_emb", "item_emb", "w_item", "w_user", "w_mag"];

impl ParamStore {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        ParamStore {
            user_emb: Matrix::zeros(n_users, dim),
            item_emb: Matrix::zeros(n_items, dim),
            w_item: Matrix::zeros(dim, dim),
            w_user: Matrix::zeros(dim, dim),
            w_mag: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore::zeros(self.n_users(), self.n_items(), self.dim())
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn n_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.user_emb.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.item_emb.row(i)
    }

    pub fn w_mag_row(&self) -> &[f64] {
        self.w_mag.row(0)
    }

    pub fn tensors(&self) -> [&Matrix; 5] {
        [
            &self.user_emb,
            &self.item_emb,
            &self.w_item,
            &self.w_user,
            &self.w_mag,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 5] {
        [
            &mut self.user_emb,
            &mut self.item_emb,
            &mut self.w_item,
            &mut self.w_user,
            &mut self.w_mag,
        ]
    }

    pub fn same_shape(&self, other: &ParamStore) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .all(|(a, b)| a.shape() == b.shape())
    }

    /// First tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .zip(TENSOR_NAMES)
            .find(|(t, _)| !t.all_finite())
            .map(|(_, name)| name)
    }

    pub fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Xavier-uniform initialisation. Every tensor, embedding tables included,
/// uses fan `(d, d)`, so all entries lie in `[-√(3/d), √(3/d)]`.
pub fn init_params(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<ParamStore> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "embedding size must be at least 1".into(),
        ));
    }
    if n_users == 0 || n_items == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot initialise {n_users} users × {n_items} items"
        )));
    }
    let bound = xavier_bound(dim);
    let mut params = ParamStore::zeros(n_users, n_items, dim);
    for (k, t) in params.tensors_mut().into_iter().enumerate() {
        let mut r = rng::stream(seed, "init", &[k as u64]);
        for x in t.as_mut_slice() {
            *x = r.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

/// Inner-product score.
pub fn score(u_vec: &[f64], i_vec: &[f64]) -> Result<f64> {
    if u_vec.len() != i_vec.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", u_vec.len()),
            actual: format!("length {}", i_vec.len()),
        });
    }
    Ok(linalg::dot(u_vec, i_vec))
}

/// `-ln σ(s_pos - s_neg)`, evaluated as `softplus(s_neg - s_pos)`.
pub fn bpr_loss(s_pos: f64, s_neg: f64) -> f64 {
    linalg::softplus(s_neg - s_pos)
}

/// Per-batch loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub contrastive: f64,
    pub disentangle: f64,
    pub l2: f64,
    pub total: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn compose(
        bpr: f64,
        contrastive: f64,
        disentangle: f64,
        l2: f64,
        gamma: f64,
        lambda: f64,
    ) -> Self {
        LossBreakdown {
            bpr,
            contrastive,
            disentangle,
            l2,
            total: bpr + gamma * (contrastive + disentangle) + lambda * l2,
            gamma,
            lambda,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("bpr loss", self.bpr),
            ("contrastive loss", self.contrastive),
            ("disentanglement loss", self.disentangle),
            ("l2 term", self.l2),
            ("total loss", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn xavier_entries_are_bounded() {
        let p = init_params(7, 11, 64, 3).unwrap();
        let b = (6.0f64 / 128.0).sqrt();
        for t in p.tensors() {
            assert!(t.as_slice().iter().all(|x| x.abs() <= b));
        }
        assert_eq!(p.w_mag.shape(), (1, 64));
        assert_eq!(p.w_item.shape(), (64, 64));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(
            init_params(3, 4, 5, 9).unwrap(),
            init_params(3, 4, 5, 9).unwrap()
        );
        assert_ne!(
            init_params(3, 4, 5, 9).unwrap(),
            init_params(3, 4, 5, 10).unwrap()
        );
    }

    #[test]
    fn init_rejects_degenerate_shapes() {
        assert!(init_params(3, 4, 0, 1).is_err());
        assert!(init_params(0, 4, 2, 1).is_err());
        assert!(init_params(3, 0, 2, 1).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert_eq!(score(&[1.5, -2.0], &[0.0, 0.0]).unwrap(), 0.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(score(&[s, s], &[s, -s]).unwrap().abs() < 1e-15);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bpr_examples() {
        assert!((bpr_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-12);
        let hi = bpr_loss(40.0, 0.0);
        assert!(hi.is_finite() && (0.0..1e-17).contains(&hi));
        assert!((bpr_loss(0.0, 40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_arithmetic() {
        let b = LossBreakdown::compose(0.5, 0.2, 0.3, 7.0, 1.0, 0.0);
        assert!((b.total - 1.0).abs() < 1e-15);
        let b = LossBreakdown::compose(0.5, 0.2, 0.3, 7.0, 1.0, 1e-4);
        assert!(b.total > 1.0);
        assert!(LossBreakdown::compose(f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0)
            .check_finite()
            .is_err());
    }

    proptest! {
        #[test]
        fn bpr_positive_and_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, step in 1e-3f64..5.0) {
            let l = bpr_loss(a, b);
            prop_assert!(l > 0.0 || (a - b) > 36.0);
            prop_assert!(bpr_loss(a + step, b) <= l);
        }
    }
}
