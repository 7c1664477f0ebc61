//! Latent-factor interaction generator for desk-scale experiments.

use rand::Rng;
use rand_distr::{Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Each user draws `per_user` distinct items without replacement, with
/// probability proportional to `exp(sharpness · (u·v/√rank) + popularity · b_i)`,
/// where user, item and bias factors are standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    pub per_user: usize,
    pub sharpness: f64,
    pub popularity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            n_items: 500,
            rank: 8,
            per_user: 20,
            sharpness: 2.0,
            popularity: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.rank == 0 || self.per_user == 0 {
            return Err(Error::Config(
                "synthetic users, rank and per_user must be positive".into(),
            ));
        }
        if self.per_user >= self.n_items {
            return Err(Error::Config(format!(
                "per_user {} must be below n_items {}",
                self.per_user, self.n_items
            )));
        }
        if !self.sharpness.is_finite() || !self.popularity.is_finite() {
            return Err(Error::Config(
                "synthetic sharpness and popularity must be finite".into(),
            ));
        }
        Ok(())
    }
}

fn normal_rows(seed: u64, label: &str, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut r = stream(seed, label, &[]);
    (0..rows)
        .map(|_| (0..cols).map(|_| r.sample(StandardNormal)).collect())
        .collect()
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<InteractionSet> {
    cfg.validate()?;
    let users = normal_rows(seed, "synthetic-users", cfg.n_users, cfg.rank);
    let items = normal_rows(seed, "synthetic-items", cfg.n_items, cfg.rank);
    let bias: Vec<f64> = normal_rows(seed, "synthetic-bias", cfg.n_items, 1)
        .into_iter()
        .map(|v| v[0])
        .collect();
    let scale = cfg.sharpness / (cfg.rank as f64).sqrt();
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let mut out = Vec::with_capacity(cfg.n_users * cfg.per_user);
    for (user, u) in users.iter().enumerate() {
        let mut r = stream(seed, "synthetic-draw", &[user as u64]);
        let mut keyed: Vec<(f64, usize)> = items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let logit = scale * crate::linalg::dot(u, v) + cfg.popularity * bias[i];
                (logit + r.sample(gumbel), i)
            })
            .collect();
        keyed.select_nth_unstable_by(cfg.per_user - 1, |a, b| b.0.total_cmp(&a.0));
        out.extend(keyed[..cfg.per_user].iter().map(|&(_, item)| Interaction {
            user,
            item,
            timestamp: None,
        }));
    }
    InteractionSet::new(cfg.n_users, cfg.n_items, out)
}
