//! The training loop: data preparation, per-epoch validation with early
//! stopping, test evaluation of the best snapshot, and run records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ans::CandidateDetail;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{DatasetConfig, RunConfig, SplitConfig};
use crate::dataset::{
    ingest_interactions, split_by_timestamp, split_random, InteractionSet, Splits,
};
use crate::diagnostics::{
    pair_scores, sample_unobserved_pairs, score_histogram, GainStats, MinMaxAccumulator,
    MinMaxPoint, OverlapCounter, OverlapStat, ScoreHistogram,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Evaluation, HitSet, MetricReport};
use crate::model::{init_params, LossBreakdown, ParamStore};
use crate::objective::{backward_into, TrainBatch};
use crate::optim::{adam_step_masked, OptimizerState, UpdateMask};
use crate::rng::stream;
use crate::sampler::{sample_negative_detailed, ElementRngs, SamplerOutput};
use crate::synthetic;

/// Builds the train/validation/test splits a config describes.
pub fn prepare_splits(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { generator, ratios } => {
            let set = synthetic::generate(generator, cfg.seed)?;
            split_random(&set, (ratios[0], ratios[1], ratios[2]), cfg.seed)
        }
        DatasetConfig::File {
            path,
            has_timestamp,
            split,
        } => {
            let set = ingest_interactions(path, *has_timestamp)?.set;
            match split {
                SplitConfig::TimestampCut {
                    cutoff,
                    val_fraction,
                } => split_by_timestamp(&set, *cutoff, *val_fraction, cfg.seed),
                SplitConfig::Random { ratios } => {
                    split_random(&set, (ratios[0], ratios[1], ratios[2]), cfg.seed)
                }
            }
        }
    }
}

/// Hooks into the training loop. Every method has a no-op default.
pub trait TrainObserver {
    /// Ask ANS to return per-candidate internals with each sample.
    fn wants_details(&self) -> bool {
        false
    }

    fn on_sample(&mut self, _epoch: usize, _output: &SamplerOutput, _details: &[CandidateDetail]) {}

    /// Called with epoch 0 before training and after every trained epoch.
    fn on_epoch_end(&mut self, _epoch: usize, _params: &ParamStore) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub histograms: Vec<ScoreHistogram>,
    pub minmax: Vec<MinMaxPoint>,
    pub overlap_per_epoch: Vec<OverlapStat>,
    pub overlap_whole_run: Option<OverlapStat>,
    pub gains: GainStats,
}

/// Collects the score histograms, min/max curve, DNS/ANS overlap and gain
/// summary. Uses its own random stream, so training draws are unaffected.
pub struct DiagnosticsCollector {
    checkpoints: Vec<usize>,
    bins: usize,
    pairs: Vec<(usize, usize)>,
    details: bool,
    histograms: Vec<ScoreHistogram>,
    minmax: MinMaxAccumulator,
    overlap: OverlapCounter,
    gains: GainStats,
}

impl DiagnosticsCollector {
    pub fn new(cfg: &RunConfig, train: &InteractionSet) -> Result<Self> {
        let d = &cfg.diagnostics;
        let mut r = stream(cfg.seed, "diagnostic-pairs", &[]);
        Ok(DiagnosticsCollector {
            checkpoints: d.checkpoints.clone(),
            bins: d.histogram_bins,
            pairs: sample_unobserved_pairs(train, d.histogram_pairs, &mut r)?,
            details: cfg.sampler == crate::sampler::SamplerKind::Ans,
            histograms: Vec::new(),
            minmax: MinMaxAccumulator::default(),
            overlap: OverlapCounter::default(),
            gains: GainStats::default(),
        })
    }

    pub fn report(&self) -> Result<DiagnosticsReport> {
        Ok(DiagnosticsReport {
            histograms: self.histograms.clone(),
            minmax: if self.minmax.is_empty() {
                Vec::new()
            } else {
                self.minmax.finish()?
            },
            overlap_per_epoch: self.overlap.per_epoch(),
            overlap_whole_run: self.overlap.whole_run(),
            gains: self.gains,
        })
    }
}

impl TrainObserver for DiagnosticsCollector {
    fn wants_details(&self) -> bool {
        self.details
    }

    fn on_sample(&mut self, epoch: usize, output: &SamplerOutput, details: &[CandidateDetail]) {
        self.minmax.push(epoch, &output.candidate_scores);
        if let Some(t) = &output.trace {
            self.overlap.push(epoch, t.winner_item(), t.dns_choice);
            if let Some(d) = details.get(t.winner) {
                self.gains.push(d.augmented.gain);
            }
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &ParamStore) -> Result<()> {
        if !self.checkpoints.contains(&epoch) {
            return Ok(());
        }
        let scores = pair_scores(params, &self.pairs);
        let marker = self.histograms.first().map(|h| h.marker);
        self.histograms
            .push(score_histogram(epoch, &scores, self.bins, marker)?);
        Ok(())
    }
}

struct Both<'a, 'b> {
    diagnostics: Option<&'a mut DiagnosticsCollector>,
    user: &'b mut dyn TrainObserver,
}

impl TrainObserver for Both<'_, '_> {
    fn wants_details(&self) -> bool {
        self.user.wants_details() || self.diagnostics.as_ref().is_some_and(|d| d.wants_details())
    }

    fn on_sample(&mut self, epoch: usize, output: &SamplerOutput, details: &[CandidateDetail]) {
        if let Some(d) = self.diagnostics.as_deref_mut() {
            d.on_sample(epoch, output, details);
        }
        self.user.on_sample(epoch, output, details);
    }

    fn on_epoch_end(&mut self, epoch: usize, params: &ParamStore) -> Result<()> {
        if let Some(d) = self.diagnostics.as_deref_mut() {
            d.on_epoch_end(epoch, params)?;
        }
        self.user.on_epoch_end(epoch, params)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for the best checkpoint and any failure dump.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub bpr: f64,
    pub contrastive: f64,
    pub disentangle: f64,
    pub l2: f64,
    pub total: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of per-step losses; absent for the untrained epoch 0.
    pub train_loss: Option<LossSummary>,
    pub validation: MetricReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_ndcg: f64,
    pub test: MetricReport,
    /// Test hits at the selection K, for pairwise comparison of runs.
    pub test_hits: HitSet,
    pub checkpoint: Option<PathBuf>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub total_seconds: f64,
}

impl RunRecord {
    pub fn epochs_trained(&self) -> usize {
        self.epochs.iter().filter(|e| e.epoch > 0).count()
    }
}

pub fn run_experiment(cfg: &RunConfig) -> Result<RunRecord> {
    let splits = prepare_splits(cfg)?;
    run_on_splits(cfg, &splits, &RunOptions::default(), &mut NoObserver)
}

fn validate_eval(params: &ParamStore, splits: &Splits, cfg: &RunConfig) -> Result<Evaluation> {
    evaluate(
        params,
        &splits.validation,
        &[&splits.train],
        &cfg.eval_ks,
        cfg.sampler.as_str(),
    )
}

/// Test evaluation excludes everything the user saw in train or validation.
pub fn test_eval(params: &ParamStore, splits: &Splits, cfg: &RunConfig) -> Result<Evaluation> {
    let mut e = evaluate(
        params,
        &splits.test,
        &[&splits.train, &splits.validation],
        &cfg.eval_ks,
        cfg.sampler.as_str(),
    )?;
    e.report.seed = Some(cfg.seed);
    e.report.config = Some(serde_json::to_value(cfg)?);
    Ok(e)
}

fn dump_failure(
    opts: &RunOptions,
    epoch: usize,
    step: usize,
    loss: Option<&LossBreakdown>,
    params: &ParamStore,
) -> String {
    let dump = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "loss": loss,
        "non_finite_parameter": params.first_non_finite(),
    });
    let mut msg = format!("at epoch {epoch} step {step}: {dump}");
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("failure_dump.json");
        if std::fs::write(
            &path,
            serde_json::to_string_pretty(&dump).unwrap_or_default(),
        )
        .is_ok()
        {
            msg.push_str(&format!(" (dumped to {})", path.display()));
        }
    }
    msg
}

/// Trains on prepared splits. Sampling for one batch runs in parallel, each
/// element on its own `(epoch, step, element)` streams; everything else is
/// sequential, so results do not depend on the thread count.
pub fn run_on_splits(
    cfg: &RunConfig,
    splits: &Splits,
    opts: &RunOptions,
    observer: &mut dyn TrainObserver,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let train = &splits.train;
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut collector = if cfg.diagnostics.enabled {
        Some(DiagnosticsCollector::new(cfg, train)?)
    } else {
        None
    };
    let mut obs = Both {
        diagnostics: collector.as_mut(),
        user: observer,
    };

    let sampler = cfg.sampler_config();
    let k_sel = cfg.selection_k();
    let mask = UpdateMask {
        embeddings: true,
        gates: !cfg.freeze_gates,
    };
    let mut params = init_params(train.n_users(), train.n_items(), cfg.dim, cfg.seed)?;
    let mut opt = OptimizerState::new(&params, cfg.lr);
    let mut grads = params.zeros_like();
    let mut pairs: Vec<(usize, usize)> = train.pairs().collect();

    let t0 = Instant::now();
    let v0 = validate_eval(&params, splits, cfg)?;
    obs.on_epoch_end(0, &params)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        validation: v0.report.clone(),
        seconds: t0.elapsed().as_secs_f64(),
    }];
    let mut best = (
        v0.report.ndcg(k_sel),
        0usize,
        params.clone(),
        opt.clone(),
        0u64,
    );
    let mut since_best = 0usize;
    let mut global_step = 0u64;
    let want_details = obs.wants_details();

    for epoch in 1..=cfg.max_epochs {
        let t = Instant::now();
        pairs.shuffle(&mut stream(cfg.seed, "shuffle", &[epoch as u64]));
        let mut sum = LossSummary {
            bpr: 0.0,
            contrastive: 0.0,
            disentangle: 0.0,
            l2: 0.0,
            total: 0.0,
            steps: 0,
        };
        for (step, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let path = |k: usize| [epoch as u64, step as u64, k as u64];
            let sampled: Vec<(SamplerOutput, Vec<CandidateDetail>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &(u, p))| {
                    let mut rngs = ElementRngs {
                        candidates: stream(cfg.seed, "candidates", &path(k)),
                        noise: stream(cfg.seed, "noise", &path(k)),
                    };
                    sample_negative_detailed(
                        &sampler,
                        u,
                        p,
                        train,
                        &params,
                        &mut rngs,
                        want_details,
                    )
                })
                .collect::<Result<_>>()?;
            let mut outputs = Vec::with_capacity(sampled.len());
            for (out, details) in sampled {
                obs.on_sample(epoch, &out, &details);
                outputs.push(out);
            }
            let batch = TrainBatch::new(chunk.to_vec());
            let loss = backward_into(&batch, &params, &outputs, cfg.gamma, cfg.lambda, &mut grads)
                .and_then(|l| l.check_finite().map(|_| l))
                .map_err(|e| {
                    Error::NonFinite(format!(
                        "{e}; {}",
                        dump_failure(opts, epoch, step, None, &params)
                    ))
                })?;
            adam_step_masked(&mut params, &grads, &mut opt, mask).map_err(|e| {
                Error::NonFinite(format!(
                    "{e}; {}",
                    dump_failure(opts, epoch, step, Some(&loss), &params)
                ))
            })?;
            global_step += 1;
            sum.bpr += loss.bpr;
            sum.contrastive += loss.contrastive;
            sum.disentangle += loss.disentangle;
            sum.l2 += loss.l2;
            sum.total += loss.total;
            sum.steps += 1;
        }
        let n = sum.steps.max(1) as f64;
        let train_loss = LossSummary {
            bpr: sum.bpr / n,
            contrastive: sum.contrastive / n,
            disentangle: sum.disentangle / n,
            l2: sum.l2 / n,
            total: sum.total / n,
            steps: sum.steps,
        };
        let v = validate_eval(&params, splits, cfg)?;
        obs.on_epoch_end(epoch, &params)?;
        let ndcg = v.report.ndcg(k_sel);
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            validation: v.report,
            seconds: t.elapsed().as_secs_f64(),
        });
        if ndcg > best.0 {
            best = (ndcg, epoch, params.clone(), opt.clone(), global_step);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }

    let (best_ndcg, best_epoch, best_params, best_opt, best_step) = best;
    let test = test_eval(&best_params, splits, cfg)?;
    let checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("best.ckpt");
            Checkpoint {
                params: best_params,
                optimizer: best_opt,
                rng: RngState {
                    seed: cfg.seed,
                    epoch: best_epoch as u64,
                    step: best_step,
                },
            }
            .save(&path)?;
            Some(path)
        }
        None => None,
    };
    let test_hits = test
        .hits_at(k_sel)
        .cloned()
        .ok_or_else(|| Error::Config(format!("selection K {k_sel} not evaluated")))?;
    let diagnostics = collector.as_ref().map(|c| c.report()).transpose()?;
    Ok(RunRecord {
        config: cfg.clone(),
        seed: cfg.seed,
        epochs,
        best_epoch,
        best_validation_ndcg: best_ndcg,
        test: test.report,
        test_hits,
        checkpoint,
        diagnostics,
        total_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Loads a checkpoint and evaluates its parameters on the config's test split.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Evaluation> {
    let splits = prepare_splits(cfg)?;
    let ck = Checkpoint::load(path)?;
    if ck.params.n_users() != splits.train.n_users()
        || ck.params.n_items() != splits.train.n_items()
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "{} users x {} items",
                splits.train.n_users(),
                splits.train.n_items()
            ),
            actual: format!(
                "{} users x {} items",
                ck.params.n_users(),
                ck.params.n_items()
            ),
        });
    }
    test_eval(&ck.params, &splits, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::SamplerKind;
    use crate::synthetic::SyntheticConfig;

    fn small(kind: SamplerKind) -> RunConfig {
        RunConfig {
            seed: 5,
            sampler: kind,
            dataset: DatasetConfig::Synthetic {
                generator: SyntheticConfig {
                    n_users: 40,
                    n_items: 80,
                    per_user: 10,
                    ..Default::default()
                },
                ratios: [0.8, 0.1, 0.1],
            },
            dim: 8,
            batch_size: 64,
            lr: 0.01,
            candidates: 4,
            max_epochs: 4,
            patience: 10,
            ..Default::default()
        }
    }

    #[test]
    fn patience_zero_trains_one_epoch() {
        let cfg = RunConfig {
            patience: 0,
            ..small(SamplerKind::Rns)
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.epochs_trained(), 1);
        assert_eq!(r.epochs.len(), 2);
    }

    #[test]
    fn epochs_are_monotone_and_best_is_best() {
        for kind in [
            SamplerKind::Rns,
            SamplerKind::Dns,
            SamplerKind::Ans,
            SamplerKind::Hns,
        ] {
            let r = run_experiment(&small(kind)).unwrap();
            assert!(r.epochs.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
            let top = r
                .epochs
                .iter()
                .map(|e| e.validation.ndcg(20))
                .fold(f64::MIN, f64::max);
            assert_eq!(r.best_validation_ndcg, top);
            assert_eq!(r.seed, 5);
            assert!(r.test.metrics.iter().all(|m| (0.0..=1.0).contains(&m.ndcg)));
        }
    }

    #[test]
    fn checkpoint_written_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(SamplerKind::Dns);
        let splits = prepare_splits(&cfg).unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
        };
        let r = run_on_splits(&cfg, &splits, &opts, &mut NoObserver).unwrap();
        let path = r.checkpoint.clone().unwrap();
        let e = evaluate_checkpoint(&cfg, &path).unwrap();
        assert_eq!(e.report, r.test);
        assert_eq!(
            Checkpoint::load(&path).unwrap().rng.epoch,
            r.best_epoch as u64
        );
    }

    #[test]
    fn diagnostics_do_not_disturb_training() {
        let mut cfg = small(SamplerKind::Ans);
        let plain = run_experiment(&cfg).unwrap();
        cfg.diagnostics.enabled = true;
        cfg.diagnostics.checkpoints = vec![0, 2];
        cfg.diagnostics.histogram_pairs = 500;
        let with = run_experiment(&cfg).unwrap();
        assert_eq!(plain.test.metrics, with.test.metrics);
        let d = with.diagnostics.clone().unwrap();
        assert_eq!(
            d.histograms.iter().map(|h| h.epoch).collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert_eq!(d.histograms[0].marker, d.histograms[1].marker);
        assert!(d.gains.count > 0);
        assert!(d.overlap_whole_run.unwrap().ratio <= 1.0);
        assert_eq!(d.minmax.len(), with.epochs_trained());
    }
}
