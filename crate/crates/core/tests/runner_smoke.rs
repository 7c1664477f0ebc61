use ansrec::config::RunConfig;
use ansrec::runner::run_experiment;
use ansrec::sampler::SamplerKind;

#[test]
fn rns_training_improves_validation_ndcg() {
    let cfg = RunConfig {
        seed: 5,
        sampler: SamplerKind::Rns,
        lr: 0.003,
        batch_size: 128,
        max_epochs: 20,
        ..Default::default()
    };
    let r = run_experiment(&cfg).unwrap();
    let k = cfg.selection_k();
    let start = r.epochs[0].validation.ndcg(k);
    assert_eq!(r.epochs[0].epoch, 0);
    assert!(
        r.best_validation_ndcg > start,
        "{} vs epoch-0 {start}",
        r.best_validation_ndcg
    );
    let best_seen = r
        .epochs
        .iter()
        .map(|e| e.validation.ndcg(k))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_validation_ndcg, best_seen);
}
