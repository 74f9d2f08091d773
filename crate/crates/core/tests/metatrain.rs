use ttgen::backbone::BackboneSpec;
use ttgen::harness::DeskSetup;
use ttgen::metatrain::{train, Model, TrainConfig, TrainMetrics};
use ttgen::synthdata::make_rotated_domains;

fn seed0_sources(n: usize) -> Vec<ttgen::synthdata::DomainDataset> {
    make_rotated_domains(0, &[0.0, 30.0, 60.0], n, 5, 16).unwrap()
}

/// Everything except wallclock.
fn losses(m: &[TrainMetrics]) -> Vec<(usize, u64, u64, Option<u64>)> {
    m.iter().map(|r| (r.iter, r.meta_source_ce.to_bits(), r.meta_target_ce.to_bits(), r.val_acc.map(f64::to_bits))).collect()
}

#[test]
fn meta_target_loss_falls_between_50_and_500_iterations() {
    let mut config = TrainConfig::desk(BackboneSpec::default());
    config.n_iter = 500;
    config.log_every = 50;
    config.eval_every = 0;
    let out = train(&config, &seed0_sources(300)).unwrap();
    let at = |i: usize| out.metrics.iter().find(|m| m.iter == i).unwrap().meta_target_ce;
    assert!(at(500) < at(50), "meta-target CE {} at 500 vs {} at 50", at(500), at(50));
    assert!(out.metrics.iter().all(|m| m.meta_source_ce.is_finite()));
}

#[test]
fn zero_iterations_return_the_initialization() {
    let mut config = DeskSetup::quick().train;
    config.n_iter = 0;
    let out = train(&config, &seed0_sources(20)).unwrap();
    let init = Model::init(&config).unwrap();
    assert_eq!(out.selected.checksum(), init.checksum());
    assert_eq!(out.last.checksum(), init.checksum());
}

#[test]
fn identical_config_and_seed_train_identically() {
    let mut config = DeskSetup::quick().train;
    config.n_iter = 20;
    let sources = seed0_sources(30);
    let a = train(&config, &sources).unwrap();
    let b = train(&config, &sources).unwrap();
    assert_eq!(a.last.checksum(), b.last.checksum());
    assert_eq!(losses(&a.metrics), losses(&b.metrics));
    let other = train(&config.clone().with_seed(1), &sources).unwrap();
    assert_ne!(a.last.checksum(), other.last.checksum());
}
