//! Conformance of the meta-training loop: score initialization, fixed
//! scores within an epoch, rescoring between epochs, and determinism.

use transprompt::data::{build_synthetic_suite, Suite, SuiteConfig};
use transprompt::mma::{
    epoch_batches, recompute_scores, run_epoch, split_sets, train_meta, MetaLearnerState, SamplerKind, TaskSets,
    TrainConfig,
};
use transprompt::model::{Mode, ModelConfig, PromptModel};

fn fixture(mode: Mode) -> (Suite, TaskSets, TaskSets) {
    let config = match mode {
        Mode::Similar => SuiteConfig::similar(),
        Mode::Distant => SuiteConfig::distant(),
    };
    let suite = build_synthetic_suite(&config, 3).unwrap();
    let (train, dev) = split_sets(&suite.few_shot(4, 11).unwrap());
    (suite, train, dev)
}

fn config(mode: Mode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        seed: 5,
        model: ModelConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn train(mode: Mode, cfg: &TrainConfig) -> (MetaLearnerState, transprompt::mma::TrainingLog) {
    let (suite, train, dev) = fixture(mode);
    train_meta(&suite.tasks, &suite.groups, &suite.vocab, &train, &dev, cfg).unwrap()
}

#[test]
fn zero_epochs_leave_initial_state() {
    let cfg = config(Mode::Similar, 0);
    let (suite, train_sets, _) = fixture(Mode::Similar);
    let (state, log) = train(Mode::Similar, &cfg);
    assert!(log.records.is_empty());
    assert_eq!(state.epoch, 0);
    assert_eq!(state.scores.epoch, 0);
    let total: usize = train_sets.values().map(Vec::len).sum();
    assert_eq!(state.scores.len(), total);
    assert!(state.scores.scores.values().all(|&s| s == 1.0));
    let fresh = PromptModel::new(Mode::Similar, &suite.tasks, &suite.groups, &suite.vocab, &cfg.model, cfg.seed).unwrap();
    assert_eq!(state.model.store.checksum(), fresh.store.checksum());
}

#[test]
fn scores_are_fixed_during_an_epoch_and_refreshed_after() {
    let cfg = config(Mode::Similar, 0);
    let (suite, train_sets, _) = fixture(Mode::Similar);
    let mut state = MetaLearnerState::new(&suite.tasks, &suite.groups, &suite.vocab, &train_sets, &cfg).unwrap();
    let before = state.scores.checksum();
    let params_before = state.model.store.checksum();
    let batches = epoch_batches(&state, &train_sets, 1).unwrap();
    run_epoch(&mut state, &train_sets, &batches).unwrap();
    assert_eq!(state.scores.checksum(), before);
    assert_ne!(state.model.store.checksum(), params_before);

    let params_after = state.model.store.checksum();
    recompute_scores(&mut state, &train_sets).unwrap();
    assert_eq!(state.model.store.checksum(), params_after, "rescoring must not touch parameters");
    assert_eq!(state.scores.epoch, 1);
    assert!(state.scores.scores.values().all(|&s| s > 0.0 && s < 1.0));
    assert_ne!(state.scores.checksum(), before);
}

#[test]
fn logged_checksums_follow_each_recompute() {
    let (state, log) = train(Mode::Similar, &config(Mode::Similar, 2));
    assert_eq!(log.records.len(), 2);
    assert_eq!(state.scores.epoch, 2);
    assert_eq!(log.records[1].score_checksum, state.scores.checksum());
    assert_ne!(log.records[0].score_checksum, log.records[1].score_checksum);
    assert!(state.scores.scores.values().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn prototype_off_keeps_unit_scores() {
    let cfg = TrainConfig {
        prototype: false,
        ..config(Mode::Similar, 2)
    };
    let (state, _) = train(Mode::Similar, &cfg);
    assert!(state.scores.scores.values().all(|&s| s == 1.0));
    assert_eq!(state.scores.epoch, 0);
}

#[test]
fn identical_seeds_give_identical_parameters() {
    for mode in [Mode::Similar, Mode::Distant] {
        let cfg = config(mode, 2);
        let (a, _) = train(mode, &cfg);
        let (b, _) = train(mode, &cfg);
        assert_eq!(a.model.store.checksum(), b.model.store.checksum());
        assert_eq!(a.scores.checksum(), b.scores.checksum());
        let (c, _) = train(mode, &TrainConfig { seed: 6, ..cfg });
        assert_ne!(a.model.store.checksum(), c.model.store.checksum());
    }
}

#[test]
fn distant_mode_rescoring_stays_in_open_interval() {
    let (state, _) = train(Mode::Distant, &config(Mode::Distant, 1));
    assert_eq!(state.scores.epoch, 1);
    assert!(state.scores.scores.values().all(|&s| s > 0.0 && s < 1.0));
}

#[test]
fn stratified_sampler_trains_deterministically() {
    let cfg = TrainConfig {
        sampler: SamplerKind::Stratified,
        ..config(Mode::Similar, 1)
    };
    let (a, log) = train(Mode::Similar, &cfg);
    let (b, _) = train(Mode::Similar, &cfg);
    assert_eq!(a.model.store.checksum(), b.model.store.checksum());
    assert!(log.records[0].loss.is_finite());
}

#[test]
fn patience_keeps_the_best_dev_epoch() {
    let cfg = TrainConfig {
        patience: Some(1),
        ..config(Mode::Similar, 6)
    };
    let (_, log) = train(Mode::Similar, &cfg);
    let best = log
        .records
        .iter()
        .map(|r| r.dev_accuracy.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let selected = log.records.iter().find(|r| r.epoch == log.selected_epoch).unwrap();
    assert_eq!(selected.dev_accuracy.unwrap(), best);
}

#[test]
fn empty_task_is_rejected() {
    let (suite, mut train_sets, dev) = fixture(Mode::Similar);
    train_sets.get_mut(&suite.tasks[0].task_id).unwrap().clear();
    let err = train_meta(&suite.tasks, &suite.groups, &suite.vocab, &train_sets, &dev, &config(Mode::Similar, 1));
    assert!(err.is_err());
}
