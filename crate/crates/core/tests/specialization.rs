//! Adaptation and generalization of a trained meta-learner, plus
//! checkpoint round trips.

use std::collections::BTreeSet;

use transprompt::checkpoint;
use transprompt::data::{build_synthetic_suite, FewShotSplit, Suite, SuiteConfig, TaskId};
use transprompt::error::Error;
use transprompt::mma::{split_sets, train_meta, MetaLearnerState, TrainConfig};
use transprompt::model::{targets, ModelConfig, Route};
use transprompt::templates::PromptOwner;
use transprompt::tms::{adapt, generalize, predict, prepare_generalization, AdaptConfig, Specialization};

struct Fixture {
    suite: Suite,
    meta: MetaLearnerState,
    held_out: TaskId,
}

/// Meta-train on the first two similar tasks; the third stays unseen.
fn fixture() -> Fixture {
    let suite = build_synthetic_suite(&SuiteConfig::similar(), 3).unwrap();
    let seen: Vec<TaskId> = suite.tasks[..2].iter().map(|t| t.task_id.clone()).collect();
    let sub = suite.restrict(&seen);
    let (train, dev) = split_sets(&sub.few_shot(4, 1).unwrap());
    let cfg = TrainConfig {
        epochs: 2,
        seed: 1,
        model: ModelConfig {
            dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let (meta, _) = train_meta(&sub.tasks, &sub.groups, &sub.vocab, &train, &dev, &cfg).unwrap();
    let held_out = suite.tasks[2].task_id.clone();
    Fixture { suite, meta, held_out }
}

fn split(f: &Fixture, task: &TaskId) -> FewShotSplit {
    f.suite.few_shot(4, 1).unwrap().remove(task).unwrap()
}

fn quick(epochs: usize) -> AdaptConfig {
    AdaptConfig {
        epochs,
        ..AdaptConfig::default()
    }
}

#[test]
fn zero_epoch_adaptation_is_the_meta_learner() {
    let f = fixture();
    let task = f.meta.tasks[0].task_id.clone();
    let s = split(&f, &task);
    let model = adapt(&f.meta, &task, &s, &quick(0)).unwrap();
    assert_eq!(model.kind, Specialization::Adapt);
    assert_eq!(model.model.store.checksum(), f.meta.model.store.checksum());
    assert_eq!(model.source_checksum, f.meta.model.store.checksum());
    assert_eq!(model.predict_distributions(&s.train).unwrap(), f.meta.predict(&task, &s.train).unwrap());
}

#[test]
fn first_step_loss_matches_an_independent_sum() {
    let f = fixture();
    let task = f.meta.tasks[1].task_id.clone();
    let s = split(&f, &task);
    // One batch covering the whole training set, so the first epoch's mean
    // loss is the loss at step 0.
    let cfg = AdaptConfig {
        epochs: 1,
        batch_size: s.train.len(),
        lambda1: 0.02,
        patience: None,
        ..AdaptConfig::default()
    };
    let model = adapt(&f.meta, &task, &s, &cfg).unwrap();
    let probs = f.meta.predict(&task, &s.train).unwrap();
    let gold = targets(f.meta.task(&task).unwrap(), &s.train).unwrap();
    let ce: f64 = probs.iter().zip(&gold).map(|(p, &t)| -p[t].ln()).sum();
    // Trainable set: the task route minus the frozen universal encoder.
    let route = f.meta.route(&task).unwrap();
    let universal = PromptOwner::Universal.key();
    let mut frozen: BTreeSet<_> = f.meta.model.encoders[&universal].param_ids().into_iter().collect();
    frozen.insert(f.meta.model.tables[&universal].table);
    let reg: f64 = f
        .meta
        .model
        .route_params(&route)
        .unwrap()
        .into_iter()
        .filter(|id| !frozen.contains(id))
        .flat_map(|id| f.meta.model.store.get(id).as_slice().to_vec())
        .map(|v| v * v)
        .sum();
    let oracle = ce + 0.02 * reg;
    assert!((model.log.train_loss[0] - oracle).abs() < 1e-9 * oracle.max(1.0));
}

#[test]
fn adaptation_never_lowers_dev_accuracy() {
    let f = fixture();
    for spec in &f.meta.tasks {
        let s = split(&f, &spec.task_id);
        let before = f.meta.evaluate(&spec.task_id, &s.dev).unwrap();
        let model = adapt(&f.meta, &spec.task_id, &s, &quick(4)).unwrap();
        assert!(model.evaluate(&s.dev).unwrap() >= before);
    }
}

#[test]
fn adaptation_freezes_universal_encoder_and_other_tasks() {
    let f = fixture();
    let task = f.meta.tasks[0].task_id.clone();
    let model = adapt(&f.meta, &task, &split(&f, &task), &quick(3)).unwrap();
    let untouched = |key: &str| {
        let mut ids = f.meta.model.encoders[key].param_ids();
        ids.push(f.meta.model.tables[key].table);
        ids.iter().all(|&id| model.model.store.get(id) == f.meta.model.store.get(id))
    };
    assert!(untouched(&PromptOwner::Universal.key()));
    assert!(untouched(&PromptOwner::Task(f.meta.tasks[1].task_id.clone()).key()));
}

#[test]
fn unknown_task_cannot_be_adapted() {
    let f = fixture();
    let s = split(&f, &f.held_out);
    assert!(matches!(adapt(&f.meta, &f.held_out, &s, &quick(1)), Err(Error::UnknownTask(_))));
}

#[test]
fn generalized_encoder_starts_as_the_universal_one() {
    let f = fixture();
    let spec = f.suite.task(&f.held_out).unwrap();
    let description = f.suite.group(&spec.group_id).unwrap().description_tokens.clone();
    let (model, route) = prepare_generalization(&f.meta, spec, &description, &split(&f, &f.held_out), &quick(1)).unwrap();
    let owner = PromptOwner::Task(f.held_out.clone());
    assert_eq!(route, Route::Single(owner.clone()));
    let new_ids = model.encoders[&owner.key()].param_ids();
    let src_ids = f.meta.model.encoders[&PromptOwner::Universal.key()].param_ids();
    assert_eq!(new_ids.len(), src_ids.len());
    for (a, b) in new_ids.iter().zip(&src_ids) {
        let (x, y) = (model.store.get(*a), f.meta.model.store.get(*b));
        assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let table = model.tables[&owner.key()].table;
    assert_eq!(model.store.get(table), f.meta.model.store.get(f.meta.model.tables[&PromptOwner::Universal.key()].table));
    // The template carries the type description.
    let template = model.template(&route).unwrap();
    assert_eq!(template.description.len(), description.len());
}

#[test]
fn generalization_trains_and_predicts() {
    let f = fixture();
    let spec = f.suite.task(&f.held_out).unwrap();
    let description = f.suite.group(&spec.group_id).unwrap().description_tokens.clone();
    let s = split(&f, &f.held_out);
    let model = generalize(&f.meta, spec, &description, &s, &quick(3)).unwrap();
    assert_eq!(model.kind, Specialization::Generalize);
    let preds = predict(&model, &s.dev).unwrap();
    assert_eq!(preds.len(), s.dev.len());
    for p in &preds {
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(spec.label_set[p.class], p.label);
    }
}

#[test]
fn generalization_rejects_empty_or_seen_data() {
    let f = fixture();
    let spec = f.suite.task(&f.held_out).unwrap();
    let description = f.suite.group(&spec.group_id).unwrap().description_tokens.clone();
    let mut empty = split(&f, &f.held_out);
    empty.train.clear();
    assert!(matches!(
        generalize(&f.meta, spec, &description, &empty, &quick(1)),
        Err(Error::NoTrainingData)
    ));

    let mut leaked = split(&f, &f.held_out);
    let seen_uid = f.meta.scores.scores.keys().next().unwrap().clone();
    leaked.train[0].uid = seen_uid.clone();
    match generalize(&f.meta, spec, &description, &leaked, &quick(1)) {
        Err(Error::NotUnseen { uid, .. }) => assert_eq!(uid, seen_uid),
        other => panic!("expected an unseen-data error, got {:?}", other.err()),
    }

    let seen_spec = f.meta.tasks[0].clone();
    let s = split(&f, &seen_spec.task_id);
    assert!(generalize(&f.meta, &seen_spec, &description, &s, &quick(1)).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let meta_path = dir.path().join("meta.json");
    checkpoint::save_meta(&meta_path, &f.meta).unwrap();
    assert_eq!(checkpoint::kind_of(&meta_path).unwrap(), "meta");
    let loaded = checkpoint::load_meta(&meta_path).unwrap();
    assert_eq!(loaded.model.store.checksum(), f.meta.model.store.checksum());
    assert_eq!(loaded.scores, f.meta.scores);
    let task = f.meta.tasks[0].task_id.clone();
    let s = split(&f, &task);
    assert_eq!(loaded.predict(&task, &s.dev).unwrap(), f.meta.predict(&task, &s.dev).unwrap());

    let model = adapt(&f.meta, &task, &s, &quick(1)).unwrap();
    let path = dir.path().join("adapted.json");
    checkpoint::save_specialized(&path, &model).unwrap();
    assert_eq!(checkpoint::kind_of(&path).unwrap(), "specialized");
    let back = checkpoint::load_specialized(&path).unwrap();
    assert_eq!(back.predict_distributions(&s.dev).unwrap(), model.predict_distributions(&s.dev).unwrap());
    assert!(checkpoint::load_meta(&path).is_err());
}
