//! Task-aware specialization of a meta-learner: adaptation to a seen task
//! and generalization to an unseen one.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, FewShotSplit, TaskSpec, UniformSampler};
use crate::debias::{EntropySign, LossWeights};
use crate::encoders::{PromptEncoderParams, PseudoTable};
use crate::error::{Error, Result};
use crate::mma::MetaLearnerState;
use crate::model::{accuracy, argmax, targets, Instance, Mode, PromptModel, Route};
use crate::params::{Adam, ParamId, ParamStore};
use crate::templates::{build_template, PromptOwner, TemplateKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: Option<usize>,
    /// Also train the universal encoder during adaptation.
    pub unfreeze_universal: bool,
    /// Seed a generalized encoder from the matching type encoder instead of
    /// the universal one, when the meta-learner has one.
    pub init_from_type: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 6,
            learning_rate: 1e-3,
            lambda1: 0.01,
            patience: Some(10),
            unfreeze_universal: false,
            init_from_type: false,
            seed: 42,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Specialization {
    Adapt,
    Generalize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TmsLog {
    pub train_loss: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
    pub selected_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecializedModel {
    pub kind: Specialization,
    pub model: PromptModel,
    pub route: Route,
    pub task: TaskSpec,
    /// Parameter checksum of the meta-learner this model started from.
    pub source_checksum: u64,
    pub log: TmsLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub label: String,
    pub probabilities: Vec<f64>,
}

impl SpecializedModel {
    pub fn predict_distributions(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        self.model.predict(&self.route, examples, &self.task.verbalizer)
    }

    pub fn embed(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        self.model.embed(&self.route, examples)
    }

    pub fn evaluate(&self, examples: &[Example]) -> Result<f64> {
        accuracy(&self.predict_distributions(examples)?, &targets(&self.task, examples)?)
    }

    /// Accuracy averaged over single-word label mappings.
    pub fn evaluate_per_mapping(&self, examples: &[Example]) -> Result<f64> {
        per_mapping_accuracy(&self.model, &self.route, &self.task, examples)
    }
}

/// Mean accuracy over the verbalizer's single-word mappings.
pub fn per_mapping_accuracy(model: &PromptModel, route: &Route, task: &TaskSpec, examples: &[Example]) -> Result<f64> {
    let gold = targets(task, examples)?;
    let n = task.verbalizer.num_mappings();
    let mut total = 0.0;
    for j in 0..n {
        let preds = model.predict(route, examples, &task.verbalizer.mapping(j))?;
        total += accuracy(&preds, &gold)?;
    }
    Ok(total / n as f64)
}

/// Labels and distributions for `examples` of the model's task.
pub fn predict(model: &SpecializedModel, examples: &[Example]) -> Result<Vec<Prediction>> {
    model.task.verbalizer.validate(model.task.label_set.len(), model.model.vocab.len())?;
    for ex in examples {
        if ex.text_a.is_empty() {
            return Err(Error::InvalidExample {
                uid: ex.uid.clone(),
                reason: "empty text_a".into(),
            });
        }
    }
    Ok(model
        .predict_distributions(examples)?
        .into_iter()
        .map(|p| {
            let class = argmax(&p);
            Prediction {
                class,
                label: model.task.label_set[class].clone(),
                probabilities: p,
            }
        })
        .collect())
}

fn dev_metrics(model: &PromptModel, route: &Route, task: &TaskSpec, dev: &[Example]) -> Result<(f64, f64)> {
    let preds = model.predict(route, dev, &task.verbalizer)?;
    let gold = targets(task, dev)?;
    let ce = preds.iter().zip(&gold).map(|(p, &t)| -p[t].max(1e-300).ln()).sum::<f64>() / dev.len() as f64;
    Ok((accuracy(&preds, &gold)?, ce))
}

/// Plain-loss fine-tuning with dev-based selection. The pre-training state
/// competes as epoch 0.
fn specialize(
    model: &mut PromptModel,
    route: &Route,
    task: &TaskSpec,
    split: &FewShotSplit,
    trainable: &[ParamId],
    config: &AdaptConfig,
) -> Result<TmsLog> {
    if split.train.is_empty() {
        return Err(Error::NoTrainingData);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let gold = targets(task, &split.train)?;
    let weights = LossWeights {
        lambda1: config.lambda1,
        lambda2: 0.0,
        entropy_sign: EntropySign::Literal,
    };
    let mut optimizer = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TmsLog::default();
    let has_dev = !split.dev.is_empty();
    let mut best: Option<((f64, f64), ParamStore, usize)> = None;
    if has_dev {
        let m = dev_metrics(model, route, task, &split.dev)?;
        log.dev_accuracy.push(m.0);
        best = Some((m, model.store.clone(), 0));
    }
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut steps = 0;
        for items in UniformSampler::epoch(&[split.train.len()], config.batch_size, &mut rng)? {
            let batch: Vec<Instance<'_>> = items
                .iter()
                .map(|it| Instance {
                    route: route.clone(),
                    example: &split.train[it.index],
                    verbalizer: &task.verbalizer,
                    target: gold[it.index],
                    score: 1.0,
                    task_size: split.train.len(),
                })
                .collect();
            total += model.train_step(&mut optimizer, &batch, &weights, trainable, epoch)?.loss;
            steps += 1;
        }
        log.train_loss.push(total / steps as f64);
        log.selected_epoch = epoch;
        if has_dev {
            let m = dev_metrics(model, route, task, &split.dev)?;
            log.dev_accuracy.push(m.0);
            let (best_m, _, _) = best.as_ref().expect("dev baseline recorded");
            if m.0 > best_m.0 || (m.0 == best_m.0 && m.1 < best_m.1) {
                best = Some((m, model.store.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, store, epoch)) = best {
        model.store = store;
        log.selected_epoch = epoch;
    }
    Ok(log)
}

/// Fine-tune the meta-learner on a seen task with the plain loss. The
/// universal encoder stays frozen unless configured otherwise.
pub fn adapt(meta: &MetaLearnerState, task: &crate::data::TaskId, split: &FewShotSplit, config: &AdaptConfig) -> Result<SpecializedModel> {
    let spec = meta.task(task)?.clone();
    let route = meta.route(task)?;
    let mut model = meta.model.clone();
    let mut frozen = BTreeSet::new();
    if !config.unfreeze_universal {
        let key = PromptOwner::Universal.key();
        frozen.extend(model.encoders[&key].param_ids());
        frozen.insert(model.tables[&key].table);
    }
    let trainable: Vec<ParamId> = model
        .route_params(&route)?
        .into_iter()
        .filter(|id| !frozen.contains(id))
        .collect();
    let log = specialize(&mut model, &route, &spec, split, &trainable, config)?;
    Ok(SpecializedModel {
        kind: Specialization::Adapt,
        model,
        route,
        task: spec,
        source_checksum: meta.model.store.checksum(),
        log,
    })
}

fn copy_params(store: &mut ParamStore, from: &[ParamId], to: &[ParamId]) {
    for (&f, &t) in from.iter().zip(to) {
        let value = store.get(f).clone();
        store.set(t, value);
    }
}

/// Prepare (without training) the model for an unseen task: a type-style
/// template with `description`, and a new encoder and pseudo table copied
/// from the universal ones.
pub fn prepare_generalization(
    meta: &MetaLearnerState,
    new_task: &TaskSpec,
    description: &[String],
    split: &FewShotSplit,
    config: &AdaptConfig,
) -> Result<(PromptModel, Route)> {
    if meta.tasks.iter().any(|t| t.task_id == new_task.task_id) {
        return Err(Error::NotUnseen {
            task: new_task.task_id.to_string(),
            uid: "(task id in training roster)".into(),
        });
    }
    if let Some(ex) = split.train.iter().chain(&split.dev).find(|e| meta.scores.get(&e.uid).is_some()) {
        return Err(Error::NotUnseen {
            task: new_task.task_id.to_string(),
            uid: ex.uid.clone(),
        });
    }
    if split.train.is_empty() {
        return Err(Error::NoTrainingData);
    }
    if description.is_empty() {
        return Err(Error::InvalidTemplate("generalization needs type description tokens".into()));
    }
    new_task.validate(meta.model.vocab.len())?;
    for ex in split.train.iter().chain(&split.dev) {
        ex.validate(new_task)?;
    }
    let mut model = meta.model.clone();
    let source = match (config.init_from_type, meta.mode) {
        (true, Mode::Distant) if model.encoders.contains_key(&PromptOwner::Type(new_task.group_id.clone()).key()) => {
            PromptOwner::Type(new_task.group_id.clone())
        }
        _ => PromptOwner::Universal,
    };
    let source_encoder = model.encoders[&source.key()].clone();
    let source_table = model.tables[&source.key()].clone();
    if new_task.template.pseudo_count != source_table.count {
        return Err(Error::InvalidTemplate(format!(
            "new task uses {} pseudo tokens, meta-learner {}",
            new_task.template.pseudo_count, source_table.count
        )));
    }
    let owner = PromptOwner::Task(new_task.task_id.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = model.dim();
    let encoder = PromptEncoderParams::new(&mut model.store, owner.clone(), dim, &mut rng)?;
    copy_params(&mut model.store, &source_encoder.param_ids(), &encoder.param_ids());
    let table = PseudoTable::new(&mut model.store, owner.clone(), source_table.count, dim, &mut rng);
    copy_params(&mut model.store, &[source_table.table], &[table.table]);
    let template = build_template(
        TemplateKind::Type,
        new_task.template,
        owner.clone(),
        Some(model.vocab.encode(description)),
    )?;
    model.encoders.insert(owner.key(), encoder);
    model.tables.insert(owner.key(), table);
    model.templates.insert(owner.key(), template);
    Ok((model, Route::Single(owner)))
}

/// Specialize the meta-learner to a task it never saw, initializing the new
/// task's encoder from the universal encoder.
pub fn generalize(
    meta: &MetaLearnerState,
    new_task: &TaskSpec,
    description: &[String],
    split: &FewShotSplit,
    config: &AdaptConfig,
) -> Result<SpecializedModel> {
    let (mut model, route) = prepare_generalization(meta, new_task, description, split, config)?;
    let trainable = model.route_params(&route)?;
    let log = specialize(&mut model, &route, new_task, split, &trainable, config)?;
    Ok(SpecializedModel {
        kind: Specialization::Generalize,
        model,
        route,
        task: new_task.clone(),
        source_checksum: meta.model.store.checksum(),
        log,
    })
}
