//! Multi-task meta-learner training: alternate epochs of de-biased
//! optimization with recomputation of the per-instance prototype scores.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchItem, Example, FewShotSplit, GroupId, StratifiedSampler, TaskGroup, TaskId, TaskSpec, UniformSampler, Vocabulary};
use crate::debias::{compute_centroids, CrossTaskPolicy, EntropySign, LossWeights, ScoreTable};
use crate::error::{Error, Result};
use crate::model::{accuracy, targets, Instance, Mode, ModelConfig, PromptModel, Route};
use crate::params::{Adam, ParamId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Shuffled passes over the union of the training sets.
    #[default]
    Uniform,
    /// Task drawn by smoothed log-size probability, then a row uniformly.
    Stratified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub zeta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub entropy_sign: EntropySign,
    pub prototype: bool,
    pub entropy: bool,
    pub sampler: SamplerKind,
    /// Temperature of the exp-cosine similarity.
    pub temperature: f64,
    pub seed: u64,
    /// Stop after this many epochs without a dev improvement and keep the
    /// best parameters. `None` runs every epoch.
    pub patience: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Similar,
            epochs: 20,
            batch_size: 6,
            learning_rate: 1e-3,
            zeta: 0.5,
            lambda1: 0.01,
            lambda2: 0.01,
            gamma: 0.001,
            entropy_sign: EntropySign::Literal,
            prototype: true,
            entropy: true,
            sampler: SamplerKind::Uniform,
            temperature: 1.0,
            seed: 42,
            patience: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for full training sets: batch size 16 and stratified sampling.
    pub fn full_data() -> Self {
        Self {
            batch_size: 16,
            sampler: SamplerKind::Stratified,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::InvalidConfig(format!("zeta {} outside [0, 1]", self.zeta)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidConfig("regularization weights must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: if self.entropy { self.lambda2 } else { 0.0 },
            entropy_sign: self.entropy_sign,
        }
    }

    pub fn policy(&self) -> CrossTaskPolicy {
        match self.mode {
            Mode::Similar => CrossTaskPolicy::Strict,
            Mode::Distant => CrossTaskPolicy::SharedLabels,
        }
    }
}

/// Everything the meta-learner carries between epochs and into TMS.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaLearnerState {
    pub mode: Mode,
    pub model: PromptModel,
    pub tasks: Vec<TaskSpec>,
    pub groups: Vec<TaskGroup>,
    pub scores: ScoreTable,
    pub optimizer: Adam,
    pub epoch: usize,
    pub config: TrainConfig,
}

/// Training sets keyed by task, in roster order when iterated.
pub type TaskSets = BTreeMap<TaskId, Vec<Example>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: BTreeMap<TaskId, f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub dev_accuracy: Option<f64>,
    pub task_dev_accuracy: BTreeMap<TaskId, f64>,
    pub score_checksum: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: usize,
}

impl TrainingLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        out.flush()?;
        Ok(())
    }
}

impl MetaLearnerState {
    /// Untrained meta-learner with uniform scores over the training uids.
    pub fn new(
        tasks: &[TaskSpec],
        groups: &[TaskGroup],
        vocab: &Vocabulary,
        train: &TaskSets,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let model = PromptModel::new(config.mode, tasks, groups, vocab, &config.model, config.seed)?;
        let mut uids = Vec::new();
        for task in tasks {
            let rows = train.get(&task.task_id).ok_or_else(|| Error::EmptyDataset(task.task_id.to_string()))?;
            if rows.is_empty() {
                return Err(Error::EmptyDataset(task.task_id.to_string()));
            }
            for ex in rows {
                ex.validate(task)?;
                uids.push(ex.uid.as_str());
            }
        }
        let scores = ScoreTable::uniform(uids.iter().copied());
        if scores.len() != uids.len() {
            return Err(Error::InvalidConfig("training uids must be unique across tasks".into()));
        }
        Ok(Self {
            mode: config.mode,
            model,
            tasks: tasks.to_vec(),
            groups: groups.to_vec(),
            scores,
            optimizer: Adam::new(config.learning_rate),
            epoch: 0,
            config: config.clone(),
        })
    }

    pub fn task(&self, id: &TaskId) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| &t.task_id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn route(&self, task: &TaskId) -> Result<Route> {
        Ok(route_for(self.mode, self.task(task)?))
    }

    pub fn group_of(&self, task: &TaskId) -> Result<GroupId> {
        Ok(self.task(task)?.group_id.clone())
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.model.store.ids().collect()
    }

    /// Predicted class distributions for examples of a seen task.
    pub fn predict(&self, task: &TaskId, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let spec = self.task(task)?;
        self.model.predict(&self.route(task)?, examples, &spec.verbalizer)
    }

    pub fn evaluate(&self, task: &TaskId, examples: &[Example]) -> Result<f64> {
        let spec = self.task(task)?;
        accuracy(&self.predict(task, examples)?, &targets(spec, examples)?)
    }
}

fn route_for(mode: Mode, spec: &TaskSpec) -> Route {
    match mode {
        Mode::Similar => Route::Similar(spec.task_id.clone()),
        Mode::Distant => Route::Distant(spec.group_id.clone()),
    }
}

fn build_instances<'a>(
    tasks: &'a [TaskSpec],
    scores: &ScoreTable,
    mode: Mode,
    train: &'a TaskSets,
    items: &[BatchItem],
    order: &[TaskId],
) -> Result<Vec<Instance<'a>>> {
    items
        .iter()
        .map(|item| {
            let task_id = &order[item.task];
            let spec = tasks
                .iter()
                .find(|t| &t.task_id == task_id)
                .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
            let rows = &train[task_id];
            let example = &rows[item.index];
            let target = spec.label_index(&example.label).ok_or_else(|| Error::UnknownLabel {
                uid: example.uid.clone(),
                label: example.label.clone(),
                task: task_id.to_string(),
            })?;
            let score = scores
                .get(&example.uid)
                .ok_or_else(|| Error::InvalidConfig(format!("no score for {}", example.uid)))?;
            Ok(Instance {
                route: route_for(mode, spec),
                example,
                verbalizer: &spec.verbalizer,
                target,
                score,
                task_size: rows.len(),
            })
        })
        .collect()
}

/// Epoch statistics before dev evaluation.
pub struct EpochStats {
    pub loss: f64,
    pub task_loss: BTreeMap<TaskId, f64>,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub steps: usize,
}

fn task_order(state: &MetaLearnerState, train: &TaskSets) -> Result<Vec<TaskId>> {
    let order: Vec<TaskId> = state.tasks.iter().map(|t| t.task_id.clone()).collect();
    for id in &order {
        if train.get(id).map_or(true, Vec::is_empty) {
            return Err(Error::EmptyDataset(id.to_string()));
        }
    }
    Ok(order)
}

/// Batches of one epoch for the configured sampler.
pub fn epoch_batches(state: &MetaLearnerState, train: &TaskSets, epoch: usize) -> Result<Vec<Vec<BatchItem>>> {
    let order = task_order(state, train)?;
    let sizes: Vec<usize> = order.iter().map(|t| train[t].len()).collect();
    let config = &state.config;
    let epoch_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
    match config.sampler {
        SamplerKind::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
            Ok(UniformSampler::epoch(&sizes, config.batch_size, &mut rng)?.collect())
        }
        SamplerKind::Stratified => {
            let total: usize = sizes.iter().sum();
            let steps = total.div_ceil(config.batch_size);
            Ok(StratifiedSampler::new(&sizes, config.gamma, config.batch_size, epoch_seed)?
                .take(steps)
                .collect())
        }
    }
}

/// One optimizer step per batch under the current (fixed) score table.
pub fn run_epoch(state: &mut MetaLearnerState, train: &TaskSets, batches: &[Vec<BatchItem>]) -> Result<EpochStats> {
    let order = task_order(state, train)?;
    let weights = state.config.loss_weights();
    let trainable = state.all_params();
    let epoch = state.epoch + 1;
    let mut total = 0.0;
    let mut per_task: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
    let mut norms = Vec::with_capacity(batches.len());
    for items in batches {
        let instances = build_instances(&state.tasks, &state.scores, state.mode, train, items, &order)?;
        let outcome = state
            .model
            .train_step(&mut state.optimizer, &instances, &weights, &trainable, epoch)?;
        total += outcome.loss;
        norms.push(outcome.grad_norm);
        for (item, l) in items.iter().zip(&outcome.instance_losses) {
            let cell = per_task.entry(order[item.task].clone()).or_default();
            cell.0 += l;
            cell.1 += 1;
        }
    }
    let steps = batches.len();
    Ok(EpochStats {
        loss: if steps == 0 { 0.0 } else { total / steps as f64 },
        task_loss: per_task.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect(),
        grad_norm_mean: if steps == 0 { 0.0 } else { norms.iter().sum::<f64>() / steps as f64 },
        grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
        steps,
    })
}

/// Recompute centroids from the current model and rescore every training
/// instance. Parameters are only read.
pub fn recompute_scores(state: &mut MetaLearnerState, train: &TaskSets) -> Result<()> {
    let mut embedded = BTreeMap::new();
    let mut all = Vec::new();
    for task in &state.tasks {
        let rows = train.get(&task.task_id).ok_or_else(|| Error::EmptyDataset(task.task_id.to_string()))?;
        let emb = state.model.embed(&state.route(&task.task_id)?, rows)?;
        let labelled: Vec<(String, Vec<f64>)> = rows.iter().map(|e| e.label.clone()).zip(emb).collect();
        for (ex, (_, e)) in rows.iter().zip(&labelled) {
            all.push((task.task_id.clone(), ex.uid.clone(), ex.label.clone(), e.clone()));
        }
        embedded.insert(task.task_id.clone(), labelled);
    }
    let store = compute_centroids(&state.tasks, &embedded, state.config.zeta, state.config.temperature)?;
    let policy = state.config.policy();
    let mut scores = BTreeMap::new();
    for (task, uid, label, e) in all {
        scores.insert(uid, store.score(&task, &label, &e, policy)?);
    }
    state.scores = ScoreTable {
        scores,
        epoch: state.scores.epoch + 1,
    };
    Ok(())
}

/// Mean dev accuracy over tasks with dev data, and the per-task values.
pub fn dev_accuracy(state: &MetaLearnerState, dev: &TaskSets) -> Result<Option<(f64, BTreeMap<TaskId, f64>)>> {
    let mut per_task = BTreeMap::new();
    for task in &state.tasks {
        if let Some(rows) = dev.get(&task.task_id).filter(|r| !r.is_empty()) {
            per_task.insert(task.task_id.clone(), state.evaluate(&task.task_id, rows)?);
        }
    }
    if per_task.is_empty() {
        return Ok(None);
    }
    let mean = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(Some((mean, per_task)))
}

/// Split few-shot data into train and dev maps.
pub fn split_sets(splits: &BTreeMap<TaskId, FewShotSplit>) -> (TaskSets, TaskSets) {
    let train = splits.iter().map(|(t, s)| (t.clone(), s.train.clone())).collect();
    let dev = splits.iter().map(|(t, s)| (t.clone(), s.dev.clone())).collect();
    (train, dev)
}

/// Train the meta-learner: scores start at 1; each epoch optimizes the
/// de-biased loss under fixed scores, then recomputes them.
pub fn train_meta(
    tasks: &[TaskSpec],
    groups: &[TaskGroup],
    vocab: &Vocabulary,
    train: &TaskSets,
    dev: &TaskSets,
    config: &TrainConfig,
) -> Result<(MetaLearnerState, TrainingLog)> {
    let mut state = MetaLearnerState::new(tasks, groups, vocab, train, config)?;
    let log = continue_training(&mut state, train, dev, config.epochs)?;
    Ok((state, log))
}

/// Run `epochs` more epochs on an existing state.
pub fn continue_training(state: &mut MetaLearnerState, train: &TaskSets, dev: &TaskSets, epochs: usize) -> Result<TrainingLog> {
    let mut log = TrainingLog {
        records: Vec::new(),
        selected_epoch: state.epoch,
    };
    let mut best: Option<(f64, crate::params::ParamStore, usize)> = None;
    let mut since_best = 0;
    for _ in 0..epochs {
        let batches = epoch_batches(state, train, state.epoch + 1)?;
        let stats = run_epoch(state, train, &batches)?;
        if state.config.prototype {
            recompute_scores(state, train)?;
        }
        state.epoch += 1;
        let dev_result = dev_accuracy(state, dev)?;
        log::info!(
            "epoch {} loss {:.4} dev {:?}",
            state.epoch,
            stats.loss,
            dev_result.as_ref().map(|d| d.0)
        );
        log.records.push(EpochRecord {
            epoch: state.epoch,
            loss: stats.loss,
            task_loss: stats.task_loss,
            grad_norm_mean: stats.grad_norm_mean,
            grad_norm_max: stats.grad_norm_max,
            dev_accuracy: dev_result.as_ref().map(|d| d.0),
            task_dev_accuracy: dev_result.as_ref().map(|d| d.1.clone()).unwrap_or_default(),
            score_checksum: state.scores.checksum(),
        });
        log.selected_epoch = state.epoch;
        if let (Some(patience), Some((acc, _))) = (state.config.patience, dev_result) {
            if best.as_ref().map_or(true, |b| acc > b.0) {
                best = Some((acc, state.model.store.clone(), state.epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, store, epoch)) = best {
        state.model.store = store;
        log.selected_epoch = epoch;
    }
    Ok(log)
}
