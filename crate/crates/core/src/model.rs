//! The full prompt model: backbone, prompt encoders, pseudo tables,
//! templates and fusion sites, with per-route forward passes and the shared
//! batch-loss step used by both training stages.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{class_distribution, BackboneConfig, MaskedLm, TransformerBackbone, Verbalizer};
use crate::data::{validate_roster, Example, GroupId, TaskGroup, TaskId, TaskSpec, Vocabulary};
use crate::debias::{instance_loss, LossTerm, LossWeights};
use crate::encoders::{
    assemble_input, fuse_similar, gate_combine, inter_type_embed, intra_type_embed, FusionMode, Gate,
    PromptEncoderParams, PseudoTable, SelfAttention,
};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamGrads, ParamId, ParamStore};
use crate::templates::{build_template, render, PromptOwner, PromptTemplate, TemplateKind, TemplateSettings};

/// Examples per graph during inference.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Tasks share one label space; each task has its own encoder.
    #[default]
    Similar,
    /// Tasks are grouped by type; each group has its own encoder.
    Distant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub position_std: f64,
    pub fusion: FusionMode,
    /// One gate coefficient per dimension instead of a scalar.
    pub gate_per_dimension: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_len: 64,
            init_std: 0.02,
            position_std: 0.005,
            fusion: FusionMode::Positional,
            gate_per_dimension: false,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self, vocab: &Vocabulary) -> BackboneConfig {
        BackboneConfig {
            vocab_size: vocab.len(),
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            mask_token: vocab.mask_id(),
            init_std: self.init_std,
            position_std: self.position_std,
        }
    }
}

/// Which prompt construction an example goes through.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Route {
    /// Task encoder fused with the universal encoder, task template.
    Similar(TaskId),
    /// Intra/inter type embeddings under the group's gate, type template.
    Distant(GroupId),
    /// One encoder over its own pseudo tokens and template.
    Single(PromptOwner),
}

const SIMILAR_SITE: &str = "similar";
const INTRA_SITE: &str = "intra";
const INTER_SITE: &str = "inter";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptModel {
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub backbone: TransformerBackbone,
    /// Keyed by [`PromptOwner::key`].
    pub encoders: BTreeMap<String, PromptEncoderParams>,
    pub tables: BTreeMap<String, PseudoTable>,
    pub templates: BTreeMap<String, PromptTemplate>,
    pub gates: BTreeMap<GroupId, Gate>,
    pub fusion: BTreeMap<String, SelfAttention>,
    pub members: BTreeMap<GroupId, Vec<TaskId>>,
}

/// Output of one example's forward pass.
pub struct Forward {
    pub mask_output: Var,
    pub logits: Var,
}

/// One training instance with everything its loss term needs.
pub struct Instance<'a> {
    pub route: Route,
    pub example: &'a Example,
    pub verbalizer: &'a Verbalizer,
    pub target: usize,
    pub score: f64,
    pub task_size: usize,
}

pub struct StepOutcome {
    /// Data loss plus regularizer.
    pub loss: f64,
    pub instance_losses: Vec<f64>,
    pub grad_norm: f64,
}

fn common_pseudo_count(tasks: &[TaskSpec]) -> Result<TemplateSettings> {
    let first = tasks.first().ok_or_else(|| Error::InvalidConfig("empty task roster".into()))?.template;
    if let Some(t) = tasks.iter().find(|t| t.template.pseudo_count != first.pseudo_count) {
        return Err(Error::InvalidTemplate(format!(
            "task {} uses {} pseudo tokens, others {}",
            t.task_id, t.template.pseudo_count, first.pseudo_count
        )));
    }
    Ok(first)
}

impl PromptModel {
    /// Fresh model for a task roster, deterministic in `seed`.
    pub fn new(
        mode: Mode,
        tasks: &[TaskSpec],
        groups: &[TaskGroup],
        vocab: &Vocabulary,
        config: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        validate_roster(tasks, groups)?;
        let settings = common_pseudo_count(tasks)?;
        for t in tasks {
            t.validate(vocab.len())?;
        }
        if mode == Mode::Similar {
            let first = &tasks[0];
            if let Some(t) = tasks.iter().find(|t| t.label_set != first.label_set) {
                return Err(Error::LabelSpaceMismatch(first.task_id.to_string(), t.task_id.to_string()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = TransformerBackbone::new(config.backbone(vocab), &mut store, &mut rng)?;
        let d = config.dim;
        let mut encoders = BTreeMap::new();
        let mut tables = BTreeMap::new();
        let mut templates = BTreeMap::new();
        let mut gates = BTreeMap::new();
        let mut fusion = BTreeMap::new();

        let universal = PromptOwner::Universal;
        encoders.insert(universal.key(), PromptEncoderParams::new(&mut store, universal.clone(), d, &mut rng)?);
        tables.insert(universal.key(), PseudoTable::new(&mut store, universal.clone(), settings.pseudo_count, d, &mut rng));
        templates.insert(universal.key(), build_template(TemplateKind::Universal, settings, universal, None)?);

        for t in tasks {
            let owner = PromptOwner::Task(t.task_id.clone());
            tables.insert(owner.key(), PseudoTable::new(&mut store, owner.clone(), settings.pseudo_count, d, &mut rng));
            templates.insert(owner.key(), build_template(TemplateKind::Task, t.template, owner.clone(), None)?);
            if mode == Mode::Similar {
                encoders.insert(owner.key(), PromptEncoderParams::new(&mut store, owner, d, &mut rng)?);
            }
        }
        match mode {
            Mode::Similar => {
                fusion.insert(SIMILAR_SITE.to_owned(), SelfAttention::new(&mut store, SIMILAR_SITE, d, config.fusion));
            }
            Mode::Distant => {
                for site in [INTRA_SITE, INTER_SITE] {
                    fusion.insert(site.to_owned(), SelfAttention::new(&mut store, site, d, config.fusion));
                }
                for g in groups {
                    let owner = PromptOwner::Type(g.group_id.clone());
                    let description = vocab.encode(&g.description_tokens);
                    encoders.insert(owner.key(), PromptEncoderParams::new(&mut store, owner.clone(), d, &mut rng)?);
                    tables.insert(owner.key(), PseudoTable::new(&mut store, owner.clone(), settings.pseudo_count, d, &mut rng));
                    templates.insert(owner.key(), build_template(TemplateKind::Type, settings, owner, Some(description))?);
                    let name = g.group_id.to_string();
                    gates.insert(g.group_id.clone(), Gate::new(&mut store, &name, d, config.gate_per_dimension));
                }
            }
        }
        let members = groups
            .iter()
            .map(|g| (g.group_id.clone(), g.member_task_ids.clone()))
            .collect();
        Ok(Self {
            vocab: vocab.clone(),
            store,
            backbone,
            encoders,
            tables,
            templates,
            gates,
            fusion,
            members,
        })
    }

    /// Rebuild lookup indexes after deserializing.
    pub fn reindex(&mut self) {
        self.store.reindex();
    }

    pub fn dim(&self) -> usize {
        self.backbone.config().dim
    }

    fn encoder(&self, owner: &PromptOwner) -> Result<&PromptEncoderParams> {
        self.encoders
            .get(&owner.key())
            .ok_or_else(|| Error::InvalidConfig(format!("no prompt encoder for {}", owner.key())))
    }

    fn table(&self, owner: &PromptOwner) -> Result<&PseudoTable> {
        self.tables
            .get(&owner.key())
            .ok_or_else(|| Error::InvalidConfig(format!("no pseudo tokens for {}", owner.key())))
    }

    fn site(&self, name: &str) -> Result<&SelfAttention> {
        self.fusion
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no {name} fusion in this model")))
    }

    /// `encoder` applied to the pseudo tokens of `tokens`.
    fn encode(&self, g: &mut Graph, encoder: &PromptOwner, tokens: &PromptOwner) -> Result<Var> {
        let pseudo = self.table(tokens)?.lookup(g, &self.store);
        self.encoder(encoder)?.encode(g, &self.store, pseudo)
    }

    pub fn template(&self, route: &Route) -> Result<&PromptTemplate> {
        let key = match route {
            Route::Similar(t) => PromptOwner::Task(t.clone()).key(),
            Route::Distant(g) => PromptOwner::Type(g.clone()).key(),
            Route::Single(o) => o.key(),
        };
        self.templates
            .get(&key)
            .ok_or_else(|| Error::InvalidConfig(format!("no template for {key}")))
    }

    /// The I×d prompt sequence of a route. Prompts do not depend on the
    /// input text, so one graph computes each route once.
    pub fn prompt_sequence(&self, g: &mut Graph, route: &Route, cache: &mut BTreeMap<Route, Var>) -> Result<Var> {
        if let Some(&v) = cache.get(route) {
            return Ok(v);
        }
        let universal = PromptOwner::Universal;
        let seq = match route {
            Route::Similar(task) => {
                let owner = PromptOwner::Task(task.clone());
                let task_seq = self.encode(g, &owner, &owner)?;
                let uni_seq = self.encode(g, &universal, &universal)?;
                fuse_similar(g, &self.store, self.site(SIMILAR_SITE)?, task_seq, uni_seq)?
            }
            Route::Distant(group) => {
                let owner = PromptOwner::Type(group.clone());
                let members = self
                    .members
                    .get(group)
                    .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
                if members.is_empty() {
                    return Err(Error::EmptyGroup(group.to_string()));
                }
                let type_seq = self.encode(g, &owner, &owner)?;
                let member_seqs = members
                    .iter()
                    .map(|m| self.encode(g, &owner, &PromptOwner::Task(m.clone())))
                    .collect::<Result<Vec<_>>>()?;
                let intra = intra_type_embed(g, &self.store, self.site(INTRA_SITE)?, &member_seqs, type_seq)?;
                let uni_seq = self.encode(g, &universal, &universal)?;
                let inter = inter_type_embed(g, &self.store, self.site(INTER_SITE)?, type_seq, uni_seq)?;
                let gate = self.gates.get(group).ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
                let theta = g.param(&self.store, gate.theta);
                gate_combine(g, intra, inter, theta)?
            }
            Route::Single(owner) => self.encode(g, owner, owner)?,
        };
        cache.insert(route.clone(), seq);
        Ok(seq)
    }

    pub fn forward(&self, g: &mut Graph, route: &Route, cache: &mut BTreeMap<Route, Var>, example: &Example) -> Result<Forward> {
        let layout = render(self.template(route)?, example, &self.vocab)?;
        let prompt = self.prompt_sequence(g, route, cache)?;
        let input = assemble_input(g, &self.store, &self.backbone, prompt, &layout)?;
        let out = self.backbone.forward(g, &self.store, input, layout.mask_position())?;
        let logits = self.backbone.mlm_logits(g, &self.store, out.mask_output);
        Ok(Forward {
            mask_output: out.mask_output,
            logits,
        })
    }

    /// Class distributions ŷ for `examples` under `verbalizer`.
    pub fn predict(&self, route: &Route, examples: &[Example], verbalizer: &Verbalizer) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut cache = BTreeMap::new();
            for ex in chunk {
                let f = self.forward(&mut g, route, &mut cache, ex)?;
                let y = class_distribution(&mut g, f.logits, verbalizer)?;
                out.push(g.value(y).as_slice().to_vec());
            }
        }
        Ok(out)
    }

    /// Mask-position outputs, the sentence embeddings E(x).
    pub fn embed(&self, route: &Route, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let mut cache = BTreeMap::new();
            for ex in chunk {
                let f = self.forward(&mut g, route, &mut cache, ex)?;
                out.push(g.value(f.mask_output).as_slice().to_vec());
            }
        }
        Ok(out)
    }

    /// Parameters a forward pass through `route` reads.
    pub fn route_params(&self, route: &Route) -> Result<Vec<ParamId>> {
        let mut g = Graph::new();
        let mut cache = BTreeMap::new();
        self.prompt_sequence(&mut g, route, &mut cache)?;
        let mut ids = g.bound_params();
        ids.extend(self.backbone.param_ids());
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }

    /// Graph holding the summed de-biased data loss of `batch`, and the
    /// per-instance loss nodes.
    pub fn batch_graph(&self, batch: &[Instance<'_>], weights: &LossWeights) -> Result<(Graph, Var, Vec<Var>)> {
        if batch.is_empty() {
            return Err(Error::NoTrainingData);
        }
        let mut g = Graph::new();
        let mut cache = BTreeMap::new();
        let mut parts = Vec::with_capacity(batch.len());
        for inst in batch {
            let f = self.forward(&mut g, &inst.route, &mut cache, inst.example)?;
            let y_hat = class_distribution(&mut g, f.logits, inst.verbalizer)?;
            let term = LossTerm {
                y_hat,
                target: inst.target,
                score: inst.score,
                task_size: inst.task_size,
            };
            parts.push(instance_loss(&mut g, &term, weights));
        }
        let column = g.concat_rows(&parts);
        let loss = g.sum(column);
        Ok((g, loss, parts))
    }

    /// One optimizer step on `batch`, updating only `trainable`.
    pub fn train_step(
        &mut self,
        optimizer: &mut Adam,
        batch: &[Instance<'_>],
        weights: &LossWeights,
        trainable: &[ParamId],
        epoch: usize,
    ) -> Result<StepOutcome> {
        let (g, loss, parts) = self.batch_graph(batch, weights)?;
        let data_loss = g.value(loss).item();
        let reg = weights.lambda1 * self.store.norm_sq(trainable);
        let total = data_loss + reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: total,
                epoch,
                uids: batch.iter().map(|i| i.example.uid.clone()).collect(),
                param_norm: self.store.norm_sq(trainable).sqrt(),
            });
        }
        let instance_losses = parts.iter().map(|&p| g.value(p).item()).collect();
        let mut grads: ParamGrads = g.backward(loss).param_grads(&g, &self.store);
        if weights.lambda1 > 0.0 {
            grads.add_l2(&self.store, trainable, weights.lambda1);
        }
        let grad_norm = grads.norm();
        optimizer.step(&mut self.store, &grads, trainable);
        Ok(StepOutcome {
            loss: total,
            instance_losses,
            grad_norm,
        })
    }
}

/// Fraction of argmax predictions equal to the gold class.
pub fn accuracy(predictions: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", predictions.len(), targets.len())));
    }
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, &t)| argmax(p) == t)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gold class indices of `examples` under `task`.
pub fn targets(task: &TaskSpec, examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| {
            task.label_index(&e.label).ok_or_else(|| Error::UnknownLabel {
                uid: e.uid.clone(),
                label: e.label.clone(),
                task: task.task_id.to_string(),
            })
        })
        .collect()
}
