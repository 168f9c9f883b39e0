//! Desk-scale synthetic task suites.
//!
//! Every group owns its label words and pattern tokens, so tasks inside a
//! group share a label space and a decision rule while tasks in different
//! groups share nothing but filler words. Each task adds its own filler
//! vocabulary, which is what makes tasks of one group distinguishable.
//!
//! * `marker` groups: a sentence carries one or two marker tokens drawn from
//!   the inventory of its class.
//! * `pair` groups: `text_a` carries a key token; `text_b` repeats it (class
//!   0), carries a different key (class 1) or the key's opposite (class 2).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Example, GroupId, Suite, TaskData, TaskGroup, TaskId, TaskSpec, Vocabulary};
use crate::backbone::Verbalizer;
use crate::error::{Error, Result};
use crate::templates::TemplateSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Marker,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub id: String,
    pub description: String,
    pub kind: PatternKind,
    pub labels: Vec<String>,
    pub tasks: Vec<String>,
    /// Marker tokens per class (marker groups) or key tokens (pair groups).
    #[serde(default = "default_inventory")]
    pub inventory: usize,
    #[serde(default = "default_task_filler")]
    pub task_filler: usize,
}

fn default_inventory() -> usize {
    12
}

fn default_task_filler() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub groups: Vec<GroupConfig>,
    /// Upper bound on the vocabulary the suite may use.
    pub vocab_size: usize,
    pub shared_filler: usize,
    pub label_words: usize,
    pub pool_per_class: usize,
    pub test_per_class: usize,
    /// Probability that a pool example carries a wrong label. Test sets are clean.
    pub label_noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of a second marker in marker groups.
    pub second_marker: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self::similar()
    }
}

impl SuiteConfig {
    fn base(groups: Vec<GroupConfig>) -> Self {
        Self {
            groups,
            vocab_size: 256,
            shared_filler: 24,
            label_words: 3,
            pool_per_class: 64,
            test_per_class: 100,
            label_noise: 0.1,
            min_len: 5,
            max_len: 9,
            second_marker: 0.3,
            seed: 7,
        }
    }

    fn sentiment(tasks: &[&str]) -> GroupConfig {
        GroupConfig {
            id: "sentiment".into(),
            description: "a sentiment analysis task".into(),
            kind: PatternKind::Marker,
            labels: vec!["negative".into(), "positive".into()],
            tasks: tasks.iter().map(|t| (*t).to_owned()).collect(),
            inventory: default_inventory(),
            task_filler: default_task_filler(),
        }
    }

    /// One binary marker group of three tasks.
    pub fn similar() -> Self {
        Self::base(vec![Self::sentiment(&["sst", "mr", "cr"])])
    }

    /// Sentiment, inference and paraphrase groups.
    pub fn distant() -> Self {
        Self::base(vec![
            Self::sentiment(&["sst", "mr", "cr"]),
            GroupConfig {
                id: "nli".into(),
                description: "a natural language inference".into(),
                kind: PatternKind::Pair,
                labels: vec!["entailment".into(), "neutral".into(), "contradiction".into()],
                tasks: vec!["mnli".into(), "snli".into()],
                inventory: default_inventory(),
                task_filler: default_task_filler(),
            },
            GroupConfig {
                id: "paraphrase".into(),
                description: "a paraphrasing task".into(),
                kind: PatternKind::Pair,
                labels: vec!["equivalent".into(), "different".into()],
                tasks: vec!["mrpc".into(), "qqp".into()],
                inventory: default_inventory(),
                task_filler: default_task_filler(),
            },
        ])
    }
}

struct GroupTokens {
    /// marker groups: per-class markers; pair groups: [keys, opposites]
    patterns: Vec<Vec<String>>,
}

/// Build a suite of tasks, groups and data, deterministic in `seed`.
pub fn build_synthetic_suite(config: &SuiteConfig, seed: u64) -> Result<Suite> {
    validate(config)?;
    let mut vocab = Vocabulary::new();
    for g in &config.groups {
        for w in tokenize(&g.description) {
            vocab.insert(&w);
        }
    }
    let shared: Vec<String> = (0..config.shared_filler).map(|i| format!("w{i}")).collect();
    let mut tasks = Vec::new();
    let mut groups = Vec::new();
    let mut group_tokens = Vec::new();
    let mut task_filler: BTreeMap<TaskId, Vec<String>> = BTreeMap::new();
    for g in &config.groups {
        let verbalizer = Verbalizer::new(
            (0..g.labels.len())
                .map(|c| {
                    (0..config.label_words)
                        .map(|j| vocab.insert(&format!("{}_l{c}_{j}", g.id)))
                        .collect()
                })
                .collect(),
        );
        let patterns: Vec<Vec<String>> = match g.kind {
            PatternKind::Marker => (0..g.labels.len())
                .map(|c| (0..g.inventory).map(|j| format!("{}_m{c}_{j}", g.id)).collect())
                .collect(),
            PatternKind::Pair => ["k", "o"]
                .iter()
                .map(|p| (0..g.inventory).map(|j| format!("{}_{p}{j}", g.id)).collect())
                .collect(),
        };
        for t in patterns.iter().flatten() {
            vocab.insert(t);
        }
        group_tokens.push(GroupTokens { patterns });
        for t in &g.tasks {
            let id = TaskId(t.clone());
            let filler: Vec<String> = (0..g.task_filler).map(|j| format!("{t}_f{j}")).collect();
            for w in &filler {
                vocab.insert(w);
            }
            task_filler.insert(id.clone(), filler);
            tasks.push(TaskSpec {
                task_id: id,
                name: t.clone(),
                group_id: GroupId(g.id.clone()),
                label_set: g.labels.clone(),
                verbalizer: verbalizer.clone(),
                template: TemplateSettings::default(),
            });
        }
        groups.push(TaskGroup {
            group_id: GroupId(g.id.clone()),
            description_tokens: tokenize(&g.description),
            member_task_ids: g.tasks.iter().map(|t| TaskId(t.clone())).collect(),
        });
    }
    for w in &shared {
        vocab.insert(w);
    }
    if vocab.len() > config.vocab_size {
        return Err(Error::VocabularyTooSmall {
            needed: vocab.len(),
            available: config.vocab_size,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = BTreeMap::new();
    for (g, tokens) in config.groups.iter().zip(&group_tokens) {
        for t in &g.tasks {
            let id = TaskId(t.clone());
            let gen = Generator {
                config,
                group: g,
                tokens,
                task: &id,
                filler: &task_filler[&id],
                shared: &shared,
            };
            let pool = gen.examples("train", config.pool_per_class, config.label_noise, &mut rng);
            let test = gen.examples("test", config.test_per_class, 0.0, &mut rng);
            data.insert(id, TaskData { pool, test });
        }
    }
    let suite = Suite {
        vocab,
        tasks,
        groups,
        data,
    };
    suite.validate()?;
    Ok(suite)
}

fn validate(config: &SuiteConfig) -> Result<()> {
    let task_count: usize = config.groups.iter().map(|g| g.tasks.len()).sum();
    if config.groups.is_empty() || task_count < 2 {
        return Err(Error::InvalidConfig("suite needs at least two tasks".into()));
    }
    for g in &config.groups {
        if g.tasks.is_empty() {
            return Err(Error::EmptyGroup(g.id.clone()));
        }
        if g.labels.len() < 2 {
            return Err(Error::InvalidConfig(format!("group {} needs two labels", g.id)));
        }
        if g.kind == PatternKind::Pair && g.labels.len() > 3 {
            return Err(Error::InvalidConfig(format!(
                "pair group {} supports at most three labels",
                g.id
            )));
        }
        let needs_two_keys = g.kind == PatternKind::Pair;
        if g.inventory == 0 || (needs_two_keys && g.inventory < 2) {
            return Err(Error::InvalidConfig(format!("group {} inventory too small", g.id)));
        }
    }
    if config.label_words == 0 || config.min_len == 0 || config.min_len > config.max_len {
        return Err(Error::InvalidConfig("label_words and sentence lengths must be positive and ordered".into()));
    }
    if config.shared_filler == 0 && config.groups.iter().any(|g| g.task_filler == 0) {
        return Err(Error::InvalidConfig("no filler vocabulary".into()));
    }
    if !(0.0..1.0).contains(&config.label_noise) {
        return Err(Error::InvalidConfig("label_noise must be in [0, 1)".into()));
    }
    Ok(())
}

struct Generator<'a> {
    config: &'a SuiteConfig,
    group: &'a GroupConfig,
    tokens: &'a GroupTokens,
    task: &'a TaskId,
    filler: &'a [String],
    shared: &'a [String],
}

impl Generator<'_> {
    fn filler_word(&self, rng: &mut ChaCha8Rng) -> String {
        let own = !self.filler.is_empty() && (self.shared.is_empty() || rng.gen_bool(0.5));
        let pool = if own { self.filler } else { self.shared };
        pool.choose(rng).expect("non-empty filler").clone()
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, inserts: &[String]) -> Vec<String> {
        let len = rng.gen_range(self.config.min_len..=self.config.max_len);
        let mut words: Vec<String> = (0..len).map(|_| self.filler_word(rng)).collect();
        for w in inserts {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, w.clone());
        }
        words
    }

    fn examples(&self, split: &str, per_class: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Example> {
        let classes = self.group.labels.len();
        let mut out = Vec::with_capacity(per_class * classes);
        for i in 0..per_class * classes {
            let class = i % classes;
            let (text_a, text_b) = match self.group.kind {
                PatternKind::Marker => {
                    let inventory = &self.tokens.patterns[class];
                    let mut inserts = vec![inventory.choose(rng).unwrap().clone()];
                    if rng.gen_bool(self.config.second_marker) {
                        inserts.push(inventory.choose(rng).unwrap().clone());
                    }
                    (self.sentence(rng, &inserts), None)
                }
                PatternKind::Pair => {
                    let (keys, opposites) = (&self.tokens.patterns[0], &self.tokens.patterns[1]);
                    let k = rng.gen_range(0..keys.len());
                    let b_token = match class {
                        0 => keys[k].clone(),
                        1 => {
                            let other = (k + rng.gen_range(1..keys.len())) % keys.len();
                            keys[other].clone()
                        }
                        _ => opposites[k].clone(),
                    };
                    (
                        self.sentence(rng, &[keys[k].clone()]),
                        Some(self.sentence(rng, &[b_token])),
                    )
                }
            };
            let mut label = class;
            if noise > 0.0 && rng.gen_bool(noise) {
                label = (class + rng.gen_range(1..classes)) % classes;
            }
            out.push(Example {
                uid: format!("{}-{split}-{i}", self.task),
                task_id: self.task.clone(),
                text_a,
                text_b,
                label: self.group.labels[label].clone(),
            });
        }
        out
    }
}
