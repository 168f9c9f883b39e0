//! Tasks, examples and datasets: ingestion, few-shot splitting, synthetic
//! suites and batch samplers.

mod io;
mod sampler;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Verbalizer;
use crate::error::{Error, Result};
use crate::templates::TemplateSettings;

pub use io::{load_dataset, write_dataset, DataFormat};
pub use sampler::{stratified_probabilities, BatchItem, StratifiedSampler, UniformSampler};
pub use synth::{build_synthetic_suite, GroupConfig, PatternKind, SuiteConfig};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_owned())
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_owned())
    }
}

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const PERIOD: &str = ".";

/// Whitespace-token vocabulary. Ids 0, 1 and 2 are `[UNK]`, `[MASK]` and `.`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::from(vec![UNK.to_owned(), MASK.to_owned(), PERIOD.to_owned()])
    }

    /// Id of `token`, adding it if absent.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the `[UNK]` id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.unk_id())
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        1
    }

    pub fn period_id(&self) -> usize {
        2
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub uid: String,
    pub task_id: TaskId,
    pub text_a: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<Vec<String>>,
    pub label: String,
}

impl Example {
    pub fn validate(&self, task: &TaskSpec) -> Result<()> {
        if self.text_a.is_empty() {
            return Err(Error::InvalidExample {
                uid: self.uid.clone(),
                reason: "empty text_a".into(),
            });
        }
        if self.task_id != task.task_id {
            return Err(Error::InvalidExample {
                uid: self.uid.clone(),
                reason: format!("belongs to task {}, not {}", self.task_id, task.task_id),
            });
        }
        if task.label_index(&self.label).is_none() {
            return Err(Error::UnknownLabel {
                uid: self.uid.clone(),
                label: self.label.clone(),
                task: task.task_id.0.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub name: String,
    pub group_id: GroupId,
    pub label_set: Vec<String>,
    pub verbalizer: Verbalizer,
    #[serde(default)]
    pub template: TemplateSettings,
}

impl TaskSpec {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.label_set.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "task {} needs at least two labels",
                self.task_id
            )));
        }
        let unique: BTreeSet<_> = self.label_set.iter().collect();
        if unique.len() != self.label_set.len() {
            return Err(Error::InvalidConfig(format!("task {} repeats a label", self.task_id)));
        }
        self.verbalizer.validate(self.label_set.len(), vocab_size)?;
        self.template.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub group_id: GroupId,
    pub description_tokens: Vec<String>,
    pub member_task_ids: Vec<TaskId>,
}

/// Check that groups are non-empty, described, and partition `tasks`.
pub fn validate_roster(tasks: &[TaskSpec], groups: &[TaskGroup]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for group in groups {
        if group.member_task_ids.is_empty() {
            return Err(Error::EmptyGroup(group.group_id.0.clone()));
        }
        if group.description_tokens.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "group {} has an empty description",
                group.group_id
            )));
        }
        for id in &group.member_task_ids {
            let task = tasks
                .iter()
                .find(|t| &t.task_id == id)
                .ok_or_else(|| Error::UnknownTask(id.0.clone()))?;
            if task.group_id != group.group_id {
                return Err(Error::InvalidConfig(format!(
                    "task {id} listed in group {} but declares group {}",
                    group.group_id, task.group_id
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidConfig(format!("task {id} appears in two groups")));
            }
        }
    }
    if let Some(orphan) = tasks.iter().find(|t| !seen.contains(&t.task_id)) {
        return Err(Error::InvalidConfig(format!(
            "task {} belongs to no group",
            orphan.task_id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub seed: u64,
}

/// Draw `k` train and `k` dev examples per class, disjoint by uid.
///
/// Output is grouped by class in label-set order; within a class the order is
/// the seeded shuffle order.
pub fn few_shot_sample(dataset: &[Example], task: &TaskSpec, k: usize, seed: u64) -> Result<FewShotSplit> {
    let mut by_class: Vec<Vec<&Example>> = vec![Vec::new(); task.label_set.len()];
    for ex in dataset {
        let idx = task.label_index(&ex.label).ok_or_else(|| Error::UnknownLabel {
            uid: ex.uid.clone(),
            label: ex.label.clone(),
            task: task.task_id.0.clone(),
        })?;
        by_class[idx].push(ex);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = FewShotSplit {
        train: Vec::with_capacity(k * by_class.len()),
        dev: Vec::with_capacity(k * by_class.len()),
        seed,
    };
    for (class, members) in task.label_set.iter().zip(by_class.iter_mut()) {
        if members.len() < 2 * k {
            return Err(Error::InsufficientSupport {
                task: task.task_id.0.clone(),
                class: class.clone(),
                available: members.len(),
                needed: 2 * k,
            });
        }
        members.shuffle(&mut rng);
        split.train.extend(members[..k].iter().map(|e| (*e).clone()));
        split.dev.extend(members[k..2 * k].iter().map(|e| (*e).clone()));
    }
    Ok(split)
}

/// Pool and held-out test examples of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
}

/// A complete task roster with vocabulary and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskSpec>,
    pub groups: Vec<TaskGroup>,
    pub data: BTreeMap<TaskId, TaskData>,
}

impl Suite {
    pub fn task(&self, id: &TaskId) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| &t.task_id == id)
            .ok_or_else(|| Error::UnknownTask(id.0.clone()))
    }

    pub fn group(&self, id: &GroupId) -> Result<&TaskGroup> {
        self.groups
            .iter()
            .find(|g| &g.group_id == id)
            .ok_or_else(|| Error::UnknownGroup(id.0.clone()))
    }

    pub fn data(&self, id: &TaskId) -> Result<&TaskData> {
        self.data.get(id).ok_or_else(|| Error::UnknownTask(id.0.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        for task in &self.tasks {
            task.validate(self.vocab.len())?;
            let data = self.data(&task.task_id)?;
            for ex in data.pool.iter().chain(&data.test) {
                ex.validate(task)?;
            }
        }
        validate_roster(&self.tasks, &self.groups)
    }

    /// Restrict to a subset of tasks, dropping groups left empty.
    pub fn restrict(&self, keep: &[TaskId]) -> Suite {
        let tasks: Vec<TaskSpec> = self
            .tasks
            .iter()
            .filter(|t| keep.contains(&t.task_id))
            .cloned()
            .collect();
        let groups = self
            .groups
            .iter()
            .filter_map(|g| {
                let members: Vec<TaskId> =
                    g.member_task_ids.iter().filter(|t| keep.contains(t)).cloned().collect();
                (!members.is_empty()).then(|| TaskGroup {
                    member_task_ids: members,
                    ..g.clone()
                })
            })
            .collect();
        let data = self
            .data
            .iter()
            .filter(|(id, _)| keep.contains(id))
            .map(|(id, d)| (id.clone(), d.clone()))
            .collect();
        Suite {
            vocab: self.vocab.clone(),
            tasks,
            groups,
            data,
        }
    }

    /// Few-shot train/dev splits for every task under one seed.
    pub fn few_shot(&self, k: usize, seed: u64) -> Result<BTreeMap<TaskId, FewShotSplit>> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let data = self.data(&task.task_id)?;
                let split = few_shot_sample(&data.pool, task, k, seed.wrapping_add(1000 * i as u64))?;
                Ok((task.task_id.clone(), split))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn binary_task() -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            name: "t".into(),
            group_id: "g".into(),
            label_set: vec!["neg".into(), "pos".into()],
            verbalizer: Verbalizer::new(vec![vec![3], vec![4]]),
            template: TemplateSettings::default(),
        }
    }

    fn dataset(per_class: usize) -> Vec<Example> {
        (0..2 * per_class)
            .map(|i| Example {
                uid: format!("u{i}"),
                task_id: "t".into(),
                text_a: vec!["w".into()],
                text_b: None,
                label: if i % 2 == 0 { "neg" } else { "pos" }.into(),
            })
            .collect()
    }

    #[test]
    fn few_shot_sizes_and_disjointness() {
        let split = few_shot_sample(&dataset(40), &binary_task(), 16, 3).unwrap();
        assert_eq!(split.train.len(), 32);
        assert_eq!(split.dev.len(), 32);
        let train: BTreeSet<_> = split.train.iter().map(|e| &e.uid).collect();
        assert!(split.dev.iter().all(|e| !train.contains(&e.uid)));
        for label in ["neg", "pos"] {
            assert_eq!(split.train.iter().filter(|e| e.label == label).count(), 16);
            assert_eq!(split.dev.iter().filter(|e| e.label == label).count(), 16);
        }
    }

    #[test]
    fn few_shot_zero_k_is_empty() {
        let split = few_shot_sample(&dataset(5), &binary_task(), 0, 1).unwrap();
        assert!(split.train.is_empty() && split.dev.is_empty());
    }

    #[test]
    fn few_shot_is_deterministic() {
        let a = few_shot_sample(&dataset(40), &binary_task(), 16, 9).unwrap();
        let b = few_shot_sample(&dataset(40), &binary_task(), 16, 9).unwrap();
        let uids = |s: &FewShotSplit| s.train.iter().map(|e| e.uid.clone()).collect::<Vec<_>>();
        assert_eq!(uids(&a), uids(&b));
        let c = few_shot_sample(&dataset(40), &binary_task(), 16, 10).unwrap();
        assert_ne!(uids(&a), uids(&c));
    }

    #[test]
    fn few_shot_reports_insufficient_class() {
        let err = few_shot_sample(&dataset(10), &binary_task(), 6, 1).unwrap_err();
        match err {
            Error::InsufficientSupport { class, available, .. } => {
                assert_eq!(class, "neg");
                assert_eq!(available, 10);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn example_validation() {
        let task = binary_task();
        let mut ex = dataset(1).remove(0);
        assert!(ex.validate(&task).is_ok());
        ex.label = "maybe".into();
        assert!(matches!(ex.validate(&task), Err(Error::UnknownLabel { .. })));
        ex.label = "neg".into();
        ex.text_a.clear();
        assert!(matches!(ex.validate(&task), Err(Error::InvalidExample { .. })));
    }

    #[test]
    fn roster_must_partition_tasks() {
        let task = binary_task();
        let good = TaskGroup {
            group_id: "g".into(),
            description_tokens: vec!["a".into()],
            member_task_ids: vec!["t".into()],
        };
        assert!(validate_roster(&[task.clone()], &[good.clone()]).is_ok());
        let empty = TaskGroup {
            member_task_ids: vec![],
            ..good.clone()
        };
        assert!(matches!(
            validate_roster(&[task.clone()], &[good.clone(), empty]),
            Err(Error::EmptyGroup(_))
        ));
        assert!(validate_roster(&[task], &[]).is_err());
    }

    #[test]
    fn vocabulary_unknowns_map_to_unk() {
        let mut v = Vocabulary::new();
        let id = v.insert("hello");
        assert_eq!(v.id("hello"), id);
        assert_eq!(v.id("nope"), v.unk_id());
        assert_eq!(v.token(v.mask_id()), Some(MASK));
    }
}
