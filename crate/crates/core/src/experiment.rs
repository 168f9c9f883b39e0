//! Experiment orchestration: configuration, the few-shot protocol over
//! seeds, evaluation, reports, prototype case listings and embedding export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::Verbalizer;
use crate::checkpoint;
use crate::data::{
    build_synthetic_suite, load_dataset, tokenize, DataFormat, Example, GroupId, Suite, SuiteConfig, TaskData, TaskGroup,
    TaskId, TaskSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::mma::{split_sets, train_meta, MetaLearnerState, TaskSets, TrainConfig};
use crate::templates::TemplateSettings;
use crate::tms::{adapt, generalize, AdaptConfig, SpecializedModel};

/// One task read from files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileTask {
    pub id: String,
    pub group: String,
    pub labels: Vec<String>,
    /// Label words per class, in label order.
    pub label_words: Vec<Vec<String>>,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub format: Option<DataFormat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileGroup {
    pub id: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileSuite {
    pub groups: Vec<FileGroup>,
    pub tasks: Vec<FileTask>,
}

/// Where the task suite comes from. Without `files` a synthetic suite is
/// generated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteSpec {
    pub synthetic: Option<SuiteConfig>,
    pub files: Option<FileSuite>,
    /// Overrides the synthetic config's own seed.
    pub seed: Option<u64>,
}

fn data_format(path: &Path, explicit: Option<DataFormat>) -> Result<DataFormat> {
    explicit
        .or_else(|| DataFormat::from_path(path))
        .ok_or_else(|| Error::InvalidConfig(format!("cannot infer data format of {}", path.display())))
}

impl SuiteSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Suite> {
        if let Some(files) = &self.files {
            return build_file_suite(files, base_dir);
        }
        let config = self.synthetic.clone().unwrap_or_default();
        build_synthetic_suite(&config, self.seed.unwrap_or(config.seed))
    }
}

fn build_file_suite(files: &FileSuite, base_dir: &Path) -> Result<Suite> {
    let mut vocab = Vocabulary::new();
    let groups: Vec<TaskGroup> = files
        .groups
        .iter()
        .map(|g| {
            let description_tokens = tokenize(&g.description);
            for w in &description_tokens {
                vocab.insert(w);
            }
            TaskGroup {
                group_id: GroupId(g.id.clone()),
                description_tokens,
                member_task_ids: files
                    .tasks
                    .iter()
                    .filter(|t| t.group == g.id)
                    .map(|t| TaskId(t.id.clone()))
                    .collect(),
            }
        })
        .collect();
    let mut tasks = Vec::new();
    let mut data = BTreeMap::new();
    for t in &files.tasks {
        let verbalizer = Verbalizer::new(
            t.label_words
                .iter()
                .map(|words| words.iter().map(|w| vocab.insert(w)).collect())
                .collect(),
        );
        let spec = TaskSpec {
            task_id: TaskId(t.id.clone()),
            name: t.id.clone(),
            group_id: GroupId(t.group.clone()),
            label_set: t.labels.clone(),
            verbalizer,
            template: TemplateSettings::default(),
        };
        let train_path = base_dir.join(&t.train);
        let test_path = base_dir.join(&t.test);
        let pool = load_dataset(&train_path, data_format(&train_path, t.format)?, &spec)?;
        let mut test = load_dataset(&test_path, data_format(&test_path, t.format)?, &spec)?;
        for ex in &mut test {
            ex.uid = format!("{}-test", ex.uid);
        }
        for ex in pool.iter().chain(&test) {
            for w in ex.text_a.iter().chain(ex.text_b.iter().flatten()) {
                vocab.insert(w);
            }
        }
        data.insert(spec.task_id.clone(), TaskData { pool, test });
        tasks.push(spec);
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

pub fn save_suite(path: &Path, suite: &Suite) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(suite)?)?;
    Ok(())
}

/// Load a suite saved as JSON, or build one from a TOML [`SuiteSpec`].
pub fn load_suite(path: &Path) -> Result<Suite> {
    let text = fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        let spec: SuiteSpec = toml::from_str(&text)?;
        return spec.build(path.parent().unwrap_or(Path::new(".")));
    }
    let suite: Suite = serde_json::from_str(&text)?;
    suite.validate()?;
    Ok(suite)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// The clean held-out test set of each task.
    #[default]
    Test,
    /// The few-shot dev split of the seed.
    Dev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Training examples per class.
    pub k: usize,
    pub output_dir: Option<PathBuf>,
    pub suite: SuiteSpec,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    /// Tasks kept out of meta-training and reached by generalization.
    pub held_out: Vec<TaskId>,
    /// Meta-train every task alone instead of jointly.
    pub single_task: bool,
    pub evaluate_on: EvalSplit,
    /// Template layout applied to every task.
    pub template: Option<TemplateSettings>,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1, 2, 3, 4, 5],
            k: 16,
            output_dir: None,
            suite: SuiteSpec::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            held_out: Vec::new(),
            single_task: false,
            evaluate_on: EvalSplit::Test,
            template: None,
            save_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.save_checkpoints && self.output_dir.is_none() {
            return Err(Error::InvalidConfig("saving checkpoints needs an output directory".into()));
        }
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResultKind {
    Adapt,
    Generalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub seed: u64,
    pub task: TaskId,
    pub kind: ResultKind,
    /// Accuracy with label-word probabilities averaged per class.
    pub accuracy: f64,
    /// Accuracy averaged over the single-word label mappings.
    pub mapping_accuracy: f64,
    /// Accuracy of the meta-learner itself, for seen tasks.
    pub meta_accuracy: Option<f64>,
    pub selected_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub mapping_mean: f64,
    pub mapping_std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub results: Vec<TaskResult>,
    pub per_task: BTreeMap<TaskId, Summary>,
    /// Mean and spread of the per-seed suite averages.
    pub overall: Option<Summary>,
    pub failures: Vec<SeedFailure>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(values: &[f64], mapping: &[f64]) -> Summary {
    let (mean, std) = mean_std(values);
    let (mapping_mean, mapping_std) = mean_std(mapping);
    Summary {
        mean,
        std,
        mapping_mean,
        mapping_std,
        runs: values.len(),
    }
}

impl RunReport {
    fn finish(&mut self) {
        let mut by_task: BTreeMap<TaskId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut by_seed: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.results {
            let t = by_task.entry(r.task.clone()).or_default();
            t.0.push(r.accuracy);
            t.1.push(r.mapping_accuracy);
            let s = by_seed.entry(r.seed).or_default();
            s.0.push(r.accuracy);
            s.1.push(r.mapping_accuracy);
        }
        self.per_task = by_task.into_iter().map(|(t, (a, m))| (t, summarize(&a, &m))).collect();
        let seed_means: Vec<f64> = by_seed.values().map(|(a, _)| mean_std(a).0).collect();
        let seed_mapping: Vec<f64> = by_seed.values().map(|(_, m)| mean_std(m).0).collect();
        self.overall = (!seed_means.is_empty()).then(|| summarize(&seed_means, &seed_mapping));
    }

    /// Mean accuracy of one task over seeds.
    pub fn task_mean(&self, task: &TaskId) -> Option<f64> {
        self.per_task.get(task).map(|s| s.mean)
    }

    /// Suite mean over seeds of the per-seed task averages.
    pub fn suite_mean(&self) -> Option<f64> {
        self.overall.as_ref().map(|s| s.mean)
    }

    /// Tab-separated rendering of per-seed rows and summaries.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("seed\ttask\tkind\taccuracy\tmapping_accuracy\tmeta_accuracy\tselected_epoch\n");
        for r in &self.results {
            out += &format!(
                "{}\t{}\t{:?}\t{:.4}\t{:.4}\t{}\t{}\n",
                r.seed,
                r.task,
                r.kind,
                r.accuracy,
                r.mapping_accuracy,
                r.meta_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                r.selected_epoch
            );
        }
        for (t, s) in &self.per_task {
            out += &format!("mean\t{t}\t-\t{:.4}\t{:.4}\t-\t-\n", s.mean, s.mapping_mean);
            out += &format!("std\t{t}\t-\t{:.4}\t{:.4}\t-\t-\n", s.std, s.mapping_std);
        }
        if let Some(s) = &self.overall {
            out += &format!("mean\tall\t-\t{:.4}\t{:.4}\t-\t-\n", s.mean, s.mapping_mean);
            out += &format!("std\tall\t-\t{:.4}\t{:.4}\t-\t-\n", s.std, s.mapping_std);
        }
        out
    }
}

/// Accuracy of a specialized model on labelled examples.
pub fn evaluate(model: &SpecializedModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    model.evaluate(examples)
}

fn eval_rows<'a>(suite: &'a Suite, dev: &'a TaskSets, task: &TaskId, split: EvalSplit) -> Result<&'a [Example]> {
    Ok(match split {
        EvalSplit::Test => &suite.data(task)?.test,
        EvalSplit::Dev => dev.get(task).map(Vec::as_slice).unwrap_or(&[]),
    })
}

fn apply_template(suite: &Suite, template: Option<TemplateSettings>) -> Suite {
    let mut suite = suite.clone();
    if let Some(t) = template {
        for task in &mut suite.tasks {
            task.template = t;
        }
    }
    suite
}

fn adapt_result(model: &SpecializedModel, meta: &MetaLearnerState, rows: &[Example], seed: u64) -> Result<TaskResult> {
    Ok(TaskResult {
        seed,
        task: model.task.task_id.clone(),
        kind: ResultKind::Adapt,
        accuracy: evaluate(model, rows)?,
        mapping_accuracy: model.evaluate_per_mapping(rows)?,
        meta_accuracy: Some(meta.evaluate(&model.task.task_id, rows)?),
        selected_epoch: model.log.selected_epoch,
    })
}

/// Train, specialize and evaluate for one seed.
pub fn run_seed(config: &ExperimentConfig, suite: &Suite, seed: u64, checkpoints: &mut Vec<PathBuf>) -> Result<Vec<TaskResult>> {
    let suite = apply_template(suite, config.template);
    let splits = suite.few_shot(config.k, seed)?;
    let (train, dev) = split_sets(&splits);
    let train_config = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let adapt_config = AdaptConfig {
        seed,
        ..config.adapt.clone()
    };
    for t in &config.held_out {
        suite.task(t)?;
    }
    let seen: Vec<TaskId> = suite
        .tasks
        .iter()
        .map(|t| t.task_id.clone())
        .filter(|t| !config.held_out.contains(t))
        .collect();
    let rosters: Vec<Vec<TaskId>> = if config.single_task {
        seen.iter().map(|t| vec![t.clone()]).collect()
    } else {
        vec![seen.clone()]
    };
    let mut results = Vec::new();
    for (r, roster) in rosters.iter().enumerate() {
        if roster.is_empty() {
            return Err(Error::InvalidConfig("every task is held out".into()));
        }
        let sub = suite.restrict(roster);
        let pick = |sets: &TaskSets| -> TaskSets {
            sets.iter()
                .filter(|(t, _)| roster.contains(t))
                .map(|(t, v)| (t.clone(), v.clone()))
                .collect()
        };
        let (meta, log) = train_meta(&sub.tasks, &sub.groups, &sub.vocab, &pick(&train), &pick(&dev), &train_config)?;
        if let Some(dir) = config.output_dir.as_ref().filter(|_| config.save_checkpoints) {
            let path = dir.join(format!("seed{seed}-meta{r}.json"));
            checkpoint::save_meta(&path, &meta)?;
            log.write_jsonl(&dir.join(format!("seed{seed}-meta{r}-log.jsonl")))?;
            checkpoints.push(path);
        }
        for task in roster {
            let model = adapt(&meta, task, &splits[task], &adapt_config)?;
            let rows = eval_rows(&suite, &dev, task, config.evaluate_on)?;
            results.push(adapt_result(&model, &meta, rows, seed)?);
        }
        if r == 0 {
            for task in &config.held_out {
                let spec = suite.task(task)?;
                let description = suite.group(&spec.group_id)?.description_tokens.clone();
                let model = generalize(&meta, spec, &description, &splits[task], &adapt_config)?;
                let rows = eval_rows(&suite, &dev, task, config.evaluate_on)?;
                results.push(TaskResult {
                    seed,
                    task: task.clone(),
                    kind: ResultKind::Generalize,
                    accuracy: evaluate(&model, rows)?,
                    mapping_accuracy: model.evaluate_per_mapping(rows)?,
                    meta_accuracy: None,
                    selected_epoch: model.log.selected_epoch,
                });
            }
        }
    }
    Ok(results)
}

/// The full protocol over every seed. Failing seeds are recorded and the
/// remaining ones still run.
pub fn run_experiment(config: &ExperimentConfig, suite: &Suite) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let mut report = RunReport {
        config: config.clone(),
        results: Vec::new(),
        per_task: BTreeMap::new(),
        overall: None,
        failures: Vec::new(),
        checkpoints: Vec::new(),
        wall_clock_secs: 0.0,
    };
    for &seed in &config.seeds {
        match run_seed(config, suite, seed, &mut report.checkpoints) {
            Ok(rows) => report.results.extend(rows),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                report.failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    report.finish();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{}-report.json", config.name)), serde_json::to_vec_pretty(&report)?)?;
        fs::write(dir.join(format!("{}-report.tsv", config.name)), report.to_tsv())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub task: TaskId,
    /// `high` or `low`.
    pub rank_kind: String,
    pub rank: usize,
    pub uid: String,
    pub label: String,
    pub score: f64,
    pub text: String,
}

/// The `top_n` highest- and lowest-scored training instances of each task.
pub fn report_cases(state: &MetaLearnerState, train: &TaskSets, top_n: usize) -> Result<Vec<CaseRow>> {
    let mut rows = Vec::new();
    for task in &state.tasks {
        let examples = train.get(&task.task_id).ok_or_else(|| Error::EmptyDataset(task.task_id.to_string()))?;
        let mut scored = Vec::with_capacity(examples.len());
        for ex in examples {
            let s = state
                .scores
                .get(&ex.uid)
                .ok_or_else(|| Error::InvalidConfig(format!("no score for {}", ex.uid)))?;
            scored.push((s, ex));
        }
        let n = if top_n > scored.len() {
            log::warn!("top_n {top_n} exceeds {} examples of {}; clamping", scored.len(), task.task_id);
            scored.len()
        } else {
            top_n
        };
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.uid.cmp(&b.1.uid)));
        let text = |ex: &Example| match &ex.text_b {
            Some(b) => format!("{} ||| {}", ex.text_a.join(" "), b.join(" ")),
            None => ex.text_a.join(" "),
        };
        let mk = |kind: &str, rank: usize, (s, ex): &(f64, &Example)| CaseRow {
            task: task.task_id.clone(),
            rank_kind: kind.to_owned(),
            rank,
            uid: ex.uid.clone(),
            label: ex.label.clone(),
            score: *s,
            text: text(ex),
        };
        rows.extend(scored.iter().take(n).enumerate().map(|(i, c)| mk("high", i + 1, c)));
        rows.extend(scored.iter().rev().take(n).enumerate().map(|(i, c)| mk("low", i + 1, c)));
    }
    Ok(rows)
}

pub fn write_cases(path: &Path, rows: &[CaseRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "task\trank_kind\trank\tuid\tlabel\tscore\ttext")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.task, r.rank_kind, r.rank, r.uid, r.label, r.score, r.text
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Write one TSV row per example: uid, task, label and the comma-separated
/// mask-position embedding.
pub fn emit_embeddings(
    path: &Path,
    sets: &[(TaskId, Vec<Example>)],
    embed: impl Fn(&TaskId, &[Example]) -> Result<Vec<Vec<f64>>>,
) -> Result<usize> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut count = 0;
    for (task, examples) in sets {
        let vectors = embed(task, examples)?;
        for (ex, v) in examples.iter().zip(vectors) {
            let coords: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}\t{}\t{}\t{}", ex.uid, task, ex.label, coords.join(","))?;
            count += 1;
        }
    }
    out.flush()?;
    Ok(count)
}
