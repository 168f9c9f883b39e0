//! Command-line front end: synthetic suites, meta-training, specialization,
//! evaluation, case reports, embedding export and full experiments.
//!
//! Relative output paths are placed under `$TRANSPROMPT_OUT` when it is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use transprompt::checkpoint;
use transprompt::data::{build_synthetic_suite, tokenize, write_dataset, DataFormat, Example, Suite, SuiteConfig, TaskId};
use transprompt::experiment::{self, load_suite, save_suite, ExperimentConfig};
use transprompt::mma::{split_sets, train_meta, MetaLearnerState, TrainConfig};
use transprompt::model::Mode;
use transprompt::tms::{self, adapt, generalize, AdaptConfig, SpecializedModel};

#[derive(Parser)]
#[command(name = "transprompt", version, about = "Transferable prompt-based few-shot text classification")]
struct Cli {
    /// Root directory for relative output paths.
    #[arg(long, env = "TRANSPROMPT_OUT", global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic task suite.
    Synth(SynthArgs),
    /// Meta-train over the suite's tasks.
    TrainMeta(TrainMetaArgs),
    /// Specialize a meta-learner to one of its tasks.
    Adapt(AdaptArgs),
    /// Specialize a meta-learner to a task it never saw.
    Generalize(GeneralizeArgs),
    /// Accuracy of a checkpoint on one task.
    Eval(EvalArgs),
    /// Highest- and lowest-scored training instances per task.
    ReportCases(ReportCasesArgs),
    /// Mask-position embeddings as TSV.
    EmitEmbeddings(EmbedArgs),
    /// Full protocol over seeds from a TOML config.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Similar,
    Distant,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Similar,
    Distant,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct SplitArgs {
    /// Suite JSON (from `synth`) or suite TOML.
    #[arg(long)]
    suite: PathBuf,
    /// Training examples per class.
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Seed of the few-shot split and of training.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct DebiasArgs {
    #[arg(long)]
    no_prototype: bool,
    #[arg(long)]
    no_entropy: bool,
    /// Both de-biasing terms off.
    #[arg(long)]
    no_debias: bool,
}

impl DebiasArgs {
    fn apply(&self, config: &mut TrainConfig) {
        if self.no_prototype || self.no_debias {
            config.prototype = false;
        }
        if self.no_entropy || self.no_debias {
            config.entropy = false;
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "similar")]
    preset: Preset,
    /// TOML suite config; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "suite.json")]
    out: PathBuf,
    /// Also write every task's pool and test set as TSV here.
    #[arg(long)]
    export_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainMetaArgs {
    #[command(flatten)]
    split: SplitArgs,
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[command(flatten)]
    debias: DebiasArgs,
    /// Tasks to leave out, comma separated.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    #[arg(long, default_value = "meta.json")]
    out: PathBuf,
    /// Per-epoch JSONL log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Final instance scores as TSV.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct SpecializeArgs {
    #[arg(long)]
    meta: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    task: String,
    /// TOML adaptation config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    common: SpecializeArgs,
}

#[derive(Args)]
struct GeneralizeArgs {
    #[command(flatten)]
    common: SpecializeArgs,
    /// Task type description; defaults to the task's group description.
    #[arg(long)]
    description: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Specialized or meta-learner checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Required for meta-learner checkpoints.
    #[arg(long)]
    task: Option<String>,
    #[arg(long = "on", value_enum, default_value = "test")]
    on: SplitArg,
}

#[derive(Args)]
struct ReportCasesArgs {
    #[arg(long)]
    meta: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 5)]
    top_n: usize,
    #[arg(long, default_value = "cases.tsv")]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    /// Restrict to one task; a specialized checkpoint always uses its own.
    #[arg(long)]
    task: Option<String>,
    #[arg(long = "on", value_enum, default_value = "test")]
    on: SplitArg,
    #[arg(long, default_value = "embeddings.tsv")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    debias: DebiasArgs,
}

struct Ctx {
    out_root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, path: &Path) -> Result<PathBuf> {
        let path = match &self.out_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn open_suite(path: &Path) -> Result<Suite> {
    load_suite(path).with_context(|| format!("loading suite {}", path.display()))
}

fn rows(suite: &Suite, split: &SplitArgs, task: &TaskId, on: SplitArg) -> Result<Vec<Example>> {
    if on == SplitArg::Test {
        return Ok(suite.data(task)?.test.clone());
    }
    let fs = transprompt::data::few_shot_sample(&suite.data(task)?.pool, suite.task(task)?, split.k, split.seed)?;
    Ok(if on == SplitArg::Train { fs.train } else { fs.dev })
}

fn synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let config = match (&args.config, args.preset) {
        (Some(path), _) => read_toml::<SuiteConfig>(path)?,
        (None, Preset::Similar) => SuiteConfig::similar(),
        (None, Preset::Distant) => SuiteConfig::distant(),
    };
    let suite = build_synthetic_suite(&config, args.seed.unwrap_or(config.seed))?;
    let out = ctx.out(&args.out)?;
    save_suite(&out, &suite)?;
    if let Some(dir) = &args.export_dir {
        for task in &suite.tasks {
            let data = suite.data(&task.task_id)?;
            let pool = ctx.out(&dir.join(format!("{}/train.tsv", task.task_id)))?;
            write_dataset(&pool, DataFormat::Tsv, &data.pool)?;
            let test = ctx.out(&dir.join(format!("{}/test.tsv", task.task_id)))?;
            write_dataset(&test, DataFormat::Tsv, &data.test)?;
        }
    }
    println!("wrote {} tasks, vocabulary {} to {}", suite.tasks.len(), suite.vocab.len(), out.display());
    Ok(())
}

fn train_meta_cmd(ctx: &Ctx, args: TrainMetaArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => read_toml::<TrainConfig>(path)?,
        None => TrainConfig::default(),
    };
    config.seed = args.split.seed;
    if let Some(mode) = args.mode {
        config.mode = match mode {
            ModeArg::Similar => Mode::Similar,
            ModeArg::Distant => Mode::Distant,
        };
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        config.learning_rate = lr;
    }
    args.debias.apply(&mut config);
    let suite = open_suite(&args.split.suite)?;
    for t in &args.exclude {
        suite.task(&TaskId(t.clone()))?;
    }
    let keep: Vec<TaskId> = suite
        .tasks
        .iter()
        .map(|t| t.task_id.clone())
        .filter(|t| !args.exclude.contains(&t.0))
        .collect();
    let suite = suite.restrict(&keep);
    let (train, dev) = split_sets(&suite.few_shot(args.split.k, args.split.seed)?);
    let (state, log) = train_meta(&suite.tasks, &suite.groups, &suite.vocab, &train, &dev, &config)?;
    let out = ctx.out(&args.out)?;
    checkpoint::save_meta(&out, &state)?;
    if let Some(path) = &args.log {
        log.write_jsonl(&ctx.out(path)?)?;
    }
    if let Some(path) = &args.scores {
        state.scores.export_tsv(&ctx.out(path)?)?;
    }
    if let Some(r) = log.records.last() {
        println!("epoch {} loss {:.4} dev {:?}", r.epoch, r.loss, r.dev_accuracy);
    }
    println!("meta-learner saved to {}", out.display());
    Ok(())
}

fn adapt_config(args: &SpecializeArgs) -> Result<AdaptConfig> {
    let mut config = match &args.config {
        Some(path) => read_toml::<AdaptConfig>(path)?,
        None => AdaptConfig::default(),
    };
    config.seed = args.split.seed;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    Ok(config)
}

fn save_specialized(ctx: &Ctx, out: &Path, model: &SpecializedModel) -> Result<()> {
    let out = ctx.out(out)?;
    checkpoint::save_specialized(&out, model)?;
    println!(
        "{} model for {} saved to {} (epoch {})",
        match model.kind {
            tms::Specialization::Adapt => "adapted",
            tms::Specialization::Generalize => "generalized",
        },
        model.task.task_id,
        out.display(),
        model.log.selected_epoch
    );
    Ok(())
}

fn adapt_cmd(ctx: &Ctx, args: AdaptArgs) -> Result<()> {
    let a = &args.common;
    let meta = checkpoint::load_meta(&a.meta)?;
    let suite = open_suite(&a.split.suite)?;
    let task = TaskId(a.task.clone());
    let split = transprompt::data::few_shot_sample(&suite.data(&task)?.pool, suite.task(&task)?, a.split.k, a.split.seed)?;
    let model = adapt(&meta, &task, &split, &adapt_config(a)?)?;
    save_specialized(ctx, &a.out, &model)
}

fn generalize_cmd(ctx: &Ctx, args: GeneralizeArgs) -> Result<()> {
    let a = &args.common;
    let meta = checkpoint::load_meta(&a.meta)?;
    let suite = open_suite(&a.split.suite)?;
    let task = suite.task(&TaskId(a.task.clone()))?;
    let description = match &args.description {
        Some(d) => tokenize(d),
        None => suite.group(&task.group_id)?.description_tokens.clone(),
    };
    for w in &description {
        if meta.model.vocab.get(w).is_none() {
            log::warn!("description word {w:?} is outside the meta-learner's vocabulary");
        }
    }
    let split = transprompt::data::few_shot_sample(&suite.data(&task.task_id)?.pool, task, a.split.k, a.split.seed)?;
    let model = generalize(&meta, task, &description, &split, &adapt_config(a)?)?;
    save_specialized(ctx, &a.out, &model)
}

enum Loaded {
    Meta(Box<MetaLearnerState>),
    Specialized(Box<SpecializedModel>),
}

fn load_any(path: &Path) -> Result<Loaded> {
    Ok(match checkpoint::kind_of(path)?.as_str() {
        "meta" => Loaded::Meta(Box::new(checkpoint::load_meta(path)?)),
        "specialized" => Loaded::Specialized(Box::new(checkpoint::load_specialized(path)?)),
        other => bail!("unknown checkpoint kind {other:?}"),
    })
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let suite = open_suite(&args.split.suite)?;
    let (task, accuracy, mapping) = match load_any(&args.model)? {
        Loaded::Specialized(model) => {
            let examples = rows(&suite, &args.split, &model.task.task_id, args.on)?;
            let acc = experiment::evaluate(&model, &examples)?;
            (model.task.task_id.clone(), acc, model.evaluate_per_mapping(&examples)?)
        }
        Loaded::Meta(meta) => {
            let Some(t) = &args.task else {
                bail!("--task is required with a meta-learner checkpoint");
            };
            let task = TaskId(t.clone());
            let examples = rows(&suite, &args.split, &task, args.on)?;
            let acc = meta.evaluate(&task, &examples)?;
            let mapping = tms::per_mapping_accuracy(&meta.model, &meta.route(&task)?, meta.task(&task)?, &examples)?;
            (task, acc, mapping)
        }
    };
    println!("task\taccuracy\tmapping_accuracy");
    println!("{task}\t{accuracy:.4}\t{mapping:.4}");
    Ok(())
}

fn report_cases_cmd(ctx: &Ctx, args: ReportCasesArgs) -> Result<()> {
    let meta = checkpoint::load_meta(&args.meta)?;
    let suite = open_suite(&args.split.suite)?;
    let ids: Vec<TaskId> = meta.tasks.iter().map(|t| t.task_id.clone()).collect();
    let (train, _) = split_sets(&suite.restrict(&ids).few_shot(args.split.k, args.split.seed)?);
    let cases = experiment::report_cases(&meta, &train, args.top_n)?;
    let out = ctx.out(&args.out)?;
    experiment::write_cases(&out, &cases)?;
    println!("{} cases written to {}", cases.len(), out.display());
    Ok(())
}

fn emit_embeddings_cmd(ctx: &Ctx, args: EmbedArgs) -> Result<()> {
    let suite = open_suite(&args.split.suite)?;
    let out = ctx.out(&args.out)?;
    let count = match load_any(&args.model)? {
        Loaded::Specialized(model) => {
            let examples = rows(&suite, &args.split, &model.task.task_id, args.on)?;
            experiment::emit_embeddings(&out, &[(model.task.task_id.clone(), examples)], |_, ex| model.embed(ex))?
        }
        Loaded::Meta(meta) => {
            let mut sets = Vec::new();
            for t in &meta.tasks {
                if args.task.as_ref().is_some_and(|only| *only != t.task_id.0) {
                    continue;
                }
                sets.push((t.task_id.clone(), rows(&suite, &args.split, &t.task_id, args.on)?));
            }
            if sets.is_empty() {
                bail!("no matching task in the meta-learner");
            }
            experiment::emit_embeddings(&out, &sets, |task, ex| meta.model.embed(&meta.route(task)?, ex))?
        }
    };
    println!("{count} embeddings written to {}", out.display());
    Ok(())
}

fn experiment_cmd(ctx: &Ctx, args: ExperimentArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(dir) = args.output_dir {
        config.output_dir = Some(dir);
    }
    if let Some(dir) = config.output_dir.take() {
        config.output_dir = Some(ctx.out(&dir.join("report"))?.parent().map(Path::to_path_buf).unwrap_or(dir));
    }
    if !args.seeds.is_empty() {
        config.seeds = args.seeds;
    }
    args.debias.apply(&mut config.train);
    let base = args.config.parent().unwrap_or(Path::new("."));
    let suite = config.suite.build(base)?;
    let report = experiment::run_experiment(&config, &suite)?;
    print!("{}", report.to_tsv());
    let failed: BTreeMap<u64, &str> = report.failures.iter().map(|f| (f.seed, f.error.as_str())).collect();
    for (seed, err) in &failed {
        eprintln!("seed {seed} failed: {err}");
    }
    println!("wall clock {:.1}s", report.wall_clock_secs);
    if report.results.is_empty() {
        bail!("every seed failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { out_root: cli.out_root };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::TrainMeta(a) => train_meta_cmd(&ctx, a),
        Command::Adapt(a) => adapt_cmd(&ctx, a),
        Command::Generalize(a) => generalize_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(a),
        Command::ReportCases(a) => report_cases_cmd(&ctx, a),
        Command::EmitEmbeddings(a) => emit_embeddings_cmd(&ctx, a),
        Command::Experiment(a) => experiment_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
