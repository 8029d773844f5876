use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;

use fimpp::eval::{self, EvalConfig, EvalError, ForecastConfig, GridSpec, HistorySpec};
use fimpp::hawkes::{Event, EventSequence, HawkesError, HawkesInstance, PriorConfig};
use fimpp::model::{Checkpoint, ModelConfig, ModelError};
use fimpp::store::{self, CsvImportOptions, Dataset, StoreError, Vocabulary};
use fimpp::trainer::{self, RunOptions, TrainConfig, TrainError};

#[derive(Parser, Debug)]
#[command(name = "fimpp", version, about = "In-context intensity estimation for marked temporal point processes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random draw; drawn from OS entropy and printed if omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config with optional sections: prior, model, train, finetune, eval, forecast, simulation.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file (see each command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Checkpoint directory to resume training from.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample instances from the prior and simulate a dataset with a ground-truth sidecar.
    Generate {
        #[arg(long)]
        instances: usize,
        /// Defaults to the config's `simulation.sequences_per_instance`.
        #[arg(long)]
        sequences_per_instance: Option<usize>,
    },
    /// Pretrain on fresh prior draws, or on a fixed dataset with --dataset.
    Train {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Continue training a checkpoint on a dataset with a held-out split.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write an intensity curve CSV (t, mark, lambda_hat, lambda_true).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        context: ContextArgs,
        /// `N` points on [0, T] or `start:end:N`.
        #[arg(long, default_value = "200")]
        grid: String,
    },
    /// Score a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Context sequences per instance.
        #[arg(long)]
        context_size: Option<usize>,
    },
    /// Sample future trajectories and next-event summaries as JSON.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        context: ContextArgs,
        #[arg(long, allow_hyphen_values = true)]
        horizon: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Forecast start; defaults to the last history event.
        #[arg(long)]
        start: Option<f64>,
    },
    /// Convert a CSV event log into a dataset.
    ImportCsv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "sequence_id")]
        sequence_column: String,
        #[arg(long, default_value = "time")]
        time_column: String,
        #[arg(long, default_value = "mark")]
        mark_column: String,
        /// Comma-separated mark labels in index order; default is first-seen order.
        #[arg(long)]
        vocabulary: Option<String>,
        #[arg(long)]
        window_end: Option<f64>,
        #[arg(long, default_value_t = 8)]
        max_marks: usize,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        /// Free-form note on the time unit stored in the manifest.
        #[arg(long)]
        time_unit: Option<String>,
    },
}

#[derive(Args, Debug)]
struct ContextArgs {
    /// Dataset whose sequences form the context.
    #[arg(long)]
    context: PathBuf,
    /// Only use sequences of this instance (and its ground truth).
    #[arg(long)]
    instance: Option<u64>,
    /// `empty`, `seq:<index>@prefix:<n>`, or a JSON list of {"t","k"} events.
    #[arg(long, default_value = "empty")]
    history: String,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulationSection {
    sequences_per_instance: usize,
    max_events: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            sequences_per_instance: 32,
            max_events: 10_000,
        }
    }
}

fn default_finetune() -> TrainConfig {
    TrainConfig {
        steps: 200,
        warmup_steps: 20,
        peak_lr: 1e-4,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    prior: PriorConfig,
    model: ModelConfig,
    train: TrainConfig,
    finetune: TrainConfig,
    eval: EvalConfig,
    forecast: ForecastConfig,
    simulation: SimulationSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            prior: PriorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: default_finetune(),
            eval: EvalConfig::default(),
            forecast: ForecastConfig::default(),
            simulation: SimulationSection::default(),
        }
    }
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0:#}")]
struct Usage(anyhow::Error);

fn usage<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> anyhow::Result<T> {
    r.map_err(|e| Usage(e.into()).into())
}

fn is_config_hawkes(e: &HawkesError) -> bool {
    matches!(e, HawkesError::InvalidConfig(_) | HawkesError::Unstable { .. })
}

fn is_config_model(e: &ModelError) -> bool {
    matches!(e, ModelError::InvalidConfig(_) | ModelError::Checkpoint { .. })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|c| {
        c.is::<Usage>()
            || c.downcast_ref::<HawkesError>().is_some_and(is_config_hawkes)
            || c.downcast_ref::<ModelError>().is_some_and(is_config_model)
            || c.downcast_ref::<TrainError>().is_some_and(|e| match e {
                TrainError::InvalidConfig(_) | TrainError::Resume(_) => true,
                TrainError::Hawkes(h) => is_config_hawkes(h),
                TrainError::Model(m) => is_config_model(m),
                _ => false,
            })
            || c.downcast_ref::<EvalError>().is_some_and(|e| match e {
                EvalError::Invalid(_) | EvalError::HistorySpec { .. } | EvalError::GridSpec { .. } => true,
                EvalError::Hawkes(h) => is_config_hawkes(h),
                EvalError::Model(m) => is_config_model(m),
                _ => false,
            })
            || c.downcast_ref::<StoreError>().is_some_and(|e| {
                matches!(e, StoreError::Rows { .. } | StoreError::Capacity { .. } | StoreError::Invalid { .. })
            })
    });
    if config {
        2
    } else {
        1
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = usage(fs::read_to_string(path).with_context(|| format!("reading config {}", path.display())))?;
    usage(serde_json::from_str(&text).with_context(|| format!("config {}", path.display())))
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn require_out(out: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    out.clone().ok_or_else(|| Usage(anyhow!("--out is required: {what}")).into())
}

/// Writes to `out` (atomically via a temp file) or to stdout.
fn emit(out: &Option<PathBuf>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let tmp = p.with_extension("tmp");
            fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
            fs::rename(&tmp, p).with_context(|| format!("writing {}", p.display()))?;
            Ok(())
        }
        None => {
            io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    usage(Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let r = store::read_dataset(path).with_context(|| format!("loading dataset {}", path.display()));
    match r {
        Err(e) if e.chain().any(|c| matches!(c.downcast_ref::<StoreError>(), Some(StoreError::Io { .. } | StoreError::Manifest { .. }))) => {
            Err(Usage(e).into())
        }
        other => other,
    }
}

/// Context sequences, conditioning history, and ground truth for infer/forecast.
struct Conditioning {
    context: Vec<EventSequence>,
    history: Vec<Event>,
    window_end: f64,
    instance: Option<HawkesInstance>,
}

fn conditioning(args: &ContextArgs) -> anyhow::Result<Conditioning> {
    let ds = load_dataset(&args.context)?;
    let spec: HistorySpec = usage(args.history.parse())?;
    let mut records: Vec<_> = ds
        .records
        .iter()
        .filter(|r| args.instance.is_none() || r.instance_id == args.instance)
        .cloned()
        .collect();
    if records.is_empty() {
        return Err(Usage(anyhow!("no context sequences{}", args.instance.map_or(String::new(), |i| format!(" for instance {i}")))).into());
    }
    let mut history = Vec::new();
    let mut window_end = records[0].sequence.window_end();
    let mut source_id = None;
    match spec {
        HistorySpec::Empty => {}
        HistorySpec::Inline(events) => history = events,
        HistorySpec::SequencePrefix { index, prefix } => {
            if index >= records.len() {
                bail!(Usage(anyhow!("history sequence {index} out of range; {} sequences available", records.len())));
            }
            // the conditioning sequence is not also part of the context
            let rec = records.remove(index);
            if prefix > rec.sequence.len() {
                bail!(Usage(anyhow!("prefix {prefix} exceeds the {} events of sequence {index}", rec.sequence.len())));
            }
            history = rec.sequence.events()[..prefix].to_vec();
            window_end = rec.sequence.window_end();
            source_id = rec.instance_id;
        }
    }
    let ids: std::collections::BTreeSet<Option<u64>> = records.iter().map(|r| r.instance_id).collect();
    let id = args.instance.or(source_id).or_else(|| if ids.len() == 1 { ids.into_iter().next().flatten() } else { None });
    let instance = id.and_then(|i| ds.instances.as_ref().and_then(|v| v.get(i as usize)).cloned());
    if instance.is_none() {
        warn!("no ground truth available; lambda_true is omitted");
    }
    Ok(Conditioning {
        context: records.into_iter().map(|r| r.sequence).collect(),
        history,
        window_end,
        instance,
    })
}

fn write_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    emit(out, &bytes)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let mut cfg = load_config(g.config.as_deref())?;
    match cli.command {
        Command::Generate {
            instances,
            sequences_per_instance,
        } => {
            let out = require_out(&g.out, "dataset directory")?;
            cfg.prior.seed = resolve_seed(g.seed);
            usage(cfg.prior.validate())?;
            let per = sequences_per_instance.unwrap_or(cfg.simulation.sequences_per_instance);
            let (records, inst) = eval::generate_corpus(&cfg.prior, instances, per, cfg.simulation.max_events, g.threads)?;
            let m = store::write_dataset(&out, &records, Some(&inst), None)?;
            info!("wrote {} sequences of {} instances to {}", m.count, inst.len(), out.display());
        }
        Command::Train { steps, dataset } => {
            let out = require_out(&g.out, "training output directory")?;
            cfg.train.seed = resolve_seed(g.seed);
            if let Some(s) = steps {
                cfg.train.steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s.saturating_sub(1));
            }
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                threads: g.threads,
                resume: g.resume.clone(),
                log_every: 10,
            };
            let state = match dataset {
                None => trainer::pretrain(&cfg.prior, &cfg.model, &cfg.train, &opts)?,
                Some(d) => {
                    let ds = load_dataset(&d)?;
                    trainer::pretrain_from_dataset(&ds.groups(), &cfg.model, &cfg.train, &opts)?
                }
            };
            info!("finished at step {}; checkpoint in {}", state.step, out.join("final").display());
        }
        Command::Finetune {
            checkpoint,
            dataset,
            steps,
        } => {
            let out = require_out(&g.out, "finetuning output directory")?;
            cfg.finetune.seed = resolve_seed(g.seed);
            if let Some(s) = steps {
                cfg.finetune.steps = s;
                cfg.finetune.warmup_steps = cfg.finetune.warmup_steps.min(s.saturating_sub(1));
            }
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                threads: g.threads,
                resume: g.resume.clone(),
                log_every: 10,
            };
            let res = trainer::finetune(&ck, &ds.sequences(), &cfg.finetune, &opts)?;
            let split = serde_json::json!({
                "train_ids": res.train_ids,
                "holdout_ids": res.holdout_ids,
                "holdout_nll_per_event": res.holdout_history,
            });
            fs::write(out.join("split.json"), serde_json::to_vec_pretty(&split)?)?;
            if let (Some(first), Some(last)) = (res.holdout_history.first(), res.holdout_history.last()) {
                info!("held-out NLL/event {:.4} -> {:.4}", first.1, last.1);
            }
        }
        Command::Infer { checkpoint, context, grid } => {
            let ck = load_checkpoint(&checkpoint)?;
            let grid: GridSpec = usage(grid.parse())?;
            let c = conditioning(&context)?;
            let times = grid.times(c.window_end);
            let curve = eval::intensity_curve(&ck.weights, &c.context, &c.history, &times, c.instance.as_ref())?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["t", "mark", "lambda_hat", "lambda_true"])?;
            for p in &curve {
                w.write_record([
                    p.t.to_string(),
                    p.mark.to_string(),
                    p.lambda_hat.to_string(),
                    p.lambda_true.map_or(String::new(), |v| v.to_string()),
                ])?;
            }
            emit(&g.out, &w.into_inner()?)?;
        }
        Command::Eval {
            checkpoint,
            dataset,
            context_size,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            if ds.instances.is_none() {
                warn!("dataset has no ground-truth sidecar; reporting model-side metrics only");
            }
            cfg.eval.seed = resolve_seed(g.seed);
            if let Some(m) = context_size {
                cfg.eval.context_size = m;
            }
            let run = || eval::evaluate_dataset(&ck.weights, &ds, &cfg.eval);
            let report = if g.threads == 0 {
                run()?
            } else {
                rayon::ThreadPoolBuilder::new().num_threads(g.threads).build()?.install(run)?
            };
            write_json(&g.out, &report)?;
        }
        Command::Forecast {
            checkpoint,
            context,
            horizon,
            samples,
            start,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            cfg.forecast.seed = resolve_seed(g.seed);
            if let Some(h) = horizon {
                cfg.forecast.horizon = h;
            }
            if let Some(n) = samples {
                cfg.forecast.samples = n;
            }
            if start.is_some() {
                cfg.forecast.start = start;
            }
            let c = conditioning(&context)?;
            let f = eval::forecast(&ck.weights, &c.context, &c.history, &cfg.forecast)?;
            write_json(&g.out, &f)?;
        }
        Command::ImportCsv {
            input,
            sequence_column,
            time_column,
            mark_column,
            vocabulary,
            window_end,
            max_marks,
            delimiter,
            time_unit,
        } => {
            let out = require_out(&g.out, "dataset directory")?;
            if !delimiter.is_ascii() {
                bail!(Usage(anyhow!("delimiter must be a single ASCII character")));
            }
            let opts = CsvImportOptions {
                sequence_column,
                time_column,
                mark_column,
                vocabulary: vocabulary.map_or(Vocabulary::FirstSeen, |v| Vocabulary::Fixed(v.split(',').map(|s| s.trim().to_owned()).collect())),
                window_end,
                max_marks,
                delimiter: delimiter as u8,
            };
            let imported = match store::import_csv_file(&input, &opts) {
                Err(e @ StoreError::Io { .. }) => return Err(Usage(e.into()).into()),
                other => other?,
            };
            let records: Vec<_> = imported.sequences.into_iter().map(|s| store::SequenceRecord::new(s, None)).collect();
            let m = store::write_dataset(&out, &records, None, time_unit.as_deref())?;
            fs::write(out.join("vocabulary.json"), serde_json::to_vec_pretty(&serde_json::json!({
                "marks": imported.vocabulary,
                "sequence_ids": imported.sequence_ids,
            }))?)?;
            if imported.ties_jittered > 0 {
                warn!("{} tied timestamps were separated", imported.ties_jittered);
            }
            info!("imported {} sequences with K = {}", m.count, m.num_marks);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
