//! Pretraining on simulated prior draws and finetuning on a fixed dataset.
//!
//! The data for optimizer step `s` is a pure function of `(seed, s)`, so a
//! run can be stopped at any checkpoint and resumed bit-exactly. Work units
//! within a step are evaluated in parallel and reduced in a fixed order.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hawkes::{sample_instance, EventSequence, HawkesError, HawkesInstance, PriorConfig};
use crate::model::{Checkpoint, ModelConfig, ModelError, ModelWeights, Net, Predictor};
use crate::rng::{self, Domain};
use crate::simulator::{simulate_sequence, SimulationConfig, SimulationError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}; batch written to {}", dump.display())]
    NonFinite { step: u64, what: String, dump: PathBuf },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics: {0}")]
    Metrics(#[from] csv::Error),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_instances: usize,
    /// Sequences drawn per instance (`m + 1`).
    pub sequences_per_instance: usize,
    /// Sequences per instance scored as targets against the rest.
    pub targets_per_instance: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Learning rate at the end of the cosine decay, relative to the peak.
    pub min_lr_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Held-out evaluation interval when finetuning.
    pub eval_every: u64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_instances: 8,
            sequences_per_instance: 32,
            targets_per_instance: 4,
            warmup_steps: 100,
            peak_lr: 3e-4,
            min_lr_ratio: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            checkpoint_every: 0,
            eval_every: 50,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_instances == 0 {
            return bad("batch_instances must be positive".into());
        }
        if self.sequences_per_instance < 2 {
            return bad("sequences_per_instance must be at least 2".into());
        }
        if self.targets_per_instance == 0 || self.targets_per_instance >= self.sequences_per_instance {
            return bad(format!(
                "targets_per_instance must be in 1..{}",
                self.sequences_per_instance
            ));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("learning rates must be positive and min_lr_ratio in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn context_size(&self) -> usize {
        self.sequences_per_instance - self.targets_per_instance
    }

    /// Linear warmup to the peak, then cosine decay to `min_lr_ratio * peak`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let min = self.peak_lr * self.min_lr_ratio;
        min + (self.peak_lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    phase: Phase,
    step: u64,
    seed: u64,
    loss_ema: Option<f64>,
    config: TrainConfig,
}

/// Optimizer state. `step` doubles as the data cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub step: u64,
    pub weights: ModelWeights,
    pub adam_m: BTreeMap<String, Vec<f64>>,
    pub adam_v: BTreeMap<String, Vec<f64>>,
    /// Exponential moving average of loss per event.
    pub loss_ema: Option<f64>,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(phase: Phase, weights: ModelWeights, config: TrainConfig) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = weights
            .tensors()
            .iter()
            .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
            .collect();
        Self {
            phase,
            step: 0,
            weights,
            adam_m: zeros.clone(),
            adam_v: zeros,
            loss_ema: None,
            config,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.weights.clone());
        for (prefix, map) in [("adam.m.", &self.adam_m), ("adam.v.", &self.adam_v)] {
            for (name, values) in map {
                ck.extra.insert(format!("{prefix}{name}"), Tensor::vector(values.clone()));
            }
        }
        let meta = StateMeta {
            phase: self.phase,
            step: self.step,
            seed: self.config.seed,
            loss_ema: self.loss_ema,
            config: self.config.clone(),
        };
        ck.state = Some(serde_json::to_value(meta).expect("state serialises"));
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: StateMeta = ck
            .state
            .clone()
            .ok_or_else(|| TrainError::Resume("checkpoint carries no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| TrainError::Resume(e.to_string())))?;
        let mut state = Self::new(meta.phase, ck.weights, meta.config);
        state.step = meta.step;
        state.loss_ema = meta.loss_ema;
        for (prefix, map) in [("adam.m.", &mut state.adam_m), ("adam.v.", &mut state.adam_v)] {
            for (name, values) in map.iter_mut() {
                let t = ck
                    .extra
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| TrainError::Resume(format!("missing moment {prefix}{name}")))?;
                if t.numel() != values.len() {
                    return Err(TrainError::Resume(format!("moment {prefix}{name} has the wrong size")));
                }
                values.copy_from_slice(t.data());
            }
        }
        Ok(state)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(dir)?)
    }
}

/// Clips `grads` to global norm `cfg.grad_clip_norm`, then applies one
/// bias-corrected Adam update at learning rate `lr`. Returns the pre-clip norm.
pub fn adam_step(state: &mut TrainState, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<f64> {
    let cfg = &state.config;
    let mut sq = 0.0;
    for (name, t) in state.weights.tensors() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::InvalidConfig(format!("no gradient for `{name}`")))?;
        if g.len() != t.numel() {
            return Err(TrainError::InvalidConfig(format!("gradient for `{name}` has the wrong size")));
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            what: "gradient".into(),
            dump: PathBuf::new(),
        });
    }
    let clip = if norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };
    let t = (state.step + 1) as i32;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (adam_m, adam_v) = (&mut state.adam_m, &mut state.adam_v);
    for (name, w) in state.weights.tensors_mut() {
        let g = &grads[name];
        let m = adam_m.get_mut(name).expect("moments match weights");
        let v = adam_v.get_mut(name).expect("moments match weights");
        for (i, wi) in w.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            *wi -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(norm)
}

/// One context scored against several targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub context: Vec<EventSequence>,
    pub targets: Vec<EventSequence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<HawkesInstance>,
}

struct UnitResult {
    nll: f64,
    events: usize,
    grads: Vec<Vec<f64>>,
}

fn unit_gradient(weights: &ModelWeights, unit: &WorkUnit) -> std::result::Result<UnitResult, ModelError> {
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape, true)?;
    let net = Net::new(weights.config(), &bound);
    let (loss, parts) = net.forward_nll_targets(&mut tape, &unit.context, &unit.targets)?;
    let grads = tape.backward(loss)?;
    Ok(UnitResult {
        nll: tape.value(loss).item(),
        events: parts.iter().map(|p| p.events).sum(),
        grads: bound.iter().map(|(_, v)| grads.get(*v).into_data()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_per_event: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub events: usize,
}

/// Runtime options that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoints, metrics and failure dumps go here when set.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses the global rayon pool.
    pub threads: usize,
    /// Resume from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Log progress every this many steps (0 disables).
    pub log_every: u64,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    step: u64,
    loss_per_event: f64,
    grad_norm: f64,
    lr: f64,
    wall_time_s: f64,
}

fn append_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let exists = path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn dump_batch(opts: &RunOptions, step: u64, units: &[WorkUnit]) -> PathBuf {
    let dir = opts.out_dir.clone().unwrap_or_else(std::env::temp_dir);
    let path = dir.join(format!("nonfinite-step-{step}.json"));
    let written = fs::create_dir_all(&dir)
        .and_then(|_| fs::write(&path, serde_json::to_vec(units).unwrap_or_default()));
    if let Err(e) = written {
        warn!("could not write failure dump {}: {e}", path.display());
    }
    path
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(TensorError::NonFinite { .. }))
}

/// Gradient of the mean per-event NLL over `units`, reduced in unit order.
fn batch_gradient(weights: &ModelWeights, units: &[WorkUnit]) -> std::result::Result<(f64, usize, BTreeMap<String, Vec<f64>>), ModelError> {
    use rayon::prelude::*;
    let results: Vec<UnitResult> = units
        .par_iter()
        .map(|u| unit_gradient(weights, u))
        .collect::<std::result::Result<_, _>>()?;
    let events: usize = results.iter().map(|r| r.events).sum();
    let nll: f64 = results.iter().map(|r| r.nll).sum();
    let denom = events.max(1) as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = weights
        .tensors()
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
        .collect();
    for r in &results {
        for (acc, g) in grads.values_mut().zip(&r.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    for g in grads.values_mut() {
        g.iter_mut().for_each(|v| *v /= denom);
    }
    Ok((nll / denom, events, grads))
}

fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step-{step:07}"))
}

/// Runs optimizer steps from `state.step` to `state.config.steps`.
fn run_loop(
    state: &mut TrainState,
    opts: &RunOptions,
    units_for_step: &(dyn Fn(u64) -> Result<Vec<WorkUnit>> + Sync),
    on_step: &mut dyn FnMut(&TrainState, &StepStats) -> Result<()>,
) -> Result<()> {
    let started = Instant::now();
    let cfg = state.config.clone();
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.csv"));
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|source| TrainError::Io {
            path: d.clone(),
            source,
        })?;
    }
    while state.step < cfg.steps {
        let step = state.step;
        let units = units_for_step(step)?;
        let (loss, events, grads) = match batch_gradient(&state.weights, &units) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) => {
                return Err(TrainError::NonFinite {
                    step,
                    what: "loss".into(),
                    dump: dump_batch(opts, step, &units),
                })
            }
            Err(e) if is_non_finite(&e) => {
                return Err(TrainError::NonFinite {
                    step,
                    what: e.to_string(),
                    dump: dump_batch(opts, step, &units),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let lr = cfg.learning_rate(step);
        let grad_norm = match adam_step(state, &grads, lr) {
            Err(TrainError::NonFinite { what, .. }) => {
                return Err(TrainError::NonFinite {
                    step,
                    what,
                    dump: dump_batch(opts, step, &units),
                })
            }
            other => other?,
        };
        state.loss_ema = Some(match state.loss_ema {
            Some(e) => 0.98 * e + 0.02 * loss,
            None => loss,
        });
        let stats = StepStats {
            step,
            loss_per_event: loss,
            grad_norm,
            lr,
            events,
        };
        if let Some(p) = &metrics_path {
            append_rows(
                p,
                &[MetricsRow {
                    step,
                    loss_per_event: loss,
                    grad_norm,
                    lr,
                    wall_time_s: started.elapsed().as_secs_f64(),
                }],
            )?;
        }
        if opts.log_every > 0 && (step % opts.log_every == 0 || state.step == cfg.steps) {
            info!(
                "step {step}: loss/event {loss:.4} (ema {:.4}), grad norm {grad_norm:.3}, lr {lr:.2e}, {:.1}s",
                state.loss_ema.unwrap_or(loss),
                started.elapsed().as_secs_f64()
            );
        }
        on_step(state, &stats)?;
        if let Some(d) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
                state.save(&checkpoint_dir(d, state.step))?;
            }
        }
    }
    if let Some(d) = &opts.out_dir {
        state.save(&d.join("final"))?;
    }
    Ok(())
}

fn resume_or(opts: &RunOptions, phase: Phase, cfg: &TrainConfig, fresh: impl FnOnce() -> Result<TrainState>) -> Result<TrainState> {
    let Some(path) = &opts.resume else { return fresh() };
    let mut state = TrainState::from_checkpoint(Checkpoint::load(path)?)?;
    if state.phase != phase {
        return Err(TrainError::Resume(format!("checkpoint is from the {:?} phase", state.phase)));
    }
    let mut expected = cfg.clone();
    expected.steps = state.config.steps;
    expected.checkpoint_every = state.config.checkpoint_every;
    if expected != state.config {
        return Err(TrainError::Resume("training config differs from the checkpoint's".into()));
    }
    if cfg.steps != state.config.steps {
        return Err(TrainError::Resume(format!(
            "checkpoint was written for {} total steps, not {}",
            state.config.steps, cfg.steps
        )));
    }
    state.config = cfg.clone();
    info!("resuming at step {}", state.step);
    Ok(state)
}

/// Key for the sequence streams of instance `i` at `step`.
fn instance_key(step: u64, i: usize) -> u64 {
    (step << 20) | i as u64
}

/// Simulated work units for one pretraining step.
pub fn pretrain_units(prior: &PriorConfig, cfg: &TrainConfig, step: u64) -> Result<Vec<WorkUnit>> {
    use rayon::prelude::*;
    let sim = SimulationConfig {
        window_end: prior.window_end,
        seed: cfg.seed,
        ..SimulationConfig::default()
    };
    (0..cfg.batch_instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(cfg.seed, Domain::Pretrain, step, i as u64);
            let inst = sample_instance(prior, &mut rng)?;
            let n = cfg.sequences_per_instance;
            let seqs = (0..n)
                .map(|j| {
                    let mut r = rng::stream(cfg.seed, Domain::Sequence, instance_key(step, i), j as u64);
                    simulate_sequence(&inst, &sim, &mut r)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let chosen = index::sample(&mut rng, n, cfg.targets_per_instance).into_vec();
            Ok(split_unit(seqs, &chosen, Some(inst)))
        })
        .collect()
}

fn split_unit(seqs: Vec<EventSequence>, target_idx: &[usize], instance: Option<HawkesInstance>) -> WorkUnit {
    let mut unit = WorkUnit {
        context: Vec::new(),
        targets: Vec::new(),
        instance,
    };
    let mut is_target = vec![false; seqs.len()];
    target_idx.iter().for_each(|&i| is_target[i] = true);
    let mut targets: Vec<(usize, EventSequence)> = Vec::new();
    for (i, s) in seqs.into_iter().enumerate() {
        if is_target[i] {
            targets.push((i, s));
        } else {
            unit.context.push(s);
        }
    }
    // keep the sampled order of targets
    for &i in target_idx {
        let pos = targets.iter().position(|(j, _)| *j == i).expect("target present");
        unit.targets.push(targets.swap_remove(pos).1);
    }
    unit
}

/// Pretrains a fresh model (or resumes one) on freshly simulated prior draws.
pub fn pretrain(prior: &PriorConfig, model_cfg: &ModelConfig, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainState> {
    prior.validate()?;
    cfg.validate()?;
    model_cfg.validate()?;
    if prior.num_marks_range.1 > model_cfg.max_marks {
        return Err(TrainError::InvalidConfig(format!(
            "prior allows {} marks but the model supports {}",
            prior.num_marks_range.1, model_cfg.max_marks
        )));
    }
    let mut state = resume_or(opts, Phase::Pretrain, cfg, || {
        Ok(TrainState::new(Phase::Pretrain, ModelWeights::init(model_cfg.clone(), cfg.seed)?, cfg.clone()))
    })?;
    with_pool(opts.threads, || {
        run_loop(&mut state, opts, &|step| pretrain_units(prior, cfg, step), &mut |_, _| Ok(()))
    })??;
    Ok(state)
}

/// Pretrains from a fixed corpus: `groups[i]` are sequences of one instance.
pub fn pretrain_from_dataset(groups: &[Vec<EventSequence>], model_cfg: &ModelConfig, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainState> {
    cfg.validate()?;
    model_cfg.validate()?;
    let usable: Vec<&Vec<EventSequence>> = groups.iter().filter(|g| g.len() >= cfg.sequences_per_instance).collect();
    if usable.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "no instance has {} sequences; lower sequences_per_instance",
            cfg.sequences_per_instance
        )));
    }
    let mut state = resume_or(opts, Phase::Pretrain, cfg, || {
        Ok(TrainState::new(Phase::Pretrain, ModelWeights::init(model_cfg.clone(), cfg.seed)?, cfg.clone()))
    })?;
    let units = |step: u64| -> Result<Vec<WorkUnit>> {
        (0..cfg.batch_instances)
            .map(|i| {
                let mut rng = rng::stream(cfg.seed, Domain::Pretrain, step, i as u64);
                let g = usable[index::sample(&mut rng, usable.len(), 1).index(0)];
                Ok(sample_unit(g, cfg, &mut rng))
            })
            .collect()
    };
    with_pool(opts.threads, || run_loop(&mut state, opts, &units, &mut |_, _| Ok(())))??;
    Ok(state)
}

fn sample_unit(pool: &[EventSequence], cfg: &TrainConfig, rng: &mut impl rand::Rng) -> WorkUnit {
    let picked = index::sample(rng, pool.len(), cfg.sequences_per_instance).into_vec();
    let seqs: Vec<EventSequence> = picked.iter().map(|&i| pool[i].clone()).collect();
    let targets: Vec<usize> = (0..cfg.targets_per_instance).collect();
    split_unit(seqs, &targets, None)
}

/// Result of [`finetune`].
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub state: TrainState,
    /// Dataset indices available for training batches.
    pub train_ids: Vec<usize>,
    /// Dataset indices never used for training.
    pub holdout_ids: Vec<usize>,
    /// `(step, held-out NLL per event in original units)`.
    pub holdout_history: Vec<(u64, f64)>,
}

#[derive(Debug, Serialize)]
struct HoldoutRow {
    step: u64,
    holdout_nll_per_event: f64,
}

/// Deterministic train/held-out split of `n` sequence indices.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, Domain::Finetune, u64::MAX, 0);
    let order = index::sample(&mut rng, n, n).into_vec();
    let held = ((n as f64) * fraction).ceil() as usize;
    let held = if fraction > 0.0 { held.min(n) } else { 0 };
    let mut holdout = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    (train, holdout)
}

/// Held-out NLL per event (original units): every held-out sequence is
/// scored against the same `context`.
pub fn holdout_nll(weights: &ModelWeights, context: &[EventSequence], holdout: &[EventSequence]) -> Result<f64> {
    if holdout.is_empty() {
        return Ok(f64::NAN);
    }
    let mut p = Predictor::new(weights)?;
    let parts = p.nll_targets(context, holdout)?;
    let nll: f64 = parts.iter().map(|f| f.nll_original()).sum();
    let events: usize = parts.iter().map(|f| f.events).sum();
    Ok(nll / events.max(1) as f64)
}

/// Continues training `start` on a fixed dataset. A fraction of sequences is
/// held out, never sampled, and scored every `eval_every` steps against a
/// fixed context drawn from the training part.
pub fn finetune(start: &Checkpoint, dataset: &[EventSequence], cfg: &TrainConfig, opts: &RunOptions) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let model_cfg = start.weights.config();
    let k = dataset.first().map_or(0, EventSequence::num_marks);
    if let Some(s) = dataset.iter().find(|s| s.num_marks() != k) {
        return Err(TrainError::InvalidConfig(format!("dataset mixes {k} and {} marks", s.num_marks())));
    }
    if k > model_cfg.max_marks {
        return Err(TrainError::InvalidConfig(format!("dataset has {k} marks, model supports {}", model_cfg.max_marks)));
    }
    let (train_ids, holdout_ids) = holdout_split(dataset.len(), cfg.holdout_fraction, cfg.seed);
    let m1 = cfg.sequences_per_instance;
    if train_ids.len() < m1 {
        return Err(TrainError::InvalidConfig(format!(
            "{} training sequences cannot fill batches of {m1}; lower sequences_per_instance to at most {}",
            train_ids.len(),
            train_ids.len()
        )));
    }
    let train: Vec<EventSequence> = train_ids.iter().map(|&i| dataset[i].clone()).collect();
    let holdout: Vec<EventSequence> = holdout_ids.iter().map(|&i| dataset[i].clone()).collect();
    let eval_context: Vec<EventSequence> = train[..cfg.sequences_per_instance - 1].to_vec();

    let mut state = resume_or(opts, Phase::Finetune, cfg, || {
        Ok(TrainState::new(Phase::Finetune, start.weights.clone(), cfg.clone()))
    })?;
    if let Some(d) = &opts.out_dir {
        fs::create_dir_all(d).map_err(|source| TrainError::Io {
            path: d.clone(),
            source,
        })?;
    }
    let holdout_path = opts.out_dir.as_ref().map(|d| d.join("holdout.csv"));
    let mut history = Vec::new();
    let record = |state: &TrainState, history: &mut Vec<(u64, f64)>| -> Result<()> {
        let v = holdout_nll(&state.weights, &eval_context, &holdout)?;
        history.push((state.step, v));
        if let Some(p) = &holdout_path {
            append_rows(
                p,
                &[HoldoutRow {
                    step: state.step,
                    holdout_nll_per_event: v,
                }],
            )?;
        }
        info!("step {}: held-out NLL/event {v:.4}", state.step);
        Ok(())
    };
    if opts.resume.is_none() {
        record(&state, &mut history)?;
    }
    let units = |step: u64| -> Result<Vec<WorkUnit>> {
        Ok((0..cfg.batch_instances)
            .map(|i| {
                let mut rng = rng::stream(cfg.seed, Domain::Finetune, step, i as u64);
                sample_unit(&train, cfg, &mut rng)
            })
            .collect())
    };
    let total = cfg.steps;
    with_pool(opts.threads, || {
        run_loop(&mut state, opts, &units, &mut |s, _| {
            if (cfg.eval_every > 0 && s.step % cfg.eval_every == 0) || s.step == total {
                record(s, &mut history)?;
            }
            Ok(())
        })
    })??;
    Ok(FinetuneOutcome {
        state,
        train_ids,
        holdout_ids,
        holdout_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hawkes::BaseKind;
    use approx::assert_abs_diff_eq;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_seq_encoder: 1,
            n_layers_cross_encoder: 1,
            n_layers_decoder: 1,
            d_ff: 32,
            max_marks: 3,
            max_events: 64,
            share_embedding: true,
        }
    }

    fn tiny_train(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_instances: 2,
            sequences_per_instance: 6,
            targets_per_instance: 2,
            warmup_steps: if steps > 2 { 2 } else { 0 },
            peak_lr: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn tiny_prior() -> PriorConfig {
        PriorConfig {
            num_marks_range: (1, 2),
            window_end: 10.0,
            ..PriorConfig::default()
        }
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = ModelConfig {
            d_model: 2,
            n_heads: 1,
            d_ff: 1,
            max_marks: 1,
            max_events: 1,
            ..tiny_model()
        };
        let weights = ModelWeights::init(cfg, 0).unwrap();
        let mut state = TrainState::new(Phase::Pretrain, weights.clone(), TrainConfig::default());
        let zeros: BTreeMap<String, Vec<f64>> = weights.tensors().iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        adam_step(&mut state, &zeros, 0.1).unwrap();
        assert_eq!(state.weights, weights);
        assert_eq!(state.step, 1);

        // A single unit gradient on one scalar: global norm 1, so no clipping.
        let mut state = TrainState::new(Phase::Pretrain, weights.clone(), TrainConfig::default());
        let mut grads = zeros.clone();
        grads.get_mut("head.b1").unwrap()[0] = 1.0;
        let before = weights.get("head.b1").unwrap().data()[0];
        let norm = adam_step(&mut state, &grads, 0.1).unwrap();
        assert_eq!(norm, 1.0);
        let after = state.weights.get("head.b1").unwrap().data()[0];
        assert_abs_diff_eq!(after - before, -0.1, epsilon = 1e-8);
    }

    #[test]
    fn clipping_caps_the_update_norm() {
        let weights = ModelWeights::init(tiny_model(), 0).unwrap();
        let mut grads: BTreeMap<String, Vec<f64>> = weights.tensors().iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        grads.get_mut("head.b1").unwrap()[0] = 30.0;
        grads.get_mut("head.b1").unwrap()[1] = 40.0;
        let cfg = TrainConfig {
            adam_beta1: 0.0,
            adam_beta2: 0.0,
            adam_eps: 0.0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(Phase::Pretrain, weights.clone(), cfg);
        let norm = adam_step(&mut state, &grads, 1.0).unwrap();
        assert_eq!(norm, 50.0);
        // With zero betas the step is sign(g) regardless of scale; inspect moments instead.
        let m = &state.adam_m["head.b1"];
        assert_abs_diff_eq!((m[0] * m[0] + m[1] * m[1]).sqrt(), 1.0, epsilon = 1e-12);

        let mut bad = grads.clone();
        bad.get_mut("head.b1").unwrap()[0] = f64::NAN;
        assert!(matches!(adam_step(&mut state, &bad, 1.0), Err(TrainError::NonFinite { .. })));
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 110,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(cfg.learning_rate(0), 3e-5, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate(9), 3e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate(10), 3e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate(60), 0.55 * 3e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate(110), 3e-5, epsilon = 1e-15);
        assert!(TrainConfig { steps: 10, warmup_steps: 10, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let state = pretrain(&tiny_prior(), &tiny_model(), &tiny_train(0), &opts).unwrap();
        assert_eq!(state.step, 0);
        let ck = Checkpoint::load(&dir.path().join("final")).unwrap();
        assert_eq!(ck.weights, ModelWeights::init(tiny_model(), 5).unwrap());
    }

    #[test]
    fn deterministic_and_resumable() {
        let a_dir = tempfile::tempdir().unwrap();
        let b_dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 3,
            ..tiny_train(6)
        };
        let run = |dir: &Path, threads| {
            let opts = RunOptions {
                out_dir: Some(dir.to_path_buf()),
                threads,
                ..RunOptions::default()
            };
            pretrain(&tiny_prior(), &tiny_model(), &cfg, &opts).unwrap()
        };
        let a = run(a_dir.path(), 1);
        let b = run(b_dir.path(), 2);
        assert_eq!(a, b);
        assert_eq!(a.step, 6);

        let resumed = pretrain(
            &tiny_prior(),
            &tiny_model(),
            &cfg,
            &RunOptions {
                resume: Some(checkpoint_dir(a_dir.path(), 3)),
                threads: 1,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed, a);

        let metrics = fs::read_to_string(a_dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("step,loss_per_event,grad_norm,lr,wall_time_s"));
        assert_eq!(metrics.lines().count(), 7);

        let other = TrainConfig { peak_lr: 2e-3, ..cfg.clone() };
        let err = pretrain(
            &tiny_prior(),
            &tiny_model(),
            &other,
            &RunOptions {
                resume: Some(checkpoint_dir(a_dir.path(), 3)),
                ..RunOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Resume(_)));
    }

    #[test]
    fn pretrain_units_shapes() {
        let cfg = tiny_train(1);
        let units = pretrain_units(&tiny_prior(), &cfg, 0).unwrap();
        assert_eq!(units.len(), 2);
        for u in &units {
            assert_eq!(u.context.len(), 4);
            assert_eq!(u.targets.len(), 2);
        }
        assert_eq!(units, pretrain_units(&tiny_prior(), &cfg, 0).unwrap());
        assert_ne!(units, pretrain_units(&tiny_prior(), &cfg, 1).unwrap());
    }

    #[test]
    fn finetune_split_and_empty_budget() {
        let prior = PriorConfig {
            num_marks_range: (2, 2),
            base_kinds: vec![BaseKind::Constant],
            window_end: 10.0,
            ..PriorConfig::default()
        };
        let inst = crate::hawkes::sample_instance_at(&prior, 0).unwrap();
        let sim = SimulationConfig {
            window_end: 10.0,
            seed: 1,
            ..SimulationConfig::default()
        };
        let data = crate::simulator::simulate_dataset(&inst, 20, &sim, 0, 1).unwrap();
        let start = Checkpoint::new(ModelWeights::init(tiny_model(), 0).unwrap());

        let zero = finetune(&start, &data, &tiny_train(0), &RunOptions::default()).unwrap();
        assert_eq!(zero.state.weights, start.weights);
        assert_eq!(zero.holdout_ids.len(), 4);
        let mut all: Vec<usize> = zero.train_ids.iter().chain(&zero.holdout_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(zero.train_ids.iter().all(|i| !zero.holdout_ids.contains(i)));

        let cfg = TrainConfig {
            eval_every: 2,
            ..tiny_train(4)
        };
        let out = finetune(&start, &data, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.holdout_history.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2, 4]);

        let too_big = TrainConfig {
            sequences_per_instance: 17,
            ..tiny_train(1)
        };
        assert!(matches!(
            finetune(&start, &data, &too_big, &RunOptions::default()),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn training_batches_never_touch_holdout() {
        // Audit: tag every sequence by its window end and check the sampled units.
        let data: Vec<EventSequence> = (0..30).map(|i| EventSequence::empty(1.0 + i as f64, 1).unwrap()).collect();
        let cfg = tiny_train(5);
        let (train_ids, holdout_ids) = holdout_split(data.len(), cfg.holdout_fraction, cfg.seed);
        let train: Vec<EventSequence> = train_ids.iter().map(|&i| data[i].clone()).collect();
        for step in 0..20 {
            for i in 0..cfg.batch_instances {
                let mut rng = rng::stream(cfg.seed, Domain::Finetune, step, i as u64);
                let u = sample_unit(&train, &cfg, &mut rng);
                for s in u.context.iter().chain(&u.targets) {
                    let id = (s.window_end() - 1.0) as usize;
                    assert!(!holdout_ids.contains(&id));
                }
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut weights = ModelWeights::init(tiny_model(), 0).unwrap();
        for (name, t) in weights.tensors_mut() {
            if name == "head.b2" {
                t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
        let start = Checkpoint::new(weights);
        let data: Vec<EventSequence> = (0..10)
            .map(|i| EventSequence::new(vec![crate::hawkes::Event::new(0.5, 0)], 1.0 + i as f64, 1).unwrap())
            .collect();
        let cfg = TrainConfig {
            holdout_fraction: 0.0,
            ..tiny_train(1)
        };
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let err = finetune(&start, &data, &cfg, &opts).unwrap_err();
        match err {
            TrainError::NonFinite { dump, .. } => {
                let units: Vec<WorkUnit> = serde_json::from_slice(&fs::read(dump).unwrap()).unwrap();
                assert_eq!(units.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }
}
