//! The inference network.
//!
//! A context of event sequences is embedded and encoded in two stages: a
//! per-sequence transformer whose summary-token output represents each
//! sequence, then a transformer over those summaries with no positional
//! information. A causal decoder reads the target history, cross-attends to
//! the context, and a small MLP maps each position to per-mark
//! `(mu, alpha, beta)` for the following inter-event interval.
//!
//! All times are divided by a context-derived scale before they reach the
//! network, and predicted intensities are mapped back on the way out.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hawkes::{Event, EventSequence, HawkesError};
use crate::likelihood::{interval_targets, packed_nll_with_grad, IntensityParams, LikelihoodError};
use crate::rng::{self, Domain};
use crate::tensor::{softplus_inverse, AttentionSegment, Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_FORMAT: &str = "fimpp-checkpoint-v1";
const MANIFEST_FILE: &str = "manifest.json";
const TENSORS_FILE: &str = "tensors.bin";
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("weight `{name}` has shape {found:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_seq_encoder: usize,
    pub n_layers_cross_encoder: usize,
    pub n_layers_decoder: usize,
    pub d_ff: usize,
    pub max_marks: usize,
    pub max_events: usize,
    /// Encoder and decoder use the same event embedding.
    pub share_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers_seq_encoder: 2,
            n_layers_cross_encoder: 2,
            n_layers_decoder: 2,
            d_ff: 128,
            max_marks: 8,
            max_events: 256,
            share_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_seq_encoder", self.n_layers_seq_encoder),
            ("n_layers_cross_encoder", self.n_layers_cross_encoder),
            ("n_layers_decoder", self.n_layers_decoder),
            ("d_ff", self.d_ff),
            ("max_marks", self.max_marks),
            ("max_events", self.max_events),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::InvalidConfig(format!("d_model {} must be even", self.d_model)));
        }
        Ok(())
    }

    fn embed_prefix(&self, decoder: bool) -> &'static str {
        if decoder && !self.share_embedding {
            "dec_embed"
        } else {
            "embed"
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform(usize),
    Zeros,
    Ones,
    Const(f64),
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, k3) = (cfg.d_model, cfg.d_ff, 3 * cfg.max_marks);
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    let embeds: &[&str] = if cfg.share_embedding { &["embed"] } else { &["embed", "dec_embed"] };
    for p in embeds {
        add(format!("{p}.delta"), vec![1, d], Init::Uniform(1));
        add(format!("{p}.marks"), vec![cfg.max_marks, d], Init::Uniform(cfg.max_marks));
        add(format!("{p}.mix"), vec![3 * d, d], Init::Uniform(3 * d));
        add(format!("{p}.mix_bias"), vec![d], Init::Zeros);
        add(format!("{p}.summary"), vec![1, d], Init::Uniform(1));
    }
    let norm = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        add(format!("{p}.gain"), vec![d], Init::Ones);
        add(format!("{p}.bias"), vec![d], Init::Zeros);
    };
    let attn = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        for w in ["q", "k", "v", "o"] {
            add(format!("{p}.w{w}"), vec![d, d], Init::Uniform(d));
            add(format!("{p}.b{w}"), vec![d], Init::Zeros);
        }
    };
    let ff = |add: &mut dyn FnMut(String, Vec<usize>, Init), p: String| {
        add(format!("{p}.w1"), vec![d, f], Init::Uniform(d));
        add(format!("{p}.b1"), vec![f], Init::Zeros);
        add(format!("{p}.w2"), vec![f, d], Init::Uniform(f));
        add(format!("{p}.b2"), vec![d], Init::Zeros);
    };
    for (stack, layers) in [("seq_enc", cfg.n_layers_seq_encoder), ("ctx_enc", cfg.n_layers_cross_encoder)] {
        for l in 0..layers {
            norm(&mut add, format!("{stack}.{l}.ln1"));
            attn(&mut add, format!("{stack}.{l}.attn"));
            norm(&mut add, format!("{stack}.{l}.ln2"));
            ff(&mut add, format!("{stack}.{l}.ff"));
        }
        norm(&mut add, format!("{stack}.ln_final"));
    }
    for l in 0..cfg.n_layers_decoder {
        norm(&mut add, format!("dec.{l}.ln1"));
        attn(&mut add, format!("dec.{l}.self_attn"));
        norm(&mut add, format!("dec.{l}.ln2"));
        attn(&mut add, format!("dec.{l}.cross_attn"));
        norm(&mut add, format!("dec.{l}.ln3"));
        ff(&mut add, format!("dec.{l}.ff"));
    }
    norm(&mut add, "dec.ln_final".into());
    add("head.w1".into(), vec![d, d], Init::Uniform(d));
    add("head.b1".into(), vec![d], Init::Zeros);
    add("head.w2".into(), vec![d, k3], Init::Uniform(d));
    add("head.b2".into(), vec![k3], Init::Const(softplus_inverse(1.0)));
    out
}

/// Named parameter tensors plus the config that fixes their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    /// Fresh weights; tensor `i` of the layout draws from stream `(seed, Init, 0, i)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        use rand::Rng;
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (i, (name, shape, init)) in layout(&config).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut r = rng::stream(seed, Domain::Init, 0, i as u64);
                    (0..n).map(|_| r.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, tensors })
    }

    /// Checks names and shapes against the config's layout.
    pub fn from_parts(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        for (name, shape, _) in &expected {
            let t = tensors.get(name).ok_or_else(|| ModelError::MissingWeight(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::WeightShape {
                    name: name.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
            if !t.is_finite() {
                return Err(ModelError::InvalidConfig(format!("weight `{name}` is not finite")));
            }
        }
        if tensors.len() != expected.len() {
            let extra = tensors
                .keys()
                .find(|k| !expected.iter().any(|(n, _, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::InvalidConfig(format!("unexpected weight `{extra}`")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Mutable access for optimizers; shapes must not change.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingWeight(name.to_string()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces the parameter head with constants: every position emits
    /// `(mu, alpha, beta)` = `per_mark[k]` in normalised time, zeros beyond.
    pub fn with_constant_head(mut self, per_mark: &[(f64, f64, f64)]) -> Result<Self> {
        let k3 = 3 * self.config.max_marks;
        if per_mark.len() > self.config.max_marks {
            return Err(ModelError::InvalidConfig(format!(
                "{} marks exceed max_marks {}",
                per_mark.len(),
                self.config.max_marks
            )));
        }
        // softplus of this is exactly zero in f64
        let raw = |v: f64| if v > 0.0 { softplus_inverse(v) } else { -800.0 };
        let mut bias = vec![raw(0.0); k3];
        for (k, &(mu, alpha, beta)) in per_mark.iter().enumerate() {
            bias[3 * k] = raw(mu);
            bias[3 * k + 1] = raw(alpha);
            bias[3 * k + 2] = raw(beta);
        }
        let d = self.config.d_model;
        self.tensors.insert("head.w2".into(), Tensor::zeros(vec![d, k3]));
        self.tensors.insert("head.b2".into(), Tensor::vector(bias));
        Ok(self)
    }

    /// Places every weight on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundWeights> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                tape.leaf(t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(BoundWeights { vars })
    }
}

/// Tape handles for a [`ModelWeights`].
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: BTreeMap<String, Var>,
}

impl BoundWeights {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// `sum T / sum n` over the context (the mean inter-event gap), 1 if the
/// context has no events.
pub fn context_time_scale(context: &[EventSequence]) -> f64 {
    let events: usize = context.iter().map(EventSequence::len).sum();
    let span: f64 = context.iter().map(EventSequence::window_end).sum();
    if events == 0 || !(span > 0.0) {
        1.0
    } else {
        span / events as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextBatch {
    pub context: Vec<EventSequence>,
    pub target: EventSequence,
    pub time_scale: f64,
}

impl ContextBatch {
    pub fn new(context: Vec<EventSequence>, target: EventSequence) -> Result<Self> {
        let time_scale = context_time_scale(&context);
        let batch = Self {
            context,
            target,
            time_scale,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() {
            return Err(ModelError::InvalidBatch("context is empty".into()));
        }
        let k = self.target.num_marks();
        if let Some(s) = self.context.iter().find(|s| s.num_marks() != k) {
            return Err(ModelError::InvalidBatch(format!(
                "context sequence has {} marks, target has {k}",
                s.num_marks()
            )));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(ModelError::InvalidBatch(format!("time scale {}", self.time_scale)));
        }
        Ok(())
    }

    pub fn num_marks(&self) -> usize {
        self.target.num_marks()
    }
}

/// Sinusoidal features of a normalised time, `d` columns.
fn time_encoding(t: f64, d: usize, out: &mut [f64]) {
    let pairs = d / 2;
    for i in 0..pairs {
        let freq = (-(2.0 * i as f64 / d as f64) * 10_000f64.ln()).exp();
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
}

/// Network operations over tape-bound weights.
pub struct Net<'a> {
    cfg: &'a ModelConfig,
    w: &'a BoundWeights,
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, w: &'a BoundWeights) -> Self {
        Self { cfg, w }
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.w.get(w)?)?;
        Ok(tape.add_row(y, self.w.get(b)?)?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, p: &str) -> Result<Var> {
        let gain = self.w.get(&format!("{p}.gain"))?;
        let bias = self.w.get(&format!("{p}.bias"))?;
        Ok(tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }

    fn attention(&self, tape: &mut Tape, xq: Var, xkv: Var, p: &str, segments: &[AttentionSegment]) -> Result<Var> {
        let q = self.linear(tape, xq, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = self.linear(tape, xkv, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let v = self.linear(tape, xkv, &format!("{p}.wv"), &format!("{p}.bv"))?;
        let a = tape.attention(q, k, v, self.cfg.n_heads, segments)?;
        self.linear(tape, a, &format!("{p}.wo"), &format!("{p}.bo"))
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, p: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let h = tape.gelu(h)?;
        self.linear(tape, h, &format!("{p}.w2"), &format!("{p}.b2"))
    }

    fn encoder_block(&self, tape: &mut Tape, x: Var, p: &str, segments: &[AttentionSegment]) -> Result<Var> {
        let h = self.norm(tape, x, &format!("{p}.ln1"))?;
        let a = self.attention(tape, h, h, &format!("{p}.attn"), segments)?;
        let x = tape.add(x, a)?;
        let h = self.norm(tape, x, &format!("{p}.ln2"))?;
        let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
        Ok(tape.add(x, f)?)
    }

    /// Embeds several event lists into one stacked matrix. Each list
    /// contributes a summary row followed by one row per event; the returned
    /// ranges locate each list's rows. `prior_times[j]` is the time of the
    /// event preceding list `j` (0 if none) so truncated lists keep true gaps.
    fn embed(&self, tape: &mut Tape, lists: &[(&[Event], f64)], time_scale: f64, decoder: bool) -> Result<(Var, Vec<Range<usize>>)> {
        let d = self.cfg.d_model;
        let kmax = self.cfg.max_marks;
        let p = self.cfg.embed_prefix(decoder);
        let n_events: usize = lists.iter().map(|(e, _)| e.len()).sum();
        let summary = self.w.get(&format!("{p}.summary"))?;

        let mixed = if n_events > 0 {
            let mut delta = Vec::with_capacity(n_events);
            let mut onehot = vec![0.0; n_events * kmax];
            let mut sinus = vec![0.0; n_events * d];
            let mut row = 0;
            for (events, prior) in lists {
                let mut last = *prior;
                for e in *events {
                    if e.mark >= kmax {
                        return Err(ModelError::InvalidBatch(format!("mark {} exceeds max_marks {kmax}", e.mark)));
                    }
                    delta.push(((e.time - last) / time_scale).ln_1p());
                    onehot[row * kmax + e.mark] = 1.0;
                    time_encoding(e.time / time_scale, d, &mut sinus[row * d..(row + 1) * d]);
                    last = e.time;
                    row += 1;
                }
            }
            let delta = tape.constant(Tensor::matrix(n_events, 1, delta)?)?;
            let onehot = tape.constant(Tensor::matrix(n_events, kmax, onehot)?)?;
            let sinus = tape.constant(Tensor::matrix(n_events, d, sinus)?)?;
            let fd = tape.matmul(delta, self.w.get(&format!("{p}.delta"))?)?;
            let fm = tape.matmul(onehot, self.w.get(&format!("{p}.marks"))?)?;
            let features = tape.concat_cols(&[fd, fm, sinus])?;
            Some(self.linear(tape, features, &format!("{p}.mix"), &format!("{p}.mix_bias"))?)
        } else {
            None
        };

        let mut parts = Vec::with_capacity(2 * lists.len());
        let mut ranges = Vec::with_capacity(lists.len());
        let (mut src, mut dst) = (0, 0);
        for (events, _) in lists {
            parts.push(summary);
            if let (Some(m), false) = (mixed, events.is_empty()) {
                parts.push(tape.slice(m, src..src + events.len(), 0..d)?);
            }
            ranges.push(dst..dst + events.len() + 1);
            src += events.len();
            dst += events.len() + 1;
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        Ok((x, ranges))
    }

    /// The most recent `max_events` events and the time of the event before them.
    fn recent<'e>(&self, events: &'e [Event]) -> ((&'e [Event], f64), bool) {
        let cap = self.cfg.max_events;
        if events.len() <= cap {
            ((events, 0.0), false)
        } else {
            let cut = events.len() - cap;
            ((&events[cut..], events[cut - 1].time), true)
        }
    }

    /// `[n + 1, d_model]` embedding of one sequence (summary row first).
    pub fn embed_sequence(&self, tape: &mut Tape, seq: &EventSequence, time_scale: f64) -> Result<(Var, bool)> {
        let (list, truncated) = self.recent(seq.events());
        let (x, _) = self.embed(tape, &[list], time_scale, false)?;
        Ok((x, truncated))
    }

    /// `[m, d_model]` context representation; the flag reports whether any
    /// context sequence was truncated to its most recent events.
    pub fn encode_context(&self, tape: &mut Tape, context: &[EventSequence], time_scale: f64) -> Result<(Var, bool)> {
        if context.is_empty() {
            return Err(ModelError::InvalidBatch("context is empty".into()));
        }
        let mut truncated = false;
        let lists: Vec<(&[Event], f64)> = context
            .iter()
            .map(|s| {
                let (l, t) = self.recent(s.events());
                truncated |= t;
                l
            })
            .collect();
        let (mut x, ranges) = self.embed(tape, &lists, time_scale, false)?;
        let segments: Vec<AttentionSegment> = ranges
            .iter()
            .map(|r| AttentionSegment {
                queries: r.clone(),
                keys: r.clone(),
                causal: false,
            })
            .collect();
        for l in 0..self.cfg.n_layers_seq_encoder {
            x = self.encoder_block(tape, x, &format!("seq_enc.{l}"), &segments)?;
        }
        let d = self.cfg.d_model;
        let heads: Vec<Var> = ranges
            .iter()
            .map(|r| tape.slice(x, r.start..r.start + 1, 0..d))
            .collect::<std::result::Result<_, _>>()?;
        let summaries = if heads.len() == 1 { heads[0] } else { tape.concat_rows(&heads)? };
        let mut y = self.norm(tape, summaries, "seq_enc.ln_final")?;
        let all = [AttentionSegment {
            queries: 0..context.len(),
            keys: 0..context.len(),
            causal: false,
        }];
        for l in 0..self.cfg.n_layers_cross_encoder {
            y = self.encoder_block(tape, y, &format!("ctx_enc.{l}"), &all)?;
        }
        Ok((self.norm(tape, y, "ctx_enc.ln_final")?, truncated))
    }

    /// Per-position history embeddings `[n + 1, d_model]`: row `i` has seen
    /// the first `i` events. Requires `events.len() <= max_events`.
    pub fn decode(&self, tape: &mut Tape, events: &[Event], context_repr: Var, time_scale: f64) -> Result<Var> {
        if events.len() > self.cfg.max_events {
            return Err(ModelError::InvalidBatch(format!(
                "history of {} events exceeds max_events {}",
                events.len(),
                self.cfg.max_events
            )));
        }
        let (mut x, _) = self.embed(tape, &[(events, 0.0)], time_scale, true)?;
        let n = events.len() + 1;
        let m = tape.shape(context_repr)[0];
        let causal = [AttentionSegment {
            queries: 0..n,
            keys: 0..n,
            causal: true,
        }];
        let cross = [AttentionSegment {
            queries: 0..n,
            keys: 0..m,
            causal: false,
        }];
        for l in 0..self.cfg.n_layers_decoder {
            let p = format!("dec.{l}");
            let h = self.norm(tape, x, &format!("{p}.ln1"))?;
            let a = self.attention(tape, h, h, &format!("{p}.self_attn"), &causal)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln2"))?;
            let a = self.attention(tape, h, context_repr, &format!("{p}.cross_attn"), &cross)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &format!("{p}.ln3"))?;
            let f = self.feed_forward(tape, h, &format!("{p}.ff"))?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, x, "dec.ln_final")
    }

    /// `[rows, 3 * max_marks]` positive parameters, `(mu, alpha, beta)` per mark.
    pub fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let z = self.linear(tape, h, "head.w1", "head.b1")?;
        let z = tape.gelu(z)?;
        let z = self.linear(tape, z, "head.w2", "head.b2")?;
        Ok(tape.softplus(z)?)
    }

    /// Summed NLL of the target in normalised time, as a differentiable scalar.
    pub fn forward_nll(&self, tape: &mut Tape, batch: &ContextBatch) -> Result<ForwardNll> {
        batch.validate()?;
        let (loss, mut parts) = self.forward_nll_targets(tape, &batch.context, std::slice::from_ref(&batch.target))?;
        let mut out = parts.pop().expect("one target");
        out.loss = loss;
        Ok(out)
    }

    /// Scores several targets against one encoding of `context`. Returns the
    /// summed loss and per-target terms.
    pub fn forward_nll_targets(
        &self,
        tape: &mut Tape,
        context: &[EventSequence],
        targets: &[EventSequence],
    ) -> Result<(Var, Vec<ForwardNll>)> {
        let k = context.first().map_or(0, EventSequence::num_marks);
        if let Some(s) = context.iter().chain(targets).find(|s| s.num_marks() != k) {
            return Err(ModelError::InvalidBatch(format!("mixed mark counts {} and {k}", s.num_marks())));
        }
        if k > self.cfg.max_marks {
            return Err(ModelError::InvalidBatch(format!("{k} marks exceed max_marks {}", self.cfg.max_marks)));
        }
        if targets.is_empty() {
            return Err(ModelError::InvalidBatch("no targets".into()));
        }
        let s = context_time_scale(context);
        let (ctx, context_truncated) = self.encode_context(tape, context, s)?;
        let mut parts = Vec::with_capacity(targets.len());
        let mut total: Option<Var> = None;
        for full in targets {
            let target = crop_target(full, self.cfg.max_events);
            let h = self.decode(tape, target.events(), ctx, s)?;
            let params = self.head(tape, h)?;
            let intervals = interval_targets(&target, s);
            let (value, grad) = packed_nll_with_grad(tape.value(params).data(), 3 * self.cfg.max_marks, k, &intervals)?;
            let loss = tape.scalar_fn(params, value, grad)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
            parts.push(ForwardNll {
                loss,
                nll_normalized: value,
                events: target.len(),
                time_scale: s,
                target_cropped: target.len() < full.len(),
                context_truncated,
            });
        }
        Ok((total.expect("at least one target"), parts))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardNll {
    pub loss: Var,
    pub nll_normalized: f64,
    pub events: usize,
    pub time_scale: f64,
    pub target_cropped: bool,
    pub context_truncated: bool,
}

impl ForwardNll {
    /// NLL in the original time unit.
    pub fn nll_original(&self) -> f64 {
        self.nll_normalized + self.events as f64 * self.time_scale.ln()
    }
}

/// A target longer than `max_events` is scored on the window that ends at
/// its first dropped event.
pub fn crop_target(target: &EventSequence, max_events: usize) -> EventSequence {
    if target.len() <= max_events {
        return target.clone();
    }
    let end = target.events()[max_events].time;
    EventSequence::new(target.events()[..max_events].to_vec(), end, target.num_marks())
        .expect("a prefix of a valid sequence is valid")
}

/// Encoded context kept for repeated history queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding {
    pub repr: Tensor,
    pub time_scale: f64,
    pub num_marks: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEmbedding {
    pub vector: Tensor,
    pub history_length: usize,
    /// In original time units.
    pub last_event_time: f64,
    pub time_scale: f64,
    pub num_marks: usize,
}

/// Read-only inference over fixed weights. Reuses one tape across queries.
pub struct Predictor<'a> {
    weights: &'a ModelWeights,
    tape: Tape,
    bound: BoundWeights,
    base_len: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(weights: &'a ModelWeights) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = weights.bind(&mut tape, false)?;
        let base_len = tape.len();
        Ok(Self {
            weights,
            tape,
            bound,
            base_len,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    fn reset(&mut self) -> Net<'_> {
        self.tape.truncate(self.base_len);
        Net::new(self.weights.config(), &self.bound)
    }

    pub fn encode_context(&mut self, context: &[EventSequence]) -> Result<ContextEncoding> {
        let num_marks = context.first().map_or(0, EventSequence::num_marks);
        if let Some(s) = context.iter().find(|s| s.num_marks() != num_marks) {
            return Err(ModelError::InvalidBatch(format!("mixed mark counts {} and {num_marks}", s.num_marks())));
        }
        if num_marks > self.config().max_marks {
            return Err(ModelError::InvalidBatch(format!(
                "{num_marks} marks exceed max_marks {}",
                self.config().max_marks
            )));
        }
        let time_scale = context_time_scale(context);
        self.tape.truncate(self.base_len);
        let net = Net::new(self.weights.config(), &self.bound);
        let (v, truncated) = net.encode_context(&mut self.tape, context, time_scale)?;
        Ok(ContextEncoding {
            repr: self.tape.value(v).clone(),
            time_scale,
            num_marks,
            truncated,
        })
    }

    /// Embeddings after each prefix of `history` (`n + 1` of them). Only the
    /// most recent `max_events` events are used.
    pub fn decode_positions(&mut self, enc: &ContextEncoding, history: &[Event]) -> Result<Vec<HistoryEmbedding>> {
        let cap = self.config().max_events;
        let offset = history.len().saturating_sub(cap);
        let kept = &history[offset..];
        self.reset();
        let net = Net::new(self.weights.config(), &self.bound);
        let ctx = self.tape.constant(enc.repr.clone())?;
        let h = net.decode(&mut self.tape, kept, ctx, enc.time_scale)?;
        let value = self.tape.value(h);
        Ok((0..=kept.len())
            .map(|i| HistoryEmbedding {
                vector: Tensor::vector(value.row(i).to_vec()),
                history_length: offset + i,
                last_event_time: if offset + i == 0 { 0.0 } else { history[offset + i - 1].time },
                time_scale: enc.time_scale,
                num_marks: enc.num_marks,
            })
            .collect())
    }

    /// Embedding after the whole history (the summary token when it is empty).
    pub fn decode_history(&mut self, enc: &ContextEncoding, history: &[Event]) -> Result<HistoryEmbedding> {
        let mut all = self.decode_positions(enc, history)?;
        Ok(all.pop().expect("decode yields at least one position"))
    }

    /// Raw `(mu, alpha, beta)` for all `max_marks` in normalised time.
    pub fn head_values(&mut self, h: &HistoryEmbedding) -> Result<Vec<f64>> {
        self.reset();
        let net = Net::new(self.weights.config(), &self.bound);
        let x = self.tape.constant(Tensor::matrix(1, h.vector.numel(), h.vector.data().to_vec())?)?;
        let p = net.head(&mut self.tape, x)?;
        Ok(self.tape.value(p).data().to_vec())
    }

    /// Intensity parameters for the interval after the history, in original
    /// time units, restricted to the context's marks.
    pub fn predict_intensity_params(&mut self, h: &HistoryEmbedding) -> Result<IntensityParams> {
        let raw = self.head_values(h)?;
        let k = h.num_marks;
        let pick = |j: usize| (0..k).map(|m| raw[3 * m + j]).collect::<Vec<_>>();
        let normalized = IntensityParams::new(h.last_event_time / h.time_scale, pick(0), pick(1), pick(2))?;
        let mut params = normalized.denormalized(h.time_scale);
        // (t / s) * s can round away from t
        params.last_event_time = h.last_event_time;
        Ok(params)
    }

    /// Parameters for every interval of `target` (`n + 1` sets), original units.
    pub fn interval_params(&mut self, enc: &ContextEncoding, target: &EventSequence) -> Result<Vec<IntensityParams>> {
        let positions = self.decode_positions(enc, target.events())?;
        positions.iter().map(|h| self.predict_intensity_params(h)).collect()
    }

    /// NLL of `batch.target` with the context encoded from `batch.context`.
    pub fn forward_nll(&mut self, batch: &ContextBatch) -> Result<ForwardNll> {
        self.tape.truncate(self.base_len);
        let net = Net::new(self.weights.config(), &self.bound);
        net.forward_nll(&mut self.tape, batch)
    }

    /// NLL of each target against one shared context.
    pub fn nll_targets(&mut self, context: &[EventSequence], targets: &[EventSequence]) -> Result<Vec<ForwardNll>> {
        self.tape.truncate(self.base_len);
        let net = Net::new(self.weights.config(), &self.bound);
        Ok(net.forward_nll_targets(&mut self.tape, context, targets)?.1)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in 8-byte values into the tensor file.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    weights: Vec<TensorEntry>,
    extra: Vec<TensorEntry>,
    sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<serde_json::Value>,
}

/// Everything a checkpoint directory holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    /// Additional named tensors (optimizer moments).
    pub extra: BTreeMap<String, Tensor>,
    /// Free-form JSON (training state).
    pub state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(weights: ModelWeights) -> Self {
        Self {
            weights,
            extra: BTreeMap::new(),
            state: None,
        }
    }

    /// Writes `manifest.json` and `tensors.bin` into `dir` (created if
    /// needed). Each file is written to a temporary name and renamed; the
    /// manifest goes last.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut bytes = Vec::new();
        let index = |map: &BTreeMap<String, Tensor>, bytes: &mut Vec<u8>| {
            map.iter()
                .map(|(name, t)| {
                    let entry = TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        offset: bytes.len() / 8,
                    };
                    for v in t.data() {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    entry
                })
                .collect::<Vec<_>>()
        };
        let weights = index(&self.weights.tensors, &mut bytes);
        let extra = index(&self.extra, &mut bytes);
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.weights.config.clone(),
            weights,
            extra,
            sha256: hex_digest(&bytes),
            state: self.state.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Checkpoint {
            path: dir.to_path_buf(),
            detail: e.to_string(),
        })?;
        write_atomic(&dir.join(TENSORS_FILE), &bytes)?;
        write_atomic(&dir.join(MANIFEST_FILE), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let bad = |detail: String| ModelError::Checkpoint {
            path: dir.to_path_buf(),
            detail,
        };
        let text = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", manifest.format)));
        }
        let tensors_path = dir.join(TENSORS_FILE);
        let bytes = fs::read(&tensors_path).map_err(io_err(&tensors_path))?;
        if hex_digest(&bytes) != manifest.sha256 {
            return Err(bad("tensor file does not match the manifest hash".into()));
        }
        let read = |entries: &[TensorEntry]| -> Result<BTreeMap<String, Tensor>> {
            entries
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let (start, end) = (e.offset * 8, (e.offset + n) * 8);
                    let chunk = bytes.get(start..end).ok_or_else(|| bad(format!("tensor `{}` out of bounds", e.name)))?;
                    let data = chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
                })
                .collect()
        };
        let weights = ModelWeights::from_parts(manifest.config, read(&manifest.weights)?)?;
        Ok(Self {
            weights,
            extra: read(&manifest.extra)?,
            state: manifest.state,
        })
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::store::write_file_atomic(path, bytes).map_err(io_err(path))
}
