//! Log-likelihood of marked event sequences.
//!
//! Two intensities are scored here. The model's per-interval form
//!
//! ```text
//! lambda(t, k) = mu_k + (alpha_k - mu_k) * exp(-beta_k * (t - t_last))
//! ```
//!
//! has a closed-form compensator and is used as the training loss. The
//! ground-truth Hawkes intensity is integrated numerically with adaptive
//! Simpson and serves as the evaluation reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hawkes::{Event, EventSequence, HawkesError, HawkesInstance};

/// Intensities below this are scored as if they were this value.
pub const LOG_INTENSITY_FLOOR: f64 = 1e-10;

/// `beta * delta` below this switches to the series form of `(1 - e^-x) / x`.
const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("query time {t} precedes the last event at {last}")]
    Ordering { t: f64, last: f64 },
    #[error("negative interval length {0}")]
    NegativeDelta(f64),
    #[error("mark {mark} out of range for {num_marks} marks")]
    MarkOutOfRange { mark: usize, num_marks: usize },
    #[error("invalid intensity parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} interval parameter sets, got {got}")]
    IntervalCount { expected: usize, got: usize },
    #[error("quadrature on [{a}, {b}] did not reach tolerance {tol} within {max_depth} refinement levels (last error estimate {estimate:e})")]
    Quadrature {
        a: f64,
        b: f64,
        tol: f64,
        max_depth: usize,
        estimate: f64,
    },
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
}

pub type Result<T> = std::result::Result<T, LikelihoodError>;

/// Per-mark triples `(mu, alpha, beta)` valid from `last_event_time` until
/// the next event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityParams {
    pub last_event_time: f64,
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl IntensityParams {
    pub fn new(last_event_time: f64, mu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let p = Self {
            last_event_time,
            mu,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Time-constant intensities (`mu == alpha`).
    pub fn constant(last_event_time: f64, rates: &[f64]) -> Result<Self> {
        Self::new(last_event_time, rates.to_vec(), rates.to_vec(), vec![1.0; rates.len()])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.mu.len();
        if self.alpha.len() != k || self.beta.len() != k {
            return Err(LikelihoodError::InvalidParams(format!(
                "length mismatch: mu {}, alpha {}, beta {}",
                k,
                self.alpha.len(),
                self.beta.len()
            )));
        }
        if !self.last_event_time.is_finite() {
            return Err(LikelihoodError::InvalidParams("non-finite last event time".into()));
        }
        let bad = self
            .mu
            .iter()
            .chain(&self.alpha)
            .chain(&self.beta)
            .find(|v| !(v.is_finite() && **v >= 0.0));
        match bad {
            Some(v) => Err(LikelihoodError::InvalidParams(format!("entry {v} must be finite and >= 0"))),
            None => Ok(()),
        }
    }

    pub fn num_marks(&self) -> usize {
        self.mu.len()
    }

    /// Keep only the first `k` marks.
    pub fn truncated(mut self, k: usize) -> Self {
        self.mu.truncate(k);
        self.alpha.truncate(k);
        self.beta.truncate(k);
        self
    }

    /// Converts parameters expressed in time normalised by `scale` back to
    /// original units: `lambda(t) = lambda_norm(t / scale) / scale`.
    pub fn denormalized(&self, scale: f64) -> Self {
        let div = |v: &Vec<f64>| v.iter().map(|x| x / scale).collect();
        Self {
            last_event_time: self.last_event_time * scale,
            mu: div(&self.mu),
            alpha: div(&self.alpha),
            beta: div(&self.beta),
        }
    }

    fn delta(&self, t: f64) -> Result<f64> {
        let d = t - self.last_event_time;
        if d < 0.0 || d.is_nan() {
            return Err(LikelihoodError::Ordering {
                t,
                last: self.last_event_time,
            });
        }
        Ok(d)
    }

    pub fn intensity(&self, t: f64, mark: usize) -> Result<f64> {
        if mark >= self.num_marks() {
            return Err(LikelihoodError::MarkOutOfRange {
                mark,
                num_marks: self.num_marks(),
            });
        }
        let d = self.delta(t)?;
        Ok(mark_intensity(self.mu[mark], self.alpha[mark], self.beta[mark], d))
    }

    pub fn intensities(&self, t: f64) -> Result<Vec<f64>> {
        let d = self.delta(t)?;
        Ok((0..self.num_marks())
            .map(|k| mark_intensity(self.mu[k], self.alpha[k], self.beta[k], d))
            .collect())
    }

    /// Integrated total intensity over `[last_event_time, last_event_time + delta]`.
    pub fn compensator(&self, delta: f64) -> Result<f64> {
        if delta < 0.0 || delta.is_nan() {
            return Err(LikelihoodError::NegativeDelta(delta));
        }
        Ok((0..self.num_marks())
            .map(|k| mark_compensator(self.mu[k], self.alpha[k], self.beta[k], delta))
            .sum())
    }

    /// Integrated total intensity over `[a, b]`, both at or after the last event.
    pub fn compensator_between(&self, a: f64, b: f64) -> Result<f64> {
        let da = self.delta(a)?;
        let db = self.delta(b)?;
        Ok(self.compensator(db)? - self.compensator(da)?)
    }
}

/// Written as a convex combination so the value at `delta = 0` is exactly
/// `alpha` and never leaves `[min(mu, alpha), max(mu, alpha)]`.
pub fn mark_intensity(mu: f64, alpha: f64, beta: f64, delta: f64) -> f64 {
    let x = beta * delta;
    alpha * (-x).exp() - mu * (-x).exp_m1()
}

/// `(1 - e^-x) / x`, with its series near zero.
fn relaxation(x: f64) -> f64 {
    if x < SERIES_THRESHOLD {
        1.0 - x / 2.0 + x * x / 6.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Derivative of [`relaxation`].
fn relaxation_grad(x: f64) -> f64 {
    if x < 1e-3 {
        -0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0
    } else {
        let e = (-x).exp();
        (x * e + (-x).exp_m1()) / (x * x)
    }
}

/// `mu delta + (alpha - mu)(1 - e^{-beta delta}) / beta`.
pub fn mark_compensator(mu: f64, alpha: f64, beta: f64, delta: f64) -> f64 {
    mu * delta + (alpha - mu) * delta * relaxation(beta * delta)
}

/// Value and partial derivatives (d/dmu, d/dalpha, d/dbeta) of [`mark_compensator`].
pub fn mark_compensator_grad(mu: f64, alpha: f64, beta: f64, delta: f64) -> (f64, [f64; 3]) {
    let x = beta * delta;
    let r = relaxation(x);
    let value = mu * delta + (alpha - mu) * delta * r;
    let grad = [
        delta - delta * r,
        delta * r,
        (alpha - mu) * delta * delta * relaxation_grad(x),
    ];
    (value, grad)
}

/// Floored log-intensity and its partial derivatives at `delta` after the last event.
pub fn mark_log_intensity_grad(mu: f64, alpha: f64, beta: f64, delta: f64) -> (f64, [f64; 3]) {
    let e = (-beta * delta).exp();
    let one_minus_e = -(-beta * delta).exp_m1();
    let lambda = alpha * e + mu * one_minus_e;
    if lambda < LOG_INTENSITY_FLOOR {
        return (LOG_INTENSITY_FLOOR.ln(), [0.0; 3]);
    }
    let grad = [one_minus_e / lambda, e / lambda, -(alpha - mu) * delta * e / lambda];
    (lambda.ln(), grad)
}

/// Likelihood terms of one sequence, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceNll {
    pub total: f64,
    pub per_event_log_intensity: Vec<f64>,
    pub compensator: f64,
    pub events_count: usize,
}

impl SequenceNll {
    fn from_terms(per_event_log_intensity: Vec<f64>, compensator: f64) -> Self {
        let total = -per_event_log_intensity.iter().sum::<f64>() + compensator;
        Self {
            total,
            events_count: per_event_log_intensity.len(),
            per_event_log_intensity,
            compensator,
        }
    }

    /// NLL divided by the event count (by one for an empty sequence).
    pub fn per_event(&self) -> f64 {
        self.total / self.events_count.max(1) as f64
    }
}

/// NLL of `target` under per-interval model parameters. Interval `i` runs
/// from event `i` (or 0) to event `i + 1` (or the window end), so `n`
/// events need `n + 1` parameter sets.
pub fn sequence_nll_model(target: &EventSequence, params: &[IntensityParams]) -> Result<SequenceNll> {
    let events = target.events();
    if params.len() != events.len() + 1 {
        return Err(LikelihoodError::IntervalCount {
            expected: events.len() + 1,
            got: params.len(),
        });
    }
    let mut log_terms = Vec::with_capacity(events.len());
    let mut compensator = 0.0;
    let mut start: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let end = events.get(i).map_or(target.window_end(), |e| e.time);
        compensator += p.compensator_between(start.max(p.last_event_time), end)?;
        if let Some(e) = events.get(i) {
            let lambda = p.intensity(e.time, e.mark)?;
            log_terms.push(lambda.max(LOG_INTENSITY_FLOOR).ln());
        }
        start = end;
    }
    Ok(SequenceNll::from_terms(log_terms, compensator))
}

/// One inter-event interval in the packed loss: length measured from the
/// interval's last event, and the mark of the event closing it (if any).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalTarget {
    pub delta: f64,
    pub mark: Option<usize>,
}

/// Intervals of a sequence with times divided by `time_scale`.
pub fn interval_targets(seq: &EventSequence, time_scale: f64) -> Vec<IntervalTarget> {
    let mut last = 0.0;
    let mut out = Vec::with_capacity(seq.len() + 1);
    for e in seq.events() {
        out.push(IntervalTarget {
            delta: (e.time - last) / time_scale,
            mark: Some(e.mark),
        });
        last = e.time;
    }
    out.push(IntervalTarget {
        delta: (seq.window_end() - last) / time_scale,
        mark: None,
    });
    out
}

/// NLL and its gradient for parameters packed row-wise as
/// `[interval][mark][mu, alpha, beta]`, with `stride` values per interval
/// and only the first `num_marks` marks scored.
pub fn packed_nll_with_grad(
    packed: &[f64],
    stride: usize,
    num_marks: usize,
    intervals: &[IntervalTarget],
) -> Result<(f64, Vec<f64>)> {
    if packed.len() != stride * intervals.len() || num_marks * 3 > stride {
        return Err(LikelihoodError::IntervalCount {
            expected: intervals.len(),
            got: packed.len() / stride.max(1),
        });
    }
    let mut grad = vec![0.0; packed.len()];
    let mut total = 0.0;
    for (i, iv) in intervals.iter().enumerate() {
        if iv.delta < 0.0 {
            return Err(LikelihoodError::NegativeDelta(iv.delta));
        }
        let row = &packed[i * stride..(i + 1) * stride];
        let grow = &mut grad[i * stride..(i + 1) * stride];
        for k in 0..num_marks {
            let (mu, alpha, beta) = (row[3 * k], row[3 * k + 1], row[3 * k + 2]);
            let (c, dc) = mark_compensator_grad(mu, alpha, beta, iv.delta);
            total += c;
            for j in 0..3 {
                grow[3 * k + j] += dc[j];
            }
        }
        if let Some(mark) = iv.mark {
            if mark >= num_marks {
                return Err(LikelihoodError::MarkOutOfRange { mark, num_marks });
            }
            let (mu, alpha, beta) = (row[3 * mark], row[3 * mark + 1], row[3 * mark + 2]);
            let (l, dl) = mark_log_intensity_grad(mu, alpha, beta, iv.delta);
            total -= l;
            for j in 0..3 {
                grow[3 * mark + j] -= dl[j];
            }
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    /// Absolute error target per inter-event interval.
    pub abs_tol: f64,
    pub max_depth: usize,
    /// Uniform panels per interval before adaptive refinement starts.
    pub initial_panels: usize,
    /// Starting panels are no wider than this, so oscillations cannot alias
    /// into a falsely converged first estimate.
    pub max_panel_width: f64,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-9,
            max_depth: 20,
            initial_panels: 1,
            max_panel_width: 0.5,
        }
    }
}

/// Per-cell tolerance stops halving after this many levels, so a kink (from
/// clipping at zero) can be resolved within the depth budget.
const TOLERANCE_HALVINGS: usize = 10;

struct SimpsonCell {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn refine<F: FnMut(f64) -> f64>(f: &mut F, cell: SimpsonCell, tol: f64, depth: usize, q: &Quadrature) -> Result<f64> {
    let SimpsonCell { a, b, fa, fm, fb, whole } = cell;
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let diff = left + right - whole;
    if diff.abs() <= 15.0 * tol || diff.abs() <= 64.0 * f64::EPSILON * (left + right).abs() {
        return Ok(left + right + diff / 15.0);
    }
    if depth >= q.max_depth {
        return Err(LikelihoodError::Quadrature {
            a,
            b,
            tol: q.abs_tol,
            max_depth: q.max_depth,
            estimate: diff.abs() / 15.0,
        });
    }
    let next_tol = if depth < TOLERANCE_HALVINGS { tol / 2.0 } else { tol };
    let l = refine(
        f,
        SimpsonCell {
            a,
            b: m,
            fa,
            fm: flm,
            fb: fm,
            whole: left,
        },
        next_tol,
        depth + 1,
        q,
    )?;
    let r = refine(
        f,
        SimpsonCell {
            a: m,
            b,
            fa: fm,
            fm: frm,
            fb,
            whole: right,
        },
        next_tol,
        depth + 1,
        q,
    )?;
    Ok(l + r)
}

/// Adaptive Simpson integral of `f` over `[a, b]`.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, q: &Quadrature) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let by_width = if q.max_panel_width > 0.0 {
        ((b - a) / q.max_panel_width).ceil() as usize
    } else {
        1
    };
    let panels = q.initial_panels.max(by_width).max(1);
    let width = (b - a) / panels as f64;
    let tol = q.abs_tol / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let pa = a + p as f64 * width;
        let pb = if p + 1 == panels { b } else { pa + width };
        let (fa, fm, fb) = (f(pa), f(0.5 * (pa + pb)), f(pb));
        let whole = simpson(pa, pb, fa, fm, fb);
        total += refine(
            &mut f,
            SimpsonCell {
                a: pa,
                b: pb,
                fa,
                fm,
                fb,
                whole,
            },
            tol,
            0,
            q,
        )?;
    }
    Ok(total)
}

/// Integrated ground-truth total intensity over `(a, b]` given a history
/// that stays fixed on that span (no events inside it).
pub fn ground_truth_compensator(inst: &HawkesInstance, history: &[Event], a: f64, b: f64, q: &Quadrature) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let last = history.last().map_or(f64::NEG_INFINITY, |e| e.time);
    // The left end may coincide with the last event; evaluate just after it.
    let mut err = None;
    let value = adaptive_simpson(
        |t| {
            let t = if t <= last { last.next_up() } else { t };
            match inst.total_intensity(history, t) {
                Ok((total, _)) => total,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            }
        },
        a,
        b,
        q,
    )?;
    match err {
        Some(e) => Err(e.into()),
        None => Ok(value),
    }
}

/// NLL of `target` under the ground-truth intensity of `inst`.
pub fn sequence_nll_ground_truth(inst: &HawkesInstance, target: &EventSequence, q: &Quadrature) -> Result<SequenceNll> {
    if target.num_marks() > inst.num_marks {
        return Err(LikelihoodError::MarkOutOfRange {
            mark: target.num_marks() - 1,
            num_marks: inst.num_marks,
        });
    }
    let events = target.events();
    let mut log_terms = Vec::with_capacity(events.len());
    let mut compensator = 0.0;
    let mut start = 0.0;
    for i in 0..=events.len() {
        let history = &events[..i];
        let end = events.get(i).map_or(target.window_end(), |e| e.time);
        compensator += ground_truth_compensator(inst, history, start, end, q)?;
        if let Some(e) = events.get(i) {
            let lambda = inst.intensity(history, e.time, e.mark)?;
            log_terms.push(lambda.max(LOG_INTENSITY_FLOOR).ln());
        }
        start = end;
    }
    Ok(SequenceNll::from_terms(log_terms, compensator))
}
