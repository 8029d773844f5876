//! Marked Hawkes processes: event sequences, the synthetic prior over process
//! instances, and the ground-truth conditional intensity
//!
//! ```text
//! lambda(t, k | H_t) = max(0, mu_k(t) + sum_{(t', k') in H_t} z[k][k'] * gamma[k][k'](t - t'))
//! ```

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HawkesError {
    #[error("query time {t} is not after the last history event at {last}")]
    Ordering { t: f64, last: f64 },
    #[error("mark {mark} out of range for {num_marks} marks")]
    MarkOutOfRange { mark: usize, num_marks: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("invalid process specification: {0}")]
    InvalidSpec(String),
    #[error("invalid prior config: {0}")]
    InvalidConfig(String),
    #[error("prior produced {attempts} consecutive unstable draws; narrow the kernel ranges")]
    Unstable { attempts: usize },
}

pub type Result<T> = std::result::Result<T, HawkesError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "k")]
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

/// Events in strictly increasing time order on the window `[0, window_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    events: Vec<Event>,
    #[serde(rename = "T")]
    window_end: f64,
    #[serde(rename = "K")]
    num_marks: usize,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, window_end: f64, num_marks: usize) -> Result<Self> {
        let seq = Self {
            events,
            window_end,
            num_marks,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn empty(window_end: f64, num_marks: usize) -> Result<Self> {
        Self::new(Vec::new(), window_end, num_marks)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_end.is_finite() && self.window_end > 0.0) {
            return Err(HawkesError::InvalidSequence(format!("window end {} must be positive", self.window_end)));
        }
        if self.num_marks == 0 {
            return Err(HawkesError::InvalidSequence("num_marks must be at least 1".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.time.is_finite() && e.time >= 0.0 && e.time <= self.window_end) {
                return Err(HawkesError::InvalidSequence(format!(
                    "event {i} at {} lies outside [0, {}]",
                    e.time, self.window_end
                )));
            }
            if e.time <= prev {
                return Err(HawkesError::InvalidSequence(format!(
                    "event {i} at {} does not follow {prev}",
                    e.time
                )));
            }
            if e.mark >= self.num_marks {
                return Err(HawkesError::MarkOutOfRange {
                    mark: e.mark,
                    num_marks: self.num_marks,
                });
            }
            prev = e.time;
        }
        Ok(())
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn window_end(&self) -> f64 {
        self.window_end
    }

    pub fn num_marks(&self) -> usize {
        self.num_marks
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events strictly before `t`, i.e. the history `H_t`.
    pub fn history_before(&self, t: f64) -> &[Event] {
        let n = self.events.partition_point(|e| e.time < t);
        &self.events[..n]
    }

    /// The first `n` events as a sequence on the same window.
    pub fn prefix(&self, n: usize) -> EventSequence {
        EventSequence {
            events: self.events[..n.min(self.events.len())].to_vec(),
            window_end: self.window_end,
            num_marks: self.num_marks,
        }
    }

    pub fn with_num_marks(mut self, num_marks: usize) -> Result<Self> {
        self.num_marks = num_marks;
        self.validate()?;
        Ok(self)
    }
}

fn last_time(history: &[Event]) -> f64 {
    history.last().map_or(f64::NEG_INFINITY, |e| e.time)
}

/// History-independent part of one mark's intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BaseIntensitySpec {
    Constant {
        level: f64,
    },
    /// `level + amplitude * sin(2 pi t / period + phase)`; may dip below zero.
    Sinusoidal {
        level: f64,
        amplitude: f64,
        period: f64,
        phase: f64,
    },
    /// `start * exp(-rate t)`.
    ExponentialDecay {
        start: f64,
        rate: f64,
    },
    /// `amplitude` times the Gamma(shape, scale) density.
    GammaShaped {
        shape: f64,
        scale: f64,
        amplitude: f64,
    },
}

impl BaseIntensitySpec {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { level } => level,
            Self::Sinusoidal {
                level,
                amplitude,
                period,
                phase,
            } => level + amplitude * (2.0 * PI * t / period + phase).sin(),
            Self::ExponentialDecay { start, rate } => start * (-rate * t).exp(),
            Self::GammaShaped {
                shape,
                scale,
                amplitude,
            } => gamma_shaped(t, shape, scale, amplitude),
        }
    }

    /// Supremum of `max(0, mu(s))` over `s >= t`.
    pub fn sup_from(&self, t: f64) -> f64 {
        match *self {
            Self::Constant { level } => level.max(0.0),
            Self::Sinusoidal { level, amplitude, .. } => (level + amplitude.abs()).max(0.0),
            Self::ExponentialDecay { start, rate } => start * (-rate * t.max(0.0)).exp(),
            Self::GammaShaped {
                shape,
                scale,
                amplitude,
            } => {
                let mode = (shape - 1.0) * scale;
                gamma_shaped(t.max(mode), shape, scale, amplitude)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Constant { level } => level >= 0.0 && level.is_finite(),
            Self::Sinusoidal {
                level,
                amplitude,
                period,
                phase,
            } => [level, amplitude, phase].iter().all(|v| v.is_finite()) && period > 0.0 && period.is_finite(),
            Self::ExponentialDecay { start, rate } => start >= 0.0 && start.is_finite() && rate > 0.0 && rate.is_finite(),
            // shape >= 1 keeps the density bounded at t = 0, which thinning needs.
            Self::GammaShaped {
                shape,
                scale,
                amplitude,
            } => shape >= 1.0 && shape.is_finite() && scale > 0.0 && scale.is_finite() && amplitude >= 0.0 && amplitude.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HawkesError::InvalidSpec(format!("base intensity {self:?}")))
        }
    }

    pub fn kind(&self) -> BaseKind {
        match self {
            Self::Constant { .. } => BaseKind::Constant,
            Self::Sinusoidal { .. } => BaseKind::Sinusoidal,
            Self::ExponentialDecay { .. } => BaseKind::ExponentialDecay,
            Self::GammaShaped { .. } => BaseKind::GammaShaped,
        }
    }
}

fn gamma_shaped(t: f64, shape: f64, scale: f64, amplitude: f64) -> f64 {
    if t < 0.0 || amplitude == 0.0 {
        return 0.0;
    }
    if t == 0.0 {
        return if shape == 1.0 { amplitude / scale } else { 0.0 };
    }
    let log_density = (shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln();
    amplitude * log_density.exp()
}

/// Non-negative, non-increasing interaction kernel `gamma(tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum KernelSpec {
    /// `weight * exp(-rate tau)`.
    ExponentialDecay { weight: f64, rate: f64 },
    /// `weight * (tau + offset)^(-exponent)`.
    PowerLaw { weight: f64, exponent: f64, offset: f64 },
}

impl KernelSpec {
    pub fn eval(&self, tau: f64) -> f64 {
        match *self {
            Self::ExponentialDecay { weight, rate } => weight * (-rate * tau).exp(),
            Self::PowerLaw {
                weight,
                exponent,
                offset,
            } => weight * (tau + offset).powf(-exponent),
        }
    }

    /// Total mass on `[0, inf)`.
    pub fn integral(&self) -> f64 {
        match *self {
            Self::ExponentialDecay { weight, rate } => weight / rate,
            Self::PowerLaw {
                weight,
                exponent,
                offset,
            } => weight * offset.powf(1.0 - exponent) / (exponent - 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::ExponentialDecay { weight, rate } => weight >= 0.0 && weight.is_finite() && rate > 0.0 && rate.is_finite(),
            Self::PowerLaw {
                weight,
                exponent,
                offset,
            } => weight >= 0.0 && weight.is_finite() && exponent > 1.0 && exponent.is_finite() && offset > 0.0 && offset.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(HawkesError::InvalidSpec(format!("kernel {self:?}")))
        }
    }
}

/// One draw from the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HawkesInstance {
    pub num_marks: usize,
    pub base: Vec<BaseIntensitySpec>,
    /// `kernels[k][j]`: effect of a mark-`j` event on mark `k`.
    pub kernels: Vec<Vec<KernelSpec>>,
    /// `signs[k][j]` in {-1, 0, +1}.
    pub signs: Vec<Vec<i8>>,
}

impl HawkesInstance {
    /// Independent homogeneous Poisson processes, one rate per mark.
    pub fn poisson(rates: &[f64]) -> Self {
        let k = rates.len();
        Self {
            num_marks: k,
            base: rates.iter().map(|&level| BaseIntensitySpec::Constant { level }).collect(),
            kernels: vec![vec![KernelSpec::ExponentialDecay { weight: 0.0, rate: 1.0 }; k]; k],
            signs: vec![vec![0; k]; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_marks;
        if k == 0 || self.base.len() != k || self.kernels.len() != k || self.signs.len() != k {
            return Err(HawkesError::InvalidSpec(format!("inconsistent mark count {k}")));
        }
        for b in &self.base {
            b.validate()?;
        }
        for (row, signs) in self.kernels.iter().zip(&self.signs) {
            if row.len() != k || signs.len() != k {
                return Err(HawkesError::InvalidSpec("kernel/sign matrices must be K x K".into()));
            }
            for kern in row {
                kern.validate()?;
            }
            if signs.iter().any(|s| !(-1..=1).contains(s)) {
                return Err(HawkesError::InvalidSpec("signs must be -1, 0 or +1".into()));
            }
        }
        Ok(())
    }

    /// `max_k sum_{j: z > 0} integral(gamma[k][j])`.
    pub fn excitation_proxy(&self) -> f64 {
        self.kernels
            .iter()
            .zip(&self.signs)
            .map(|(row, signs)| {
                row.iter()
                    .zip(signs)
                    .filter(|(_, &s)| s > 0)
                    .map(|(kern, _)| kern.integral())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_history_independent(&self) -> bool {
        self.signs.iter().flatten().all(|&s| s == 0)
    }

    /// Pre-clipping intensities `mu_k(t) + sum z gamma` for every mark.
    fn raw_intensities(&self, history: &[Event], t: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self.base.iter().map(|b| b.eval(t)).collect();
        for e in history {
            let tau = t - e.time;
            for (k, acc) in out.iter_mut().enumerate() {
                let z = self.signs[k][e.mark];
                if z != 0 {
                    *acc += f64::from(z) * self.kernels[k][e.mark].eval(tau);
                }
            }
        }
        out
    }

    fn check_query(&self, history: &[Event], t: f64) -> Result<()> {
        let last = last_time(history);
        if t <= last || t.is_nan() {
            return Err(HawkesError::Ordering { t, last });
        }
        if let Some(e) = history.iter().find(|e| e.mark >= self.num_marks) {
            return Err(HawkesError::MarkOutOfRange {
                mark: e.mark,
                num_marks: self.num_marks,
            });
        }
        Ok(())
    }

    /// Ground-truth conditional intensity of `mark` at `t` given `history`
    /// (all events strictly before `t`).
    pub fn intensity(&self, history: &[Event], t: f64, mark: usize) -> Result<f64> {
        if mark >= self.num_marks {
            return Err(HawkesError::MarkOutOfRange {
                mark,
                num_marks: self.num_marks,
            });
        }
        self.check_query(history, t)?;
        let mut value = self.base[mark].eval(t);
        for e in history {
            let z = self.signs[mark][e.mark];
            if z != 0 {
                value += f64::from(z) * self.kernels[mark][e.mark].eval(t - e.time);
            }
        }
        Ok(value.max(0.0))
    }

    /// Per-mark intensities at `t` and their sum.
    pub fn total_intensity(&self, history: &[Event], t: f64) -> Result<(f64, Vec<f64>)> {
        self.check_query(history, t)?;
        let per_mark: Vec<f64> = self.raw_intensities(history, t).into_iter().map(|v| v.max(0.0)).collect();
        Ok((per_mark.iter().sum(), per_mark))
    }

    /// Bound on the total intensity over `[t_from, next event)` with the
    /// history held fixed. Kernels are non-increasing, so each excitatory term
    /// is largest at `t_from`; inhibitory terms can only lower the intensity.
    pub fn intensity_upper_bound(&self, history: &[Event], t_from: f64) -> f64 {
        let mut bound: f64 = self.base.iter().map(|b| b.sup_from(t_from)).sum();
        for e in history {
            let tau = (t_from - e.time).max(0.0);
            for k in 0..self.num_marks {
                if self.signs[k][e.mark] > 0 {
                    bound += self.kernels[k][e.mark].eval(tau);
                }
            }
        }
        bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseKind {
    Constant,
    Sinusoidal,
    ExponentialDecay,
    GammaShaped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    ExponentialDecay,
    PowerLaw,
}

/// Closed interval `[lo, hi]` for a uniformly drawn parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn check(&self, name: &str, min: f64, min_inclusive: bool) -> Result<()> {
        let Interval(lo, hi) = *self;
        let lower_ok = if min_inclusive { lo >= min } else { lo > min };
        if lo.is_finite() && hi.is_finite() && lo <= hi && lower_ok {
            Ok(())
        } else {
            Err(HawkesError::InvalidConfig(format!(
                "range {name} = [{lo}, {hi}] must be non-empty with lower bound {} {min}",
                if min_inclusive { ">=" } else { ">" }
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamRanges {
    pub level: Interval,
    pub amplitude: Interval,
    pub period: Interval,
    pub phase: Interval,
    pub decay_start: Interval,
    pub decay_rate: Interval,
    pub gamma_shape: Interval,
    pub gamma_scale: Interval,
    pub gamma_amplitude: Interval,
    pub kernel_weight: Interval,
    pub kernel_rate: Interval,
    pub power_exponent: Interval,
    pub power_offset: Interval,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            level: Interval(0.05, 1.0),
            amplitude: Interval(0.0, 1.0),
            period: Interval(5.0, 25.0),
            phase: Interval(0.0, 2.0 * PI),
            decay_start: Interval(0.2, 2.0),
            decay_rate: Interval(0.01, 0.2),
            gamma_shape: Interval(1.5, 5.0),
            gamma_scale: Interval(2.0, 10.0),
            gamma_amplitude: Interval(5.0, 40.0),
            kernel_weight: Interval(0.05, 0.6),
            kernel_rate: Interval(0.5, 3.0),
            power_exponent: Interval(1.5, 3.0),
            power_offset: Interval(0.5, 2.0),
        }
    }
}

/// Threshold on [`HawkesInstance::excitation_proxy`] for accepting a draw.
pub const STABILITY_THRESHOLD: f64 = 0.9;
pub const MAX_STABILITY_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub num_marks_range: (usize, usize),
    pub window_end: f64,
    pub base_kinds: Vec<BaseKind>,
    pub kernel_kinds: Vec<KernelKind>,
    pub ranges: ParamRanges,
    /// Probability that an interaction sign is zero.
    pub sparsity: f64,
    /// Probability that a non-zero sign is -1.
    pub inhibition_prob: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            num_marks_range: (1, 5),
            window_end: 50.0,
            base_kinds: vec![
                BaseKind::Constant,
                BaseKind::Sinusoidal,
                BaseKind::ExponentialDecay,
                BaseKind::GammaShaped,
            ],
            kernel_kinds: vec![KernelKind::ExponentialDecay, KernelKind::PowerLaw],
            ranges: ParamRanges::default(),
            sparsity: 0.5,
            inhibition_prob: 0.3,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let (kmin, kmax) = self.num_marks_range;
        if kmin == 0 || kmin > kmax {
            return Err(HawkesError::InvalidConfig(format!("num_marks_range [{kmin}, {kmax}]")));
        }
        if !(self.window_end.is_finite() && self.window_end > 0.0) {
            return Err(HawkesError::InvalidConfig(format!("window_end {}", self.window_end)));
        }
        if self.base_kinds.is_empty() || self.kernel_kinds.is_empty() {
            return Err(HawkesError::InvalidConfig("base_kinds and kernel_kinds must be non-empty".into()));
        }
        for (name, p) in [("sparsity", self.sparsity), ("inhibition_prob", self.inhibition_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(HawkesError::InvalidConfig(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        let r = &self.ranges;
        r.level.check("level", 0.0, true)?;
        r.amplitude.check("amplitude", f64::NEG_INFINITY, false)?;
        r.period.check("period", 0.0, false)?;
        r.phase.check("phase", f64::NEG_INFINITY, false)?;
        r.decay_start.check("decay_start", 0.0, true)?;
        r.decay_rate.check("decay_rate", 0.0, false)?;
        r.gamma_shape.check("gamma_shape", 1.0, true)?;
        r.gamma_scale.check("gamma_scale", 0.0, false)?;
        r.gamma_amplitude.check("gamma_amplitude", 0.0, true)?;
        r.kernel_weight.check("kernel_weight", 0.0, true)?;
        r.kernel_rate.check("kernel_rate", 0.0, false)?;
        r.power_exponent.check("power_exponent", 1.0, false)?;
        r.power_offset.check("power_offset", 0.0, false)?;
        Ok(())
    }
}

fn pick<'a, T, R: Rng + ?Sized>(items: &'a [T], rng: &mut R) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn draw_base<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> BaseIntensitySpec {
    let r = &cfg.ranges;
    match pick(&cfg.base_kinds, rng) {
        BaseKind::Constant => BaseIntensitySpec::Constant { level: r.level.sample(rng) },
        BaseKind::Sinusoidal => BaseIntensitySpec::Sinusoidal {
            level: r.level.sample(rng),
            amplitude: r.amplitude.sample(rng),
            period: r.period.sample(rng),
            phase: r.phase.sample(rng),
        },
        BaseKind::ExponentialDecay => BaseIntensitySpec::ExponentialDecay {
            start: r.decay_start.sample(rng),
            rate: r.decay_rate.sample(rng),
        },
        BaseKind::GammaShaped => BaseIntensitySpec::GammaShaped {
            shape: r.gamma_shape.sample(rng),
            scale: r.gamma_scale.sample(rng),
            amplitude: r.gamma_amplitude.sample(rng),
        },
    }
}

fn draw_kernel<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> KernelSpec {
    let r = &cfg.ranges;
    match pick(&cfg.kernel_kinds, rng) {
        KernelKind::ExponentialDecay => KernelSpec::ExponentialDecay {
            weight: r.kernel_weight.sample(rng),
            rate: r.kernel_rate.sample(rng),
        },
        KernelKind::PowerLaw => KernelSpec::PowerLaw {
            weight: r.kernel_weight.sample(rng),
            exponent: r.power_exponent.sample(rng),
            offset: r.power_offset.sample(rng),
        },
    }
}

fn draw_sign<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> i8 {
    if rng.random_bool(cfg.sparsity) {
        0
    } else if rng.random_bool(cfg.inhibition_prob) {
        -1
    } else {
        1
    }
}

/// Draws one instance, rejecting draws whose excitation proxy reaches
/// [`STABILITY_THRESHOLD`].
pub fn sample_instance<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<HawkesInstance> {
    cfg.validate()?;
    for _ in 0..MAX_STABILITY_REJECTIONS {
        let (kmin, kmax) = cfg.num_marks_range;
        let k = rng.random_range(kmin..=kmax);
        let base = (0..k).map(|_| draw_base(cfg, rng)).collect();
        let kernels = (0..k).map(|_| (0..k).map(|_| draw_kernel(cfg, rng)).collect()).collect();
        let signs = (0..k).map(|_| (0..k).map(|_| draw_sign(cfg, rng)).collect()).collect();
        let inst = HawkesInstance {
            num_marks: k,
            base,
            kernels,
            signs,
        };
        if inst.excitation_proxy() < STABILITY_THRESHOLD {
            return Ok(inst);
        }
    }
    Err(HawkesError::Unstable {
        attempts: MAX_STABILITY_REJECTIONS,
    })
}

/// The `index`-th instance of the prior, from its own random stream.
pub fn sample_instance_at(cfg: &PriorConfig, index: u64) -> Result<HawkesInstance> {
    let mut rng = rng::stream(cfg.seed, Domain::Instance, 0, index);
    sample_instance(cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, proptest};

    fn single_mark(base: BaseIntensitySpec, kernel: KernelSpec, sign: i8) -> HawkesInstance {
        HawkesInstance {
            num_marks: 1,
            base: vec![base],
            kernels: vec![vec![kernel]],
            signs: vec![vec![sign]],
        }
    }

    #[test]
    fn excitatory_substitution() {
        let inst = single_mark(
            BaseIntensitySpec::Constant { level: 1.0 },
            KernelSpec::ExponentialDecay { weight: 1.0, rate: 1.0 },
            1,
        );
        let v = inst.intensity(&[Event::new(0.0, 0)], 1.0, 0).unwrap();
        assert_abs_diff_eq!(v, 1.0 + (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 1.367879, epsilon = 1e-6);
    }

    #[test]
    fn inhibition_clips_at_zero() {
        let inst = single_mark(
            BaseIntensitySpec::Constant { level: 0.5 },
            KernelSpec::ExponentialDecay { weight: 1.0, rate: 1.0 },
            -1,
        );
        assert_eq!(inst.intensity(&[Event::new(0.0, 0)], 0.1, 0).unwrap(), 0.0);
    }

    #[test]
    fn query_must_follow_history() {
        let inst = HawkesInstance::poisson(&[1.0]);
        let h = [Event::new(1.0, 0)];
        assert!(matches!(inst.intensity(&h, 1.0, 0), Err(HawkesError::Ordering { .. })));
        assert!(matches!(inst.intensity(&h, 2.0, 3), Err(HawkesError::MarkOutOfRange { .. })));
    }

    #[test]
    fn empty_history_matches_base_evaluator() {
        let cfg = PriorConfig::default();
        let mut rng = rng::stream(4, Domain::Eval, 0, 0);
        for _ in 0..100 {
            let b = draw_base(&cfg, &mut rng);
            let inst = single_mark(b, KernelSpec::ExponentialDecay { weight: 0.3, rate: 1.0 }, 1);
            let t = rng.random_range(0.001..50.0);
            assert_eq!(inst.intensity(&[], t, 0).unwrap(), b.eval(t).max(0.0));
        }
    }

    #[test]
    fn total_intensity_examples() {
        let inst = HawkesInstance::poisson(&[1.0, 2.0]);
        let (total, per) = inst.total_intensity(&[], 0.5).unwrap();
        assert_eq!(total, 3.0);
        assert_eq!(per, vec![1.0, 2.0]);

        let null = HawkesInstance::poisson(&[0.0, 0.0, 0.0]);
        assert_eq!(null.total_intensity(&[], 3.0).unwrap().0, 0.0);
    }

    #[test]
    fn total_equals_sum_of_marks_on_random_instances() {
        let cfg = PriorConfig::default();
        for i in 0..50 {
            let inst = sample_instance_at(&cfg, i).unwrap();
            let history: Vec<Event> = (0..10)
                .map(|j| Event::new(j as f64 * 1.3 + 0.2, j % inst.num_marks))
                .collect();
            let t = 14.0;
            let (total, _) = inst.total_intensity(&history, t).unwrap();
            let sum: f64 = (0..inst.num_marks).map(|k| inst.intensity(&history, t, k).unwrap()).sum();
            assert_abs_diff_eq!(total, sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_examples() {
        let inst = HawkesInstance::poisson(&[2.0]);
        assert_eq!(inst.intensity_upper_bound(&[], 3.0), 2.0);
        let sin = single_mark(
            BaseIntensitySpec::Sinusoidal {
                level: 1.0,
                amplitude: -0.7,
                period: 3.0,
                phase: 0.0,
            },
            KernelSpec::ExponentialDecay { weight: 1.0, rate: 1.0 },
            0,
        );
        assert_abs_diff_eq!(sin.intensity_upper_bound(&[], 0.0), 1.7, epsilon = 1e-15);
    }

    #[test]
    fn bound_dominates_intensity_on_random_draws() {
        let cfg = PriorConfig {
            inhibition_prob: 0.5,
            ..PriorConfig::default()
        };
        let mut rng = rng::stream(8, Domain::Eval, 1, 0);
        for i in 0..1000 {
            let inst = sample_instance_at(&cfg, i).unwrap();
            let n = rng.random_range(0..15);
            let mut t = 0.0;
            let history: Vec<Event> = (0..n)
                .map(|_| {
                    t += rng.random_range(0.01..3.0);
                    Event::new(t, rng.random_range(0..inst.num_marks))
                })
                .collect();
            let t_from = t + rng.random_range(0.0..1.0);
            let bound = inst.intensity_upper_bound(&history, t_from);
            for step in 1..=20 {
                let s = t_from + step as f64 * 0.5;
                let (total, _) = inst.total_intensity(&history, s).unwrap();
                assert!(total <= bound * (1.0 + 1e-12), "instance {i}: {total} > {bound}");
            }
        }
    }

    #[test]
    fn fully_sparse_prior_has_no_interactions() {
        let cfg = PriorConfig {
            sparsity: 1.0,
            ..PriorConfig::default()
        };
        for i in 0..50 {
            let inst = sample_instance_at(&cfg, i).unwrap();
            assert!(inst.is_history_independent());
            let h1 = [Event::new(1.0, 0)];
            let h2 = [Event::new(0.5, 0), Event::new(2.0, 0)];
            assert_eq!(inst.total_intensity(&h1, 3.0).unwrap(), inst.total_intensity(&h2, 3.0).unwrap());
        }
    }

    #[test]
    fn degenerate_ranges_give_rate_two_poisson() {
        let cfg = PriorConfig {
            num_marks_range: (1, 1),
            base_kinds: vec![BaseKind::Constant],
            sparsity: 1.0,
            ranges: ParamRanges {
                level: Interval(2.0, 2.0),
                ..ParamRanges::default()
            },
            ..PriorConfig::default()
        };
        let inst = sample_instance_at(&cfg, 3).unwrap();
        assert_eq!(inst.num_marks, 1);
        assert_eq!(inst.base[0], BaseIntensitySpec::Constant { level: 2.0 });
        assert_eq!(inst.signs, vec![vec![0]]);
    }

    #[test]
    fn inhibitory_fraction_matches_config() {
        // Weights small enough that the stability filter never rejects, so the
        // sign frequencies are not skewed by rejection.
        let cfg = PriorConfig {
            ranges: ParamRanges {
                kernel_weight: Interval(0.01, 0.1),
                kernel_rate: Interval(1.0, 2.0),
                power_offset: Interval(1.0, 2.0),
                power_exponent: Interval(2.0, 3.0),
                ..ParamRanges::default()
            },
            ..PriorConfig::default()
        };
        let (mut neg, mut nonzero) = (0usize, 0usize);
        for i in 0..10_000 {
            let inst = sample_instance_at(&cfg, i).unwrap();
            for s in inst.signs.iter().flatten() {
                if *s != 0 {
                    nonzero += 1;
                    if *s < 0 {
                        neg += 1;
                    }
                }
            }
        }
        let frac = neg as f64 / nonzero as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn sampled_instances_are_stable_and_valid() {
        let cfg = PriorConfig::default();
        for i in 0..500 {
            let inst = sample_instance_at(&cfg, i).unwrap();
            inst.validate().unwrap();
            assert!(inst.excitation_proxy() < STABILITY_THRESHOLD);
        }
    }

    #[test]
    fn explosive_ranges_are_a_config_error() {
        let cfg = PriorConfig {
            num_marks_range: (3, 3),
            sparsity: 0.0,
            inhibition_prob: 0.0,
            kernel_kinds: vec![KernelKind::ExponentialDecay],
            ranges: ParamRanges {
                kernel_weight: Interval(5.0, 6.0),
                kernel_rate: Interval(1.0, 1.0),
                ..ParamRanges::default()
            },
            ..PriorConfig::default()
        };
        assert_eq!(
            sample_instance_at(&cfg, 0),
            Err(HawkesError::Unstable {
                attempts: MAX_STABILITY_REJECTIONS
            })
        );
    }

    #[test]
    fn sampling_is_deterministic_per_index() {
        let cfg = PriorConfig {
            seed: 42,
            ..PriorConfig::default()
        };
        for i in 0..20 {
            let a = serde_json::to_string(&sample_instance_at(&cfg, i).unwrap()).unwrap();
            let b = serde_json::to_string(&sample_instance_at(&cfg, i).unwrap()).unwrap();
            assert_eq!(a, b);
        }
        assert_ne!(sample_instance_at(&cfg, 0).unwrap(), sample_instance_at(&cfg, 1).unwrap());
    }

    #[test]
    fn instance_json_uses_named_kinds() {
        let inst = HawkesInstance::poisson(&[1.5]);
        let json = serde_json::to_value(&inst).unwrap();
        assert_eq!(json["base"][0]["kind"], "Constant");
        assert_eq!(json["base"][0]["level"], 1.5);
        let back: HawkesInstance = serde_json::from_value(json).unwrap();
        assert_eq!(back, inst);
    }

    #[test]
    fn kernel_integrals() {
        let e = KernelSpec::ExponentialDecay { weight: 0.5, rate: 2.0 };
        assert_eq!(e.integral(), 0.25);
        let p = KernelSpec::PowerLaw {
            weight: 1.0,
            exponent: 2.0,
            offset: 1.0,
        };
        assert_eq!(p.integral(), 1.0);
    }

    #[test]
    fn sequence_validation() {
        assert!(EventSequence::new(vec![Event::new(1.0, 0), Event::new(1.0, 0)], 2.0, 1).is_err());
        assert!(EventSequence::new(vec![Event::new(3.0, 0)], 2.0, 1).is_err());
        assert!(EventSequence::new(vec![Event::new(1.0, 2)], 2.0, 2).is_err());
        let s = EventSequence::new(vec![Event::new(0.5, 0), Event::new(1.5, 1)], 2.0, 2).unwrap();
        assert_eq!(s.history_before(1.5).len(), 1);
        assert_eq!(s.history_before(1.6).len(), 2);
    }

    proptest! {
        #[test]
        fn intensity_is_non_negative(seed in 0u64..10_000, t in 0.01f64..60.0) {
            let cfg = PriorConfig { inhibition_prob: 0.8, ..PriorConfig::default() };
            let inst = sample_instance_at(&cfg, seed).unwrap();
            let history: Vec<Event> = (0..8)
                .map(|j| Event::new(t * j as f64 / 9.0, j % inst.num_marks))
                .collect();
            for k in 0..inst.num_marks {
                prop_assert!(inst.intensity(&history, t, k).unwrap() >= 0.0);
            }
        }

        #[test]
        fn gamma_base_integrates_to_amplitude(shape in 1.0f64..5.0, scale in 0.5f64..3.0) {
            let b = BaseIntensitySpec::GammaShaped { shape, scale, amplitude: 2.0 };
            let n = 40_000;
            let upper = scale * (shape + 40.0);
            let h = upper / n as f64;
            let integral: f64 = (0..n).map(|i| b.eval((i as f64 + 0.5) * h) * h).sum();
            prop_assert!((integral - 2.0).abs() < 1e-3);
            let mode = (shape - 1.0) * scale;
            prop_assert!(b.sup_from(0.0) >= b.eval(mode) - 1e-12);
        }
    }
}
