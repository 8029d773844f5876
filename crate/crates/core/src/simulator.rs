//! Exact sampling of event sequences by Ogata thinning.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hawkes::{Event, EventSequence, HawkesError, HawkesInstance};
use crate::likelihood::{IntensityParams, LikelihoodError};
use crate::rng::{self, standard_exponential, Domain};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("sequence exceeded {max_events} events before t = {reached_time}")]
    Explosion { max_events: usize, reached_time: f64 },
    #[error("intensity {intensity} at t = {t} exceeds thinning bound {bound}")]
    BoundViolated { t: f64, intensity: f64, bound: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

pub type Result<T> = std::result::Result<T, SimulationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub window_end: f64,
    pub max_events: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            window_end: 50.0,
            max_events: 10_000,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_end.is_finite() && self.window_end > 0.0) {
            return Err(SimulationError::InvalidConfig(format!("window_end {} must be positive", self.window_end)));
        }
        if self.max_events == 0 {
            return Err(SimulationError::InvalidConfig("max_events must be positive".into()));
        }
        Ok(())
    }
}

/// Relative slack allowed when checking the acceptance ratio against 1.
const BOUND_SLACK: f64 = 1e-9;

fn pick_mark<R: Rng + ?Sized>(rng: &mut R, per_mark: &[f64], total: f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &v) in per_mark.iter().enumerate() {
        acc += v;
        if target < acc {
            return k;
        }
    }
    per_mark.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// One sequence on `[0, cfg.window_end]`.
pub fn simulate_sequence<R: Rng + ?Sized>(inst: &HawkesInstance, cfg: &SimulationConfig, rng: &mut R) -> Result<EventSequence> {
    inst.validate()?;
    cfg.validate()?;
    let horizon = cfg.window_end;
    let mut events: Vec<Event> = Vec::new();
    let mut s = 0.0;
    loop {
        let bound = inst.intensity_upper_bound(&events, s);
        if bound <= 0.0 {
            // Nothing can fire until the end of the window.
            break;
        }
        let candidate = s + standard_exponential(rng) / bound;
        if candidate > horizon {
            break;
        }
        if candidate <= s || events.last().is_some_and(|e| candidate <= e.time) {
            continue;
        }
        let (total, per_mark) = inst.total_intensity(&events, candidate)?;
        if total > bound * (1.0 + BOUND_SLACK) {
            return Err(SimulationError::BoundViolated {
                t: candidate,
                intensity: total,
                bound,
            });
        }
        if rng.random::<f64>() * bound < total {
            if events.len() == cfg.max_events {
                return Err(SimulationError::Explosion {
                    max_events: cfg.max_events,
                    reached_time: candidate,
                });
            }
            let mark = pick_mark(rng, &per_mark, total);
            events.push(Event::new(candidate, mark));
        }
        s = candidate;
    }
    Ok(EventSequence::new(events, horizon, inst.num_marks)?)
}

/// `count` sequences, sequence `j` drawn from stream
/// `(cfg.seed, Sequence, instance_key, j)`. Output does not depend on
/// `threads` (0 uses the ambient rayon pool).
pub fn simulate_dataset(
    inst: &HawkesInstance,
    count: usize,
    cfg: &SimulationConfig,
    instance_key: u64,
    threads: usize,
) -> Result<Vec<EventSequence>> {
    let run = || {
        (0..count)
            .into_par_iter()
            .map(|j| {
                let mut rng = rng::stream(cfg.seed, Domain::Sequence, instance_key, j as u64);
                simulate_sequence(inst, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
    };
    if threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimulationError::ThreadPool(e.to_string()))?
        .install(run)
}

/// Bisection tolerance on event times drawn from an estimated intensity.
pub const INVERSION_TOL: f64 = 1e-10;

/// Next event after `t_from` under `params`, by inverting the compensator
/// against an Exp(1) draw. `None` if nothing fires before `t_end`.
pub fn simulate_from_estimate<R: Rng + ?Sized>(
    params: &IntensityParams,
    t_from: f64,
    t_end: f64,
    rng: &mut R,
) -> Result<Option<Event>> {
    let target = standard_exponential(rng);
    let mass = |t: f64| params.compensator_between(t_from, t);
    if t_end <= t_from || mass(t_end)? < target {
        return Ok(None);
    }
    let (mut lo, mut hi) = (t_from, t_end);
    while hi - lo > INVERSION_TOL * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mass(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if hi > t_from { hi } else { t_from + INVERSION_TOL };
    let per_mark = params.intensities(t)?;
    let total: f64 = per_mark.iter().sum();
    let mark = if total > 0.0 { pick_mark(rng, &per_mark, total) } else { 0 };
    Ok(Some(Event::new(t, mark)))
}
