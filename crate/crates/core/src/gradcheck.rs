//! Central finite-difference verification of tape gradients.
//!
//! The checker only ever evaluates the forward function, so it shares no code
//! path with [`Tape::backward`](crate::tensor::Tape::backward).

use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor for the relative error, so components that are
    /// essentially zero are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per input (evenly strided). `None`
    /// checks every entry.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_entries_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat entry index) of the worst component.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut tape, &vars)?;
    Ok((tape, vars, root))
}

fn entry_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => {
            if c == 0 {
                return Vec::new();
            }
            (0..c).map(|i| i * len / c + (len / c) / 2).map(|i| i.min(len - 1)).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every (sampled) input entry.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, root) = evaluate(inputs, &f)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in entry_indices(input.numel(), opts.max_entries_per_input) {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + opts.step;
            let (tp, _, rp) = evaluate(&perturbed, &f)?;
            let plus = tp.value(rp).item();
            perturbed[i].data_mut()[j] = orig - opts.step;
            let (tm, _, rm) = evaluate(&perturbed, &f)?;
            let minus = tm.value(rm).item();
            perturbed[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
