//! Central finite-difference gradient oracle.
//!
//! Errors are relative in the max norm: coordinate `i` scores
//! `|a_i - n_i| / max(|a|_inf, |n|_inf, floor)`, where `a` is the analytic
//! gradient and `n` the numeric one. Scoring each coordinate against its own
//! magnitude would judge near-zero coordinates on f32 output rounding, which
//! for a 1e-3 step is already ~1e-4 in absolute terms.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check a seeded random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            floor: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of the scalar function `f` at `x`.
pub fn grad_check<F>(
    mut f: F,
    x: &Tensor,
    analytic: &[f32],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.numel() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            left: x.shape().to_vec(),
            right: vec![analytic.len()],
        });
    }
    let base = f(x)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < x.numel() => {
            let mut idx: Vec<usize> = (0..x.numel()).collect();
            Rng::new(opts.seed).shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..x.numel()).collect(),
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: coords.len(),
        passed: true,
    };
    let mut probe = x.clone();
    let mut numerics = Vec::with_capacity(coords.len());
    for &i in &coords {
        let orig = x.data()[i];
        let plus = (orig as f64 + opts.step) as f32;
        let minus = (orig as f64 - opts.step) as f32;
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("grad_check forward".into()));
        }
        // divide by the perturbation actually representable in f32
        numerics.push((fp - fm) / (plus as f64 - minus as f64));
    }
    let scale = analytic
        .iter()
        .map(|a| (*a as f64).abs())
        .chain(numerics.iter().map(|n| n.abs()))
        .fold(opts.floor, f64::max);
    for (&i, &numeric) in coords.iter().zip(&numerics) {
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / scale;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// Checks the tape gradient of `op` at `x`, reducing its output to a scalar
/// with a fixed seeded random projection.
pub fn check_op<F>(op: F, x: &Tensor, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut projection: Option<Vec<f64>> = None;
    let mut eval = |input: &Tensor, want_grad: bool| -> Result<(f64, Option<Vec<f32>>)> {
        let mut tape = Tape::new();
        let xv = tape.param(input.clone());
        let y = op(&mut tape, xv)?;
        let n = tape.value(y).numel();
        let w = projection.get_or_insert_with(|| {
            if n == 1 {
                vec![1.0]
            } else {
                let mut r = Rng::new(opts.seed ^ 0x5eed);
                (0..n).map(|_| r.uniform_range(-1.0, 1.0)).collect()
            }
        });
        let s = tape.weighted_sum(y, w)?;
        let value = tape.scalar(s);
        if !want_grad {
            return Ok((value, None));
        }
        tape.backward(s)?;
        let g = tape
            .grad(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        Ok((value, Some(g)))
    };
    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.expect("gradient requested");
    grad_check(|t| eval(t, false).map(|r| r.0), x, &analytic, opts)
}
