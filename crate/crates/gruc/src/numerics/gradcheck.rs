//! Finite-difference verification of tape gradients.
//!
//! The checker treats the loss builder as a black box `f(params) -> scalar`,
//! takes analytic gradients from one backward pass, then probes a random
//! subset of coordinates with central differences. Before measuring anything
//! it evaluates the loss twice and requires bit-identical results; comparing
//! a noisy function against finite differences would be meaningless.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use super::params::ParameterSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum relative error accepted per coordinate.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor.
    pub max_coords: usize,
    /// Relative error uses `max(|analytic|, |numeric|, zero_floor)` as the
    /// denominator. Central differences resolve a gradient coordinate only
    /// down to roughly `machine_eps * |loss| / eps` (about 1e-11 for a
    /// unit-scale loss); below the floor a comparison is absolute, so noise
    /// is never divided by noise.
    pub zero_floor: f64,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords: 25,
            zero_floor: 1e-6,
            seed: 0,
        }
    }
}

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct CoordReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<CoordReport>,
    pub coords_checked: usize,
    /// Largest relative error seen per parameter.
    pub per_param: BTreeMap<String, f64>,
}

fn eval_loss<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.value(loss).item()
}

/// Checks the gradients of `f` at `params`.
///
/// `f` must be a pure function of its arguments: any randomness (dropout
/// masks, sampling) has to be frozen by the caller. A loss that fails the
/// bit-identity pre-check is rejected as non-deterministic.
pub fn grad_check<F>(f: F, params: &ParameterSet, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if !(config.eps > 0.0 && config.eps.is_finite()) {
        return Err(Error::domain("grad_check", format!("eps {}", config.eps)));
    }

    let first = eval_loss(&f, params)?;
    let second = eval_loss(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Data(format!(
            "loss is not deterministic: {first:?} vs {second:?}; freeze all randomness before checking gradients"
        )));
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);

    let mut rng = rng::substream(config.seed, "gradcheck/coords");
    let mut report = GradCheckReport {
        passed: true,
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        per_param: BTreeMap::new(),
    };

    // BTreeMap order fixes the sampling sequence.
    for (name, grad) in &analytic {
        let len = grad.len();
        if len == 0 {
            continue;
        }
        let k = config.max_coords.min(len);
        let mut indices: Vec<usize> = sample(&mut rng, len, k).into_iter().collect();
        indices.sort_unstable();

        let mut param_worst: f64 = 0.0;
        for idx in indices {
            let mut plus = params.clone();
            plus.update_value(name, |d| d[idx] += config.eps)?;
            let mut minus = params.clone();
            minus.update_value(name, |d| d[idx] -= config.eps)?;
            let numeric = (eval_loss(&f, &plus)? - eval_loss(&f, &minus)?) / (2.0 * config.eps);
            let a = grad.data()[idx];

            let denom = a.abs().max(numeric.abs()).max(config.zero_floor);
            let rel_err = (a - numeric).abs() / denom;

            report.coords_checked += 1;
            param_worst = param_worst.max(rel_err);
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = Some(CoordReport {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
        report.per_param.insert(name.clone(), param_worst);
    }

    report.passed = report.max_rel_err <= config.tolerance;
    Ok(report)
}
