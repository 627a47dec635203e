//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance on `|a - n| / max(|a|, |n|, floor)`.
    pub tolerance: f64,
    /// Rounding error of one loss evaluation, in ulps of the loss. The
    /// difference quotient cannot resolve gradients below
    /// `roundoff_ulps * eps * |f| / step`, so the floor is that bound divided
    /// by `tolerance`.
    pub roundoff_ulps: f64,
    /// Coordinates sampled per parameter (all of them if fewer exist).
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, roundoff_ulps: 8.0, samples_per_param: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates rejected because the probe crossed a kink.
    pub skipped: usize,
    pub worst: Option<Worst>,
}

pub(crate) fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compare `analytic` gradients against central differences of `f`, which
/// returns the loss and a kink fingerprint (see [`Tape::kink_pattern`]).
/// Coordinates whose probes land on different differentiable pieces are
/// replaced by fresh samples.
pub fn finite_difference_check<F>(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    if opts.step <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step {} must be positive", opts.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let (_, base_pattern) = eval_checked(&mut f, &work)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, pass: true, checked: 0, skipped: 0, worst: None };

    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let order: Vec<usize> = sample(&mut rng, n, n).into_vec();
        let target = opts.samples_per_param.min(n);
        let mut accepted = 0;
        for &coord in &order {
            if accepted == target {
                break;
            }
            let orig = p.data()[coord];
            work[pi].data_mut()[coord] = orig + opts.step;
            let (fp, pat_p) = eval_checked(&mut f, &work)?;
            work[pi].data_mut()[coord] = orig - opts.step;
            let (fm, pat_m) = eval_checked(&mut f, &work)?;
            work[pi].data_mut()[coord] = orig;
            if pat_p != base_pattern || pat_m != base_pattern {
                report.skipped += 1;
                continue;
            }
            accepted += 1;
            report.checked += 1;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[pi].data()[coord];
            let resolution = opts.roundoff_ulps * f64::EPSILON * fp.abs().max(fm.abs()) / opts.step;
            let err = relative_error(a, numeric, (resolution / opts.tolerance).max(1e-8));
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst { param: pi, coord, analytic: a, numeric });
            }
        }
    }
    report.pass = report.max_rel_err < opts.tolerance;
    Ok(report)
}

fn eval_checked<F>(f: &mut F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    let (v, pat) = f(params)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteValue(format!("objective evaluated to {v}")));
    }
    Ok((v, pat))
}

/// Gradient check of a tape-built scalar function. `build` receives a fresh
/// tape with one trainable leaf per entry of `params` and returns the loss.
pub fn grad_check<F>(params: &[Tensor<f64>], mut build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFiniteValue(format!("objective evaluated to {value}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    finite_difference_check(
        params,
        &analytic,
        |ps| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            let shape = tape.value(loss).shape();
            if shape != [1] {
                return Err(Error::NonScalarLoss(shape.to_vec()));
            }
            Ok((tape.value(loss).data()[0], tape.kink_pattern()))
        },
        opts,
    )
}
