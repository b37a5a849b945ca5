//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{Tape, ValueId};

/// Perturbing every parameter is only feasible for small models.
pub const MAX_CHECKED_PARAMS: usize = 50_000;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
    pub pass: bool,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

fn loss_of<B>(params: &ModelParams, build: &B) -> Result<f64>
where
    B: Fn(&ModelParams, &mut Tape) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = build(params, &mut tape)?;
    tape.value(loss).item()
}

/// Gradients of the built loss for each parameter, by tape backward.
pub fn tape_gradients<B>(params: &ModelParams, build: &B) -> Result<ModelParams>
where
    B: Fn(&ModelParams, &mut Tape) -> Result<ValueId>,
{
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&work, &mut tape)?;
    tape.backward(loss, &mut work)?;
    Ok(work)
}

/// Compare supplied analytic gradients against central differences of the
/// forward loss. Split out from [`finite_diff_check`] so a corrupted
/// gradient can be fed in as a negative control.
pub fn compare_against_fd<B>(
    params: &ModelParams,
    grads: &ModelParams,
    build: &B,
    tolerance: f64,
    step: f64,
) -> Result<FdReport>
where
    B: Fn(&ModelParams, &mut Tape) -> Result<ValueId>,
{
    let total = params.total_scalars();
    if total > MAX_CHECKED_PARAMS {
        return Err(Error::Argument(format!(
            "finite_diff_check: {total} parameters exceed the {MAX_CHECKED_PARAMS} cap"
        )));
    }
    let base_loss = loss_of(params, build)?;
    // Relative error floor keyed to the loss scale: below it, the central
    // difference itself is dominated by f64 cancellation.
    let floor = 1e-6 * base_loss.abs().max(1.0);

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut per_param = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let name = params.at(idx).name.clone();
        let mut tensor_worst = 0.0f64;
        for j in 0..params.at(idx).value.len() {
            let orig = work.at(idx).value.data()[j];
            work.at_mut(idx).value.data_mut()[j] = orig + step;
            let lp = loss_of(&work, build)?;
            work.at_mut(idx).value.data_mut()[j] = orig - step;
            let lm = loss_of(&work, build)?;
            work.at_mut(idx).value.data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let ad = grads.at(idx).grad.data()[j];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            if rel > tensor_worst {
                tensor_worst = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{j}]");
            }
        }
        per_param.push((name, tensor_worst));
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        worst_param: worst,
        checked: total,
        pass: max_rel < tolerance,
        per_param,
    })
}

/// Backpropagate through `build` and verify every parameter gradient against
/// central differences at the given step.
pub fn finite_diff_check<B>(
    params: &ModelParams,
    build: &B,
    tolerance: f64,
    step: f64,
) -> Result<FdReport>
where
    B: Fn(&ModelParams, &mut Tape) -> Result<ValueId>,
{
    let grads = tape_gradients(params, build)?;
    compare_against_fd(params, &grads, build, tolerance, step)
}
