//! Central finite-difference gradient checking, always in f64.
//!
//! Two harnesses: [`grad_check`] perturbs explicit input tensors of a
//! closure-built graph (op-level checks), [`grad_check_model`] perturbs
//! every trainable entry of a [`ParamSet`] through a forward closure
//! (block- and model-level checks). Relative error uses
//! `|a - n| / max(|a| + |n|, floor)`; the floor keeps finite-difference
//! noise on dead units from registering as failure.

use crate::blocks::FwdCtx;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ValueId;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-3, tol: 1e-4, denom_floor: 1e-6 }
    }
}

impl GradCheckConfig {
    pub fn with_step(step: f64) -> Self {
        GradCheckConfig { step, ..Default::default() }
    }
}

/// Worst element of one checked tensor.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub at_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_params(params: Vec<ParamReport>, tol: f64) -> Self {
        let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
        GradCheckReport { params, max_rel_err, passed: max_rel_err <= tol }
    }

    /// Worst tensor first; handy in assertion messages.
    pub fn worst(&self) -> Option<&ParamReport> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(floor)
}

fn check_finite(loss: f64, context: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: context.to_string() });
    }
    Ok(())
}

/// Checks gradients of `f`'s scalar output with respect to each named
/// input tensor. `f` must be a pure function of the leaves it is given
/// (same order as `inputs`).
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let eval = |tensors: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Vec<ValueId>, ValueId)> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let loss = f(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, ids, loss) = eval(&base, true)?;
    check_finite(tape.value(loss).item()?, "grad_check: base evaluation")?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&base)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.shape().numel()]))
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let mut worst = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            at_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensor.shape().numel() {
            let mut probe = base.clone();
            probe[k].data_mut()[i] += cfg.step;
            let (tape_p, _, loss_p) = eval(&probe, false)?;
            let lp = tape_p.value(loss_p).item()?;
            probe[k].data_mut()[i] -= 2.0 * cfg.step;
            let (tape_m, _, loss_m) = eval(&probe, false)?;
            let lm = tape_m.value(loss_m).item()?;
            check_finite(lp, &format!("grad_check: {}[{}] +step", name, i))?;
            check_finite(lm, &format!("grad_check: {}[{}] -step", name, i))?;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let err = rel_err(analytic[k][i], numeric, cfg.denom_floor);
            if err > worst.max_rel_err {
                worst = ParamReport {
                    name: name.clone(),
                    max_rel_err: err,
                    at_index: i,
                    analytic: analytic[k][i],
                    numeric,
                };
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport::from_params(reports, cfg.tol))
}

/// Checks gradients with respect to every trainable entry of `params`.
/// `run(params, track_grads)` builds a forward pass ending in a scalar
/// loss; parameters the pass never binds are expected to have zero
/// gradient and are verified like the rest.
pub fn grad_check_model<F>(
    params: &ParamSet<f64>,
    run: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>, bool) -> Result<(FwdCtx<'_, f64>, ValueId)>,
{
    let (mut ctx, loss) = run(params, true)?;
    check_finite(ctx.tape.value(loss).item()?, "grad_check: base evaluation")?;
    ctx.tape.backward(loss)?;

    let trainable: Vec<_> = params.iter().filter(|(_, e)| e.trainable).collect();
    let mut reports = Vec::with_capacity(trainable.len());
    for (id, entry) in trainable {
        let numel = entry.value.shape().numel();
        let analytic: Vec<f64> = ctx
            .bound_slot(id)
            .and_then(|slot| ctx.tape.grad(slot).map(|g| g.to_vec()))
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut worst = ParamReport {
            name: entry.name.clone(),
            max_rel_err: 0.0,
            at_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..numel {
            let mut probe = params.clone();
            probe.entry_mut(id).value.data_mut()[i] += cfg.step;
            let (ctx_p, loss_p) = run(&probe, false)?;
            let lp = ctx_p.tape.value(loss_p).item()?;
            probe.entry_mut(id).value.data_mut()[i] -= 2.0 * cfg.step;
            let (ctx_m, loss_m) = run(&probe, false)?;
            let lm = ctx_m.tape.value(loss_m).item()?;
            check_finite(lp, &format!("grad_check: {}[{}] +step", entry.name, i))?;
            check_finite(lm, &format!("grad_check: {}[{}] -step", entry.name, i))?;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let err = rel_err(analytic[i], numeric, cfg.denom_floor);
            if err > worst.max_rel_err {
                worst = ParamReport {
                    name: entry.name.clone(),
                    max_rel_err: err,
                    at_index: i,
                    analytic: analytic[i],
                    numeric,
                };
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport::from_params(reports, cfg.tol))
}
