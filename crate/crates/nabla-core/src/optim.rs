//! Optimizers, learning-rate schedule, and the loss entry points.
//!
//! Gradients travel as one buffer per parameter-set entry, aligned by
//! index; `None` means the entry was absent from the pass and is
//! treated as a zero gradient.

use crate::blocks::FwdCtx;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ValueId;

pub type Grads<E> = Vec<Option<Vec<E>>>;

/// Reads the gradients of every trainable entry off a swept tape.
pub fn collect_grads<E: Scalar>(ctx: &FwdCtx<'_, E>, params: &ParamSet<E>) -> Grads<E> {
    params
        .iter()
        .map(|(id, e)| {
            if !e.trainable {
                return None;
            }
            ctx.bound_slot(id).and_then(|slot| ctx.tape.grad(slot).map(|g| g.to_vec()))
        })
        .collect()
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<E> {
    pub step: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new() -> Self {
        AdamState { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update over all trainable entries.
pub fn adam_step<E: Scalar>(
    params: &mut ParamSet<E>,
    grads: &Grads<E>,
    state: &mut AdamState<E>,
    lr: f64,
) -> Result<()> {
    check_grads(params, grads, "adam_step")?;
    if state.m.is_empty() {
        state.m = moment_buffers(params);
        state.v = moment_buffers(params);
    }
    state.step += 1;
    let b1 = E::from_f64(ADAM_BETA1);
    let b2 = E::from_f64(ADAM_BETA2);
    let one = E::one();
    let corr1 = E::from_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
    let corr2 = E::from_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
    let eps = E::from_f64(ADAM_EPS);
    let lr = E::from_f64(lr);
    let ids: Vec<_> = params.ids().collect();
    for (idx, id) in ids.into_iter().enumerate() {
        if !params.entry(id).trainable {
            continue;
        }
        let zero_grad;
        let g = match &grads[idx] {
            Some(g) => g.as_slice(),
            None => {
                zero_grad = vec![E::zero(); params.value(id).shape().numel()];
                zero_grad.as_slice()
            }
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let p = params.entry_mut(id).value.data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Velocity buffers for momentum SGD.
#[derive(Debug, Clone, Default)]
pub struct SgdState<E> {
    pub velocity: Vec<Vec<E>>,
}

impl<E: Scalar> SgdState<E> {
    pub fn new() -> Self {
        SgdState { velocity: Vec::new() }
    }
}

/// Momentum update: `v = momentum * v + g`, `p = p - lr * v`.
pub fn sgd_momentum_step<E: Scalar>(
    params: &mut ParamSet<E>,
    grads: &Grads<E>,
    state: &mut SgdState<E>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_grads(params, grads, "sgd_momentum_step")?;
    if state.velocity.is_empty() {
        state.velocity = moment_buffers(params);
    }
    let mu = E::from_f64(momentum);
    let lr = E::from_f64(lr);
    let ids: Vec<_> = params.ids().collect();
    for (idx, id) in ids.into_iter().enumerate() {
        if !params.entry(id).trainable {
            continue;
        }
        let zero_grad;
        let g = match &grads[idx] {
            Some(g) => g.as_slice(),
            None => {
                zero_grad = vec![E::zero(); params.value(id).shape().numel()];
                zero_grad.as_slice()
            }
        };
        let v = &mut state.velocity[idx];
        let p = params.entry_mut(id).value.data_mut();
        for i in 0..p.len() {
            v[i] = mu * v[i] + g[i];
            p[i] = p[i] - lr * v[i];
        }
    }
    Ok(())
}

fn moment_buffers<E: Scalar>(params: &ParamSet<E>) -> Vec<Vec<E>> {
    params
        .iter()
        .map(|(_, e)| if e.trainable { vec![E::zero(); e.value.shape().numel()] } else { Vec::new() })
        .collect()
}

fn check_grads<E: Scalar>(params: &ParamSet<E>, grads: &Grads<E>, op: &'static str) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(op, format!("{} gradient slots for {} parameters", grads.len(), params.len())));
    }
    for (id, e) in params.iter() {
        if let Some(g) = &grads[id.0] {
            if g.len() != e.value.shape().numel() {
                return Err(Error::shape(
                    op,
                    format!("gradient of {} elements for parameter {:?} with {}", g.len(), e.name, e.value.shape()),
                ));
            }
        }
    }
    Ok(())
}

/// Step schedule: divide the initial rate by 10 every 50 epochs.
pub fn lr_schedule(initial_lr: f64, epoch: usize) -> f64 {
    initial_lr / 10f64.powi((epoch / 50) as i32)
}

/// Binary cross-entropy loss node (see [`Tape::bce_loss`]).
pub fn bce_loss<E: Scalar>(tape: &mut Tape<E>, pred: ValueId, target: &Tensor<E>) -> Result<ValueId> {
    tape.bce_loss(pred, target)
}

/// Categorical cross-entropy loss node (see [`Tape::cce_loss`]).
pub fn cce_loss<E: Scalar>(tape: &mut Tape<E>, probs: ValueId, labels: &[usize]) -> Result<ValueId> {
    tape.cce_loss(probs, labels)
}
