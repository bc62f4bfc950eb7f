//! Recurrent-residual building blocks, composed from the tape ops.
//!
//! Blocks hold [`ParamId`]s, not tensors; a [`FwdCtx`] binds each
//! parameter onto the tape at most once per forward pass, so a kernel
//! applied at several recurrence steps is one tape leaf and its
//! gradient accumulates across steps. Batchnorm running statistics are
//! not tape values: training-mode updates are staged in the context and
//! applied to the parameter set only after the step commits.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::ValueId;

/// Decay of the old running estimate in the batchnorm update
/// `running = momentum * running + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One forward pass: a tape plus the parameter bindings and staged
/// state updates belonging to it.
pub struct FwdCtx<'p, E> {
    pub tape: Tape<E>,
    params: &'p ParamSet<E>,
    mode: Mode,
    track_grads: bool,
    bound: Vec<Option<ValueId>>,
    staged_state: HashMap<usize, Vec<E>>,
}

impl<'p, E: Scalar> FwdCtx<'p, E> {
    /// `track_grads` controls whether trainable parameters become
    /// gradient-tracking leaves; inference passes run cheaper without.
    pub fn new(params: &'p ParamSet<E>, mode: Mode, track_grads: bool) -> Self {
        FwdCtx {
            tape: Tape::new(),
            params,
            mode,
            track_grads,
            bound: vec![None; params.len()],
            staged_state: HashMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Registers a network input (never gradient-tracking).
    pub fn input(&mut self, value: Tensor<E>) -> ValueId {
        self.tape.leaf(value, false)
    }

    /// Tape leaf for a parameter; one slot per parameter per pass.
    pub fn bind(&mut self, id: ParamId) -> ValueId {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.params.entry(id);
        let rg = self.track_grads && entry.trainable;
        let v = self.tape.leaf(entry.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Tape slot of a bound parameter, if it participated in this pass.
    pub fn bound_slot(&self, id: ParamId) -> Option<ValueId> {
        self.bound[id.0]
    }

    /// Current state value: staged update if present, else the stored
    /// entry. Repeated batchnorm applications in one pass compound.
    fn state(&self, id: ParamId) -> &[E] {
        match self.staged_state.get(&id.0) {
            Some(v) => v,
            None => self.params.value(id).data(),
        }
    }

    fn stage_state(&mut self, id: ParamId, v: Vec<E>) {
        self.staged_state.insert(id.0, v);
    }

    /// Staged state updates in parameter order, for the caller to apply
    /// once the step is accepted.
    pub fn take_state_updates(&mut self) -> Vec<(ParamId, Vec<E>)> {
        let mut updates: Vec<(usize, Vec<E>)> = self.staged_state.drain().collect();
        updates.sort_by_key(|(i, _)| *i);
        updates.into_iter().map(|(i, v)| (ParamId(i), v)).collect()
    }
}

/// Convolution parameters: kernel, optional bias, symmetric padding.
#[derive(Debug, Clone)]
pub struct ConvP {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub pad: usize,
}

/// Transpose-convolution parameters (stride 2, exact doubling).
#[derive(Debug, Clone)]
pub struct ConvTP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Batchnorm parameters plus running state.
#[derive(Debug, Clone)]
pub struct BnP {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Scalar count of committed training-mode applications; inference
    /// is rejected while it is zero.
    pub batches: ParamId,
}

/// Recurrent conv layer: a feed-forward and a recurrent kernel shared
/// across `steps` unrolled iterations.
#[derive(Debug, Clone)]
pub struct RclP {
    pub ff: ConvP,
    pub rec: ConvP,
    pub bn: BnP,
    pub steps: usize,
}

/// Recurrent residual conv unit: optional 1x1 input projection, two
/// stacked RCLs, residual add.
#[derive(Debug, Clone)]
pub struct RrcuP {
    pub proj: Option<ConvP>,
    pub rcl1: RclP,
    pub rcl2: RclP,
}

/// Inception recurrent residual unit: four parallel branches at a
/// quarter of the output width each, concatenated, plus a 1x1 residual
/// projection.
#[derive(Debug, Clone)]
pub struct IrruP {
    pub branch_conv: ConvP,
    pub branch_rcl: RclP,
    pub branch_stack: (RclP, RclP),
    pub branch_pool_conv: ConvP,
    pub residual_proj: ConvP,
}

pub fn conv_apply<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &ConvP) -> Result<ValueId> {
    let w = ctx.bind(p.w);
    let b = p.b.map(|b| ctx.bind(b));
    ctx.tape.conv2d(x, w, b, p.pad)
}

pub fn convt_apply<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &ConvTP) -> Result<ValueId> {
    let w = ctx.bind(p.w);
    let b = p.b.map(|b| ctx.bind(b));
    ctx.tape.conv_transpose2d(x, w, b)
}

pub fn bn_apply<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &BnP) -> Result<ValueId> {
    let gamma = ctx.bind(p.gamma);
    let beta = ctx.bind(p.beta);
    match ctx.mode {
        Mode::Train => {
            let (y, moments) = ctx.tape.batchnorm_train(x, gamma, beta)?;
            let mom = E::from_f64(BN_MOMENTUM);
            let one_m = E::one() - mom;
            let new_mean: Vec<E> = ctx
                .state(p.running_mean)
                .iter()
                .zip(&moments.mean)
                .map(|(&old, &b)| mom * old + one_m * b)
                .collect();
            let new_var: Vec<E> = ctx
                .state(p.running_var)
                .iter()
                .zip(&moments.var)
                .map(|(&old, &b)| mom * old + one_m * b)
                .collect();
            let count = ctx.state(p.batches)[0] + E::one();
            ctx.stage_state(p.running_mean, new_mean);
            ctx.stage_state(p.running_var, new_var);
            ctx.stage_state(p.batches, vec![count]);
            Ok(y)
        }
        Mode::Infer => {
            if ctx.state(p.batches)[0] == E::zero() {
                return Err(Error::BnStatsUnpopulated);
            }
            let rm = ctx.state(p.running_mean).to_vec();
            let rv = ctx.state(p.running_var).to_vec();
            ctx.tape.batchnorm_infer(x, gamma, beta, &rm, &rv)
        }
    }
}

/// Unrolled recurrent conv layer.
///
/// `s_0 = relu(bn(ff * x))`, then for each of the `steps` recurrence
/// iterations `s_k = relu(bn(ff * x + rec * s_{k-1}))`, with all
/// kernels and the batchnorm shared across iterations.
pub fn rcl_forward<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &RclP) -> Result<ValueId> {
    let ff = conv_apply(ctx, x, &p.ff)?;
    let mut state = {
        let n = bn_apply(ctx, ff, &p.bn)?;
        ctx.tape.relu(n)
    };
    for _ in 0..p.steps {
        let rec = conv_apply(ctx, state, &p.rec)?;
        let pre = ctx.tape.add(ff, rec)?;
        let n = bn_apply(ctx, pre, &p.bn)?;
        state = ctx.tape.relu(n);
    }
    Ok(state)
}

/// Two stacked RCLs with a residual connection around them. The input
/// passes through a 1x1 projection when its width differs from the
/// output width; otherwise the identity is used.
pub fn rrcu_forward<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &RrcuP) -> Result<ValueId> {
    let shortcut = match &p.proj {
        Some(proj) => conv_apply(ctx, x, proj)?,
        None => x,
    };
    let h = rcl_forward(ctx, shortcut, &p.rcl1)?;
    let h = rcl_forward(ctx, h, &p.rcl2)?;
    ctx.tape.add(shortcut, h)
}

/// Four parallel branches (1x1 conv; 3x3 RCL; two stacked 3x3 RCLs;
/// 3x3/s1/p1 max pool then 1x1 conv), concatenated and added to a 1x1
/// projection of the input.
pub fn irru_forward<E: Scalar>(ctx: &mut FwdCtx<E>, x: ValueId, p: &IrruP) -> Result<ValueId> {
    let a = conv_apply(ctx, x, &p.branch_conv)?;
    let b = rcl_forward(ctx, x, &p.branch_rcl)?;
    let c = {
        let h = rcl_forward(ctx, x, &p.branch_stack.0)?;
        rcl_forward(ctx, h, &p.branch_stack.1)?
    };
    let d = {
        let pooled = ctx.tape.maxpool(x, 3, 1, 1)?;
        conv_apply(ctx, pooled, &p.branch_pool_conv)?
    };
    let ab = ctx.tape.concat_channels(a, b)?;
    let cd = ctx.tape.concat_channels(c, d)?;
    let cat = ctx.tape.concat_channels(ab, cd)?;
    let shortcut = conv_apply(ctx, x, &p.residual_proj)?;
    ctx.tape.add(shortcut, cat)
}

/// Contracting path: RRCU at full resolution, then (pool, RRCU) per
/// deeper stage. Returns the per-stage RRCU outputs, shallowest first;
/// stage `i` has spatial extent `input / 2^i`.
pub fn encoder_forward<E: Scalar>(
    ctx: &mut FwdCtx<E>,
    x: ValueId,
    stages: &[RrcuP],
) -> Result<Vec<ValueId>> {
    let mut feats = Vec::with_capacity(stages.len());
    let mut h = x;
    for (i, stage) in stages.iter().enumerate() {
        if i > 0 {
            h = ctx.tape.maxpool2d(h)?;
        }
        h = rrcu_forward(ctx, h, stage)?;
        feats.push(h);
    }
    Ok(feats)
}

/// One expanding level of a decoder.
#[derive(Debug, Clone)]
pub struct DecoderLevelP {
    /// Stage index this level's output lives at.
    pub stage: usize,
    pub up: ConvTP,
    /// Elementwise add of the neighboring decoder's same-stage output
    /// onto the upsampled maps (fusion variants B/AB).
    pub fuse_add: bool,
    pub rrcu: RrcuP,
}

/// One decoder path: starts from the encoder feature at `start_stage`
/// and expands level by level back to stage 0.
#[derive(Debug, Clone)]
pub struct DecoderP {
    pub start_stage: usize,
    pub levels: Vec<DecoderLevelP>,
}

/// Per-stage outputs of one decoder, consumed by the neighboring
/// decoder's additive fusion. Index is the stage; `None` above the
/// start stage.
pub struct DecoderOut {
    pub by_stage: Vec<Option<ValueId>>,
}

impl DecoderOut {
    pub fn final_output(&self) -> ValueId {
        self.by_stage[0].expect("decoder reaches stage 0")
    }
}

/// Runs one decoder. `donor` is the already-computed output map of the
/// neighboring decoder (the one starting one stage shallower), whose
/// same-stage intermediates are added after each upsample when the
/// level's `fuse_add` is set. Skip concatenation with the encoder
/// feature happens at every level: channels are (upsampled, skip).
pub fn decoder_forward<E: Scalar>(
    ctx: &mut FwdCtx<E>,
    p: &DecoderP,
    enc_feats: &[ValueId],
    donor: Option<&DecoderOut>,
) -> Result<DecoderOut> {
    let mut by_stage: Vec<Option<ValueId>> = vec![None; enc_feats.len()];
    let mut h = enc_feats[p.start_stage];
    if p.start_stage == 0 {
        // Degenerate path allowed by `n_decoders == stages`: the
        // stage-0 latent is already at full resolution.
        by_stage[0] = Some(h);
        return Ok(DecoderOut { by_stage });
    }
    for level in &p.levels {
        let mut up = convt_apply(ctx, h, &level.up)?;
        if level.fuse_add {
            let d = donor
                .and_then(|d| d.by_stage[level.stage])
                .ok_or_else(|| Error::invalid("decoder", format!("no fusion donor at stage {}", level.stage)))?;
            up = ctx.tape.add(up, d)?;
        }
        let cat = ctx.tape.concat_channels(up, enc_feats[level.stage])?;
        h = rrcu_forward(ctx, cat, &level.rrcu)?;
        by_stage[level.stage] = Some(h);
    }
    if by_stage[0].is_none() {
        return Err(Error::invalid("decoder", "decoder does not reach stage 0"));
    }
    Ok(DecoderOut { by_stage })
}
