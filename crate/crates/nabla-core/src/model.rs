//! Model zoo: the multi-decoder segmentation network and the
//! inception-recurrent classifier, built as named parameter sets plus
//! wiring descriptions.
//!
//! Segmentation wiring: the encoder runs all stages; one decoder path
//! starts from each of the `n_decoders` deepest stage outputs and
//! expands back to full resolution. Every decoder level concatenates
//! the matching encoder feature after upsampling (skip connection). In
//! fusion variants B and AB each level additionally adds, elementwise,
//! the same-stage output of the neighboring decoder that starts one
//! stage shallower; those adds carry no parameters, so all three
//! variants share one parameter layout. Decoder outputs are
//! concatenated in path order and reduced by a 1x1 convolution to one
//! sigmoid map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blocks::{
    self, BnP, ConvP, ConvTP, DecoderLevelP, DecoderOut, DecoderP, FwdCtx, IrruP, Mode, RclP, RrcuP,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::ValueId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Nabla,
    Irrcnn,
}

/// Decoder fusion variant. A: encoder-decoder concatenation skips only.
/// B: additionally fuses neighboring decoders by elementwise addition.
/// AB: both mechanisms (B already includes the skips, so B and AB wire
/// identically; the distinction is kept for configuration fidelity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    AB,
}

impl Variant {
    pub fn has_add_fusion(&self) -> bool {
        matches!(self, Variant::B | Variant::AB)
    }
}

fn default_variant() -> Variant {
    Variant::AB
}
fn default_n_decoders() -> usize {
    2
}
fn default_t() -> usize {
    2
}
fn default_input_size() -> usize {
    256
}
fn default_classes() -> usize {
    7
}

/// Architecture description; everything needed to rebuild a model
/// byte-for-byte (given a seed) or to re-attach a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_n_decoders")]
    pub n_decoders: usize,
    /// Per-stage widths. Segmentation: encoder stage widths, shallow to
    /// deep (default 16..512 doubling). Classification: stem width
    /// followed by the three inception unit widths (default 64, 320,
    /// 640, 1280).
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    /// Recurrence steps of every recurrent conv layer.
    #[serde(default = "default_t")]
    pub t: usize,
    /// Square input edge length.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Input channels; defaults to 1 (grayscale) for segmentation and 3
    /// (rgb) for classification.
    #[serde(default)]
    pub in_channels: Option<usize>,
    /// Output classes (classification only).
    #[serde(default = "default_classes")]
    pub classes: usize,
}

pub const NABLA_DEFAULT_WIDTHS: [usize; 6] = [16, 32, 64, 128, 256, 512];
pub const IRRCNN_DEFAULT_WIDTHS: [usize; 4] = [64, 320, 640, 1280];

impl ModelSpec {
    pub fn nabla(variant: Variant, n_decoders: usize) -> Self {
        ModelSpec {
            family: Family::Nabla,
            variant,
            n_decoders,
            widths: None,
            t: default_t(),
            input_size: default_input_size(),
            in_channels: None,
            classes: default_classes(),
        }
    }

    pub fn irrcnn() -> Self {
        ModelSpec {
            family: Family::Irrcnn,
            variant: default_variant(),
            n_decoders: default_n_decoders(),
            widths: None,
            t: default_t(),
            input_size: 192,
            in_channels: None,
            classes: default_classes(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        match (&self.widths, self.family) {
            (Some(w), _) => w.clone(),
            (None, Family::Nabla) => NABLA_DEFAULT_WIDTHS.to_vec(),
            (None, Family::Irrcnn) => IRRCNN_DEFAULT_WIDTHS.to_vec(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels.unwrap_or(match self.family {
            Family::Nabla => 1,
            Family::Irrcnn => 3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if self.t > 16 {
            return Err(Error::invalid("model_spec", format!("t={} recurrence steps is unreasonable", self.t)));
        }
        if self.in_channels() == 0 {
            return Err(Error::invalid("model_spec", "in_channels must be positive"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("model_spec", "widths must be positive"));
        }
        match self.family {
            Family::Nabla => {
                let stages = widths.len();
                if stages < 2 {
                    return Err(Error::invalid("model_spec", "need at least two encoder stages"));
                }
                if widths.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid(
                        "model_spec",
                        format!("encoder widths {:?} must be strictly increasing", widths),
                    ));
                }
                if !(1..=4).contains(&self.n_decoders) {
                    return Err(Error::invalid(
                        "model_spec",
                        format!("n_decoders={} outside supported range 1..=4", self.n_decoders),
                    ));
                }
                if self.n_decoders > stages {
                    return Err(Error::invalid(
                        "model_spec",
                        format!("{} decoders but only {} encoder stages", self.n_decoders, stages),
                    ));
                }
                if !self.input_size.is_power_of_two() || self.input_size < (1 << (stages - 1)) {
                    return Err(Error::invalid(
                        "model_spec",
                        format!(
                            "input_size={} must be a power of two >= {} to survive {} poolings",
                            self.input_size,
                            1 << (stages - 1),
                            stages - 1
                        ),
                    ));
                }
            }
            Family::Irrcnn => {
                if widths.len() != 4 {
                    return Err(Error::invalid(
                        "model_spec",
                        format!("classification widths need stem + 3 unit entries, got {}", widths.len()),
                    ));
                }
                for &w in &widths[1..] {
                    if w % 4 != 0 {
                        return Err(Error::invalid(
                            "model_spec",
                            format!("inception unit width {} must be divisible by 4", w),
                        ));
                    }
                }
                if self.input_size == 0 || self.input_size % 8 != 0 {
                    return Err(Error::invalid(
                        "model_spec",
                        format!("input_size={} must be divisible by 8 (three 2x2 poolings)", self.input_size),
                    ));
                }
                if self.classes < 2 {
                    return Err(Error::invalid("model_spec", "need at least two classes"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NablaArch {
    pub encoder: Vec<RrcuP>,
    /// Decoder paths in path order: index 0 starts at the deepest stage.
    pub decoders: Vec<DecoderP>,
    pub head: ConvP,
}

#[derive(Debug, Clone)]
pub struct IrrcnnArch {
    pub stem: ConvP,
    pub units: Vec<IrruP>,
    pub head: ConvP,
}

#[derive(Debug, Clone)]
pub enum Arch {
    Nabla(NablaArch),
    Irrcnn(IrrcnnArch),
}

/// A built model: validated spec, named parameters, wiring.
#[derive(Debug, Clone)]
pub struct Model<E> {
    pub spec: ModelSpec,
    pub params: ParamSet<E>,
    pub arch: Arch,
}

struct ParamBuilder<E> {
    set: ParamSet<E>,
    rng: ChaCha8Rng,
}

impl<E: Scalar> ParamBuilder<E> {
    fn new(seed: u64) -> Self {
        ParamBuilder { set: ParamSet::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-normal kernel: std = sqrt(2 / fan_in). Sampled in f64 so the
    /// draw sequence is identical across element types.
    fn kernel(&mut self, name: String, shape: Shape, fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data: Vec<E> =
            (0..shape.numel()).map(|_| E::from_f64(normal.sample(&mut self.rng))).collect();
        self.set.add(name, Tensor::new(shape, data)?, true)
    }

    fn const_param(&mut self, name: String, c: usize, v: f64, trainable: bool) -> Result<ParamId> {
        self.set.add(name, Tensor::full(Shape::new(1, c, 1, 1), E::from_f64(v)), trainable)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, pad: usize) -> Result<ConvP> {
        let w = self.kernel(format!("{name}.w"), Shape::new(cout, cin, k, k), cin * k * k)?;
        let b = self.const_param(format!("{name}.b"), cout, 0.0, true)?;
        Ok(ConvP { w, b: Some(b), pad })
    }

    fn convt(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvTP> {
        let w = self.kernel(format!("{name}.w"), Shape::new(cin, cout, k, k), cin * k * k)?;
        let b = self.const_param(format!("{name}.b"), cout, 0.0, true)?;
        Ok(ConvTP { w, b: Some(b) })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnP> {
        Ok(BnP {
            gamma: self.const_param(format!("{name}.gamma"), c, 1.0, true)?,
            beta: self.const_param(format!("{name}.beta"), c, 0.0, true)?,
            running_mean: self.const_param(format!("{name}.running_mean"), c, 0.0, false)?,
            running_var: self.const_param(format!("{name}.running_var"), c, 1.0, false)?,
            batches: self.const_param(format!("{name}.batches"), 1, 0.0, false)?,
        })
    }

    fn rcl(&mut self, name: &str, cin: usize, cout: usize, t: usize) -> Result<RclP> {
        Ok(RclP {
            ff: self.conv(&format!("{name}.ff"), cin, cout, 3, 1)?,
            rec: self.conv(&format!("{name}.rec"), cout, cout, 3, 1)?,
            bn: self.bn(&format!("{name}.bn"), cout)?,
            steps: t,
        })
    }

    fn rrcu(&mut self, name: &str, cin: usize, cout: usize, t: usize) -> Result<RrcuP> {
        let proj = if cin != cout { Some(self.conv(&format!("{name}.proj"), cin, cout, 1, 0)?) } else { None };
        Ok(RrcuP {
            proj,
            rcl1: self.rcl(&format!("{name}.rcl1"), cout, cout, t)?,
            rcl2: self.rcl(&format!("{name}.rcl2"), cout, cout, t)?,
        })
    }

    fn irru(&mut self, name: &str, cin: usize, cout: usize, t: usize) -> Result<IrruP> {
        let quarter = cout / 4;
        Ok(IrruP {
            branch_conv: self.conv(&format!("{name}.br_conv"), cin, quarter, 1, 0)?,
            branch_rcl: self.rcl(&format!("{name}.br_rcl"), cin, quarter, t)?,
            branch_stack: (
                self.rcl(&format!("{name}.br_stack1"), cin, quarter, t)?,
                self.rcl(&format!("{name}.br_stack2"), quarter, quarter, t)?,
            ),
            branch_pool_conv: self.conv(&format!("{name}.br_pool"), cin, quarter, 1, 0)?,
            residual_proj: self.conv(&format!("{name}.res"), cin, cout, 1, 0)?,
        })
    }
}

impl<E: Scalar> Model<E> {
    /// Builds and initializes a model. Identical spec and seed yield
    /// identical parameter values, in identical creation order.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::<E>::new(seed);
        let arch = match spec.family {
            Family::Nabla => Arch::Nabla(build_nabla(spec, &mut b)?),
            Family::Irrcnn => Arch::Irrcnn(build_irrcnn(spec, &mut b)?),
        };
        Ok(Model { spec: spec.clone(), params: b.set, arch })
    }

    /// Trainable scalar count.
    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    /// Segmentation forward pass: input `N x C_in x S x S`, output
    /// sigmoid map `N x 1 x S x S` on the returned tape.
    pub fn forward_segment(
        &self,
        input: Tensor<E>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(FwdCtx<'_, E>, ValueId)> {
        self.forward_segment_with(&self.params, input, mode, track_grads)
    }

    /// Like [`forward_segment`](Self::forward_segment) but reads values
    /// from an external parameter set (same layout as `self.params`).
    /// Gradient checking uses this to evaluate perturbed copies.
    pub fn forward_segment_with<'p>(
        &self,
        params: &'p ParamSet<E>,
        input: Tensor<E>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(FwdCtx<'p, E>, ValueId)> {
        let Arch::Nabla(arch) = &self.arch else {
            return Err(Error::invalid("forward_segment", "not a segmentation model"));
        };
        self.check_input(&input)?;
        let mut ctx = FwdCtx::new(params, mode, track_grads);
        let x = ctx.input(input);
        let enc = blocks::encoder_forward(&mut ctx, x, &arch.encoder)?;
        // Shallowest-starting path first: each path's additive donor is
        // the one computed just before it.
        let mut outs: Vec<Option<DecoderOut>> = (0..arch.decoders.len()).map(|_| None).collect();
        for k in (0..arch.decoders.len()).rev() {
            let donor = if k + 1 < arch.decoders.len() { outs[k + 1].as_ref() } else { None };
            outs[k] = Some(blocks::decoder_forward(&mut ctx, &arch.decoders[k], &enc, donor)?);
        }
        let mut cat = outs[0].as_ref().expect("computed").final_output();
        for out in outs.iter().skip(1) {
            cat = ctx.tape.concat_channels(cat, out.as_ref().expect("computed").final_output())?;
        }
        let logits = blocks::conv_apply(&mut ctx, cat, &arch.head)?;
        let y = ctx.tape.sigmoid(logits);
        Ok((ctx, y))
    }

    /// Classification forward pass: input `N x C_in x S x S`, output
    /// probability rows `N x K x 1 x 1` on the returned tape.
    pub fn forward_classify(
        &self,
        input: Tensor<E>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(FwdCtx<'_, E>, ValueId)> {
        self.forward_classify_with(&self.params, input, mode, track_grads)
    }

    /// [`forward_classify`](Self::forward_classify) against an external
    /// parameter set with the layout of `self.params`.
    pub fn forward_classify_with<'p>(
        &self,
        params: &'p ParamSet<E>,
        input: Tensor<E>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<(FwdCtx<'p, E>, ValueId)> {
        let Arch::Irrcnn(arch) = &self.arch else {
            return Err(Error::invalid("forward_classify", "not a classification model"));
        };
        self.check_input(&input)?;
        let mut ctx = FwdCtx::new(params, mode, track_grads);
        let x = ctx.input(input);
        let mut h = blocks::conv_apply(&mut ctx, x, &arch.stem)?;
        for unit in &arch.units {
            h = blocks::irru_forward(&mut ctx, h, unit)?;
            h = ctx.tape.maxpool2d(h)?;
        }
        let pooled = ctx.tape.global_avg_pool(h);
        let logits = blocks::conv_apply(&mut ctx, pooled, &arch.head)?;
        let y = ctx.tape.softmax(logits)?;
        Ok((ctx, y))
    }

    /// Inference-only forward returning the output tensor.
    pub fn infer(&self, input: Tensor<E>) -> Result<Tensor<E>> {
        let (ctx, y) = match self.spec.family {
            Family::Nabla => self.forward_segment(input, Mode::Infer, false)?,
            Family::Irrcnn => self.forward_classify(input, Mode::Infer, false)?,
        };
        Ok(ctx.tape.value(y).clone())
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<()> {
        let s = input.shape();
        let want_c = self.spec.in_channels();
        let want_s = self.spec.input_size;
        if s.n() == 0 || s.c() != want_c || s.h() != want_s || s.w() != want_s {
            return Err(Error::shape(
                "forward",
                format!("input {} but model expects Nx{}x{}x{}", s, want_c, want_s, want_s),
            ));
        }
        Ok(())
    }

    /// Wiring summary used to compare fusion variants.
    pub fn structure(&self) -> Structure {
        match &self.arch {
            Arch::Nabla(arch) => Structure::Nabla {
                decoders: arch
                    .decoders
                    .iter()
                    .enumerate()
                    .map(|(k, d)| DecoderStructure {
                        start_stage: d.start_stage,
                        levels: d
                            .levels
                            .iter()
                            .map(|l| LevelStructure {
                                stage: l.stage,
                                skip_from_encoder: l.stage,
                                add_from_decoder: if l.fuse_add { Some(k + 1) } else { None },
                            })
                            .collect(),
                    })
                    .collect(),
            },
            Arch::Irrcnn(arch) => Structure::Irrcnn { units: arch.units.len() },
        }
    }
}

/// Param-free wiring description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Structure {
    Nabla { decoders: Vec<DecoderStructure> },
    Irrcnn { units: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecoderStructure {
    pub start_stage: usize,
    pub levels: Vec<LevelStructure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LevelStructure {
    pub stage: usize,
    pub skip_from_encoder: usize,
    /// Index (0-based, path order) of the decoder whose same-stage
    /// output is added after the upsample, when additive fusion is
    /// wired.
    pub add_from_decoder: Option<usize>,
}

impl Structure {
    /// Total decoder-to-decoder elementwise-add edges.
    pub fn add_fusion_edges(&self) -> usize {
        match self {
            Structure::Nabla { decoders } => decoders
                .iter()
                .flat_map(|d| &d.levels)
                .filter(|l| l.add_from_decoder.is_some())
                .count(),
            Structure::Irrcnn { .. } => 0,
        }
    }
}

fn build_nabla<E: Scalar>(spec: &ModelSpec, b: &mut ParamBuilder<E>) -> Result<NablaArch> {
    let widths = spec.widths();
    let stages = widths.len();
    let t = spec.t;

    let mut encoder = Vec::with_capacity(stages);
    let mut cin = spec.in_channels();
    for (i, &w) in widths.iter().enumerate() {
        encoder.push(b.rrcu(&format!("enc{i}"), cin, w, t)?);
        cin = w;
    }

    let mut decoders = Vec::with_capacity(spec.n_decoders);
    for k in 1..=spec.n_decoders {
        let start_stage = stages - k;
        // The donor path (k+1) starts one stage shallower; its outputs
        // exist at stages strictly below its start stage.
        let donor_start = start_stage.saturating_sub(1);
        let mut levels = Vec::with_capacity(start_stage);
        for stage in (0..start_stage).rev() {
            let name = format!("dec{k}.lvl{stage}");
            let up = b.convt(&format!("{name}.up"), widths[stage + 1], widths[stage], 2)?;
            let fuse_add =
                spec.variant.has_add_fusion() && k < spec.n_decoders && stage < donor_start;
            let rrcu = b.rrcu(&format!("{name}.rrcu"), 2 * widths[stage], widths[stage], t)?;
            levels.push(DecoderLevelP { stage, up, fuse_add, rrcu });
        }
        decoders.push(DecoderP { start_stage, levels });
    }

    let head = b.conv("head", spec.n_decoders * widths[0], 1, 1, 0)?;
    Ok(NablaArch { encoder, decoders, head })
}

fn build_irrcnn<E: Scalar>(spec: &ModelSpec, b: &mut ParamBuilder<E>) -> Result<IrrcnnArch> {
    let widths = spec.widths();
    let t = spec.t;
    let stem = b.conv("stem", spec.in_channels(), widths[0], 3, 1)?;
    let mut units = Vec::with_capacity(3);
    let mut cin = widths[0];
    for (i, &w) in widths[1..].iter().enumerate() {
        units.push(b.irru(&format!("irru{i}"), cin, w, t)?);
        cin = w;
    }
    let head = b.conv("head", cin, spec.classes, 1, 0)?;
    Ok(IrrcnnArch { stem, units, head })
}

/// Trainable parameter count of a spec (builds a throwaway model).
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    Ok(Model::<f32>::build(spec, 0)?.count_params())
}
