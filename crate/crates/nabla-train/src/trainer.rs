//! The training loop plus checkpoint-driven evaluation and prediction.
//!
//! A run resolves its dataset (folders or the synthetic generator),
//! holds out a validation slice, optionally triples the training
//! records by flipping, then iterates epochs of shuffled batches.
//! Everything downstream of the seed is deterministic in this
//! single-threaded build, so two identical configs produce bit-equal
//! logs and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nabla_core::blocks::Mode;
use nabla_core::metrics::{
    binarize, classification_report, evaluate_dataset, Aggregation, ClassificationReport, MetricsReport,
};
use nabla_core::model::{Family, Model, ModelSpec};
use nabla_core::optim::{adam_step, collect_grads, sgd_momentum_step, AdamState, SgdState};
use nabla_core::Tensor;

use crate::checkpoint::{Checkpoint, OptimSnapshot, TransferReport};
use crate::config::{DataSource, OptimizerKind, RunConfig, TaskKind};
use crate::data::{
    self, augment_flips, augment_flips_cls, cls_batches, load_classification_dataset,
    load_segmentation_dataset, resize_cls_records, resize_seg_records, seg_batches, select_by_ids, split,
    ClsRecord, Mask, Raster, SegRecord,
};
use crate::error::{Error, Result};
use crate::synth;

/// One completed epoch. For segmentation runs the accuracy columns
/// hold micro-aggregated Dice; for classification, top-1 accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_accuracy,val_accuracy\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_accuracy, r.val_accuracy)
                .unwrap();
        }
        s
    }
}

/// Artifact paths and summary data of a finished run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub transfer: Option<TransferReport>,
}

enum Records {
    Seg(Vec<SegRecord>),
    Cls(Vec<ClsRecord>),
}

enum OptimState {
    Adam(AdamState<f32>),
    Sgd(SgdState<f32>),
}

fn resolved_in_channels(spec: &ModelSpec) -> usize {
    spec.in_channels.unwrap_or(match spec.family {
        Family::Nabla => 1,
        Family::Irrcnn => 3,
    })
}

fn adapt_seg(records: Vec<SegRecord>, channels: usize) -> Result<Vec<SegRecord>> {
    records
        .into_iter()
        .map(|r| {
            Ok(SegRecord { id: r.id, image: r.image.adapt_channels(channels)?, mask: r.mask })
        })
        .collect()
}

fn adapt_cls(records: Vec<ClsRecord>, channels: usize) -> Result<Vec<ClsRecord>> {
    records
        .into_iter()
        .map(|r| Ok(ClsRecord { id: r.id, image: r.image.adapt_channels(channels)?, label: r.label }))
        .collect()
}

/// Loads, resizes, and channel-adapts the configured dataset.
fn resolve_records(config: &RunConfig, spec: &ModelSpec) -> Result<Records> {
    let size = spec.input_size;
    let channels = resolved_in_channels(spec);
    let records = match (config.task, config.data_source()?) {
        (TaskKind::Segment, DataSource::Synth { n }) => {
            let recs = synth::synth_lesions(n, size, size, config.seed)?
                .into_iter()
                .map(|(r, _)| r)
                .collect();
            Records::Seg(adapt_seg(recs, channels)?)
        }
        (TaskKind::Classify, DataSource::Synth { n }) => {
            let recs = synth::synth_classes(n, size, size, spec.classes, config.seed)?;
            Records::Cls(adapt_cls(recs, channels)?)
        }
        (TaskKind::Segment, DataSource::SegFolders { images, masks }) => {
            let recs = load_segmentation_dataset(&images, &masks)?;
            Records::Seg(adapt_seg(resize_seg_records(&recs, size)?, channels)?)
        }
        (TaskKind::Classify, DataSource::ClsFolders { images, labels }) => {
            let recs = load_classification_dataset(&images, &labels)?;
            Records::Cls(adapt_cls(resize_cls_records(&recs, size)?, channels)?)
        }
        (TaskKind::Segment, DataSource::ClsFolders { .. })
        | (TaskKind::Classify, DataSource::SegFolders { .. }) => {
            return Err(Error::config("dataset layout does not match the task"))
        }
    };
    let count = match &records {
        Records::Seg(r) => r.len(),
        Records::Cls(r) => r.len(),
    };
    if count == 0 {
        return Err(Error::data("dataset resolved to zero records"));
    }
    Ok(records)
}

/// Holds out `val_fraction` of the ids (seeded shuffle); when the
/// holdout rounds to zero records the training set doubles as the
/// validation set.
fn holdout<R: Clone>(records: &[R], id_of: impl Fn(&R) -> &str, config: &RunConfig) -> Result<(Vec<R>, Vec<R>)> {
    let ids: Vec<String> = records.iter().map(|r| id_of(r).to_string()).collect();
    let vf = config.val_fraction();
    if vf == 0.0 || records.len() < 2 {
        return Ok((records.to_vec(), records.to_vec()));
    }
    let plan = split(&ids, 1.0 - vf, config.seed)?;
    if plan.test_ids.is_empty() || plan.train_ids.is_empty() {
        return Ok((records.to_vec(), records.to_vec()));
    }
    let train = select_by_ids(records, &plan.train_ids, |r| id_of(r))?;
    let val = select_by_ids(records, &plan.test_ids, |r| id_of(r))?;
    Ok((train, val))
}

fn commit_and_step(
    model: &mut Model<f32>,
    grads: &nabla_core::optim::Grads<f32>,
    updates: Vec<(nabla_core::params::ParamId, Vec<f32>)>,
    optim: &mut OptimState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (id, data) in updates {
        model.params.entry_mut(id).value.data_mut().copy_from_slice(&data);
    }
    match optim {
        OptimState::Adam(st) => adam_step(&mut model.params, grads, st, lr)?,
        OptimState::Sgd(st) => sgd_momentum_step(&mut model.params, grads, st, lr, momentum)?,
    }
    Ok(())
}

fn mask_bytes_of_target(target: &Tensor<f32>, sample: usize) -> Vec<u8> {
    let s = target.shape();
    let per = s.c() * s.h() * s.w();
    target.data()[sample * per..(sample + 1) * per]
        .iter()
        .map(|&v| u8::from(v > 0.5))
        .collect()
}

fn split_rows(probs: &Tensor<f32>) -> Vec<&[f32]> {
    let s = probs.shape();
    let per = s.c() * s.h() * s.w();
    (0..s.n()).map(|i| &probs.data()[i * per..(i + 1) * per]).collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn micro_dice(pairs: &[(Vec<u8>, Vec<u8>)]) -> Result<f64> {
    let report = evaluate_dataset(pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())), Aggregation::Micro)?;
    Ok(report.dice)
}

/// Infer-mode micro Dice over segmentation records.
fn seg_eval_pairs(model: &Model<f32>, records: &[SegRecord], batch: usize, threshold: f64) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    let mut pairs = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|r| r.image.to_unit_tensor()).collect();
        let out = model.infer(data::stack(&images))?;
        let rows = split_rows(&out);
        for (i, r) in chunk.iter().enumerate() {
            pairs.push((binarize(rows[i], threshold), r.mask.data.clone()));
        }
    }
    Ok(pairs)
}

fn seg_eval_dice(model: &Model<f32>, records: &[SegRecord], batch: usize, threshold: f64) -> Result<f64> {
    micro_dice(&seg_eval_pairs(model, records, batch, threshold)?)
}

/// Infer-mode top-1 accuracy over classification records.
fn cls_eval_accuracy(model: &Model<f32>, records: &[ClsRecord], batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in records.chunks(batch.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|r| r.image.to_unit_tensor()).collect();
        let out = model.infer(data::stack(&images))?;
        let rows = split_rows(&out);
        for (i, r) in chunk.iter().enumerate() {
            if argmax(rows[i]) == r.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Runs the configured training job end to end, writing periodic,
/// best-validation, and final checkpoints plus the CSV log under the
/// output directory.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.model_spec();
    let records = resolve_records(config, &spec)?;

    let mut model: Model<f32> = Model::build(&spec, config.seed)?;
    let mut transfer = None;
    if let Some(ckpt_path) = &config.transfer_from {
        let ckpt = Checkpoint::load(ckpt_path)?;
        transfer = Some(ckpt.transfer_into(&mut model));
    }

    let out_dir = config.out_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut optim = match config.optimizer() {
        OptimizerKind::Adam => OptimState::Adam(AdamState::new()),
        OptimizerKind::Sgd => OptimState::Sgd(SgdState::new()),
    };
    let (batch, momentum, threshold) = (config.batch_size(), config.momentum(), config.threshold());

    let mut log = TrainLog::default();
    let best_path = out_dir.join("best.nbln");
    let mut best_val = f64::NEG_INFINITY;

    match records {
        Records::Seg(all) => {
            let (mut train_recs, val_recs) = holdout(&all, |r| r.id.as_str(), config)?;
            if config.augment() {
                train_recs = augment_flips(&train_recs);
            }
            for epoch in 0..config.epochs() {
                let lr = config.lr_at(epoch);
                let mut loss_sum = 0.0;
                let mut seen = 0usize;
                let mut train_pairs: Vec<(Vec<u8>, Vec<u8>)> = Vec::with_capacity(train_recs.len());
                for (bi, (x, target)) in
                    seg_batches::<f32>(&train_recs, batch, config.seed, epoch)?.into_iter().enumerate()
                {
                    let n = x.shape().n();
                    let (mut ctx, y) = model.forward_segment(x, Mode::Train, true)?;
                    let loss = ctx.tape.bce_loss(y, &target)?;
                    let value = f64::from(ctx.tape.value(loss).item()?);
                    // Saturation clamps in the loss can mask poisoned
                    // activations, so check the outputs too.
                    if !value.is_finite() || !ctx.tape.value(y).data().iter().all(|v| v.is_finite()) {
                        return Err(Error::train(format!("non-finite loss at epoch {epoch}, batch {bi}")));
                    }
                    loss_sum += value * n as f64;
                    seen += n;
                    {
                        let probs = ctx.tape.value(y);
                        let rows = split_rows(probs);
                        for (i, row) in rows.iter().enumerate() {
                            train_pairs.push((binarize(row, threshold), mask_bytes_of_target(&target, i)));
                        }
                    }
                    ctx.tape.backward(loss)?;
                    let grads = collect_grads(&ctx, &model.params);
                    let updates = ctx.take_state_updates();
                    drop(ctx);
                    commit_and_step(&mut model, &grads, updates, &mut optim, lr, momentum)?;
                }
                let train_accuracy = micro_dice(&train_pairs)?;
                let val_accuracy = seg_eval_dice(&model, &val_recs, batch, threshold)?;
                finish_epoch(
                    config, &mut model, &optim, &out_dir, &mut log, &mut best_val, &best_path, epoch,
                    LogRow { epoch, lr, train_loss: loss_sum / seen as f64, train_accuracy, val_accuracy },
                )?;
            }
        }
        Records::Cls(all) => {
            let (mut train_recs, val_recs) = holdout(&all, |r| r.id.as_str(), config)?;
            if config.augment() {
                train_recs = augment_flips_cls(&train_recs);
            }
            for epoch in 0..config.epochs() {
                let lr = config.lr_at(epoch);
                let mut loss_sum = 0.0;
                let mut seen = 0usize;
                let mut correct = 0usize;
                for (bi, (x, labels)) in
                    cls_batches::<f32>(&train_recs, batch, config.seed, epoch)?.into_iter().enumerate()
                {
                    let n = x.shape().n();
                    let (mut ctx, y) = model.forward_classify(x, Mode::Train, true)?;
                    let loss = ctx.tape.cce_loss(y, &labels)?;
                    let value = f64::from(ctx.tape.value(loss).item()?);
                    if !value.is_finite() || !ctx.tape.value(y).data().iter().all(|v| v.is_finite()) {
                        return Err(Error::train(format!("non-finite loss at epoch {epoch}, batch {bi}")));
                    }
                    loss_sum += value * n as f64;
                    seen += n;
                    {
                        let rows = split_rows(ctx.tape.value(y));
                        for (i, &label) in labels.iter().enumerate() {
                            if argmax(rows[i]) == label {
                                correct += 1;
                            }
                        }
                    }
                    ctx.tape.backward(loss)?;
                    let grads = collect_grads(&ctx, &model.params);
                    let updates = ctx.take_state_updates();
                    drop(ctx);
                    commit_and_step(&mut model, &grads, updates, &mut optim, lr, momentum)?;
                }
                let train_accuracy = correct as f64 / seen as f64;
                let val_accuracy = cls_eval_accuracy(&model, &val_recs, batch)?;
                finish_epoch(
                    config, &mut model, &optim, &out_dir, &mut log, &mut best_val, &best_path, epoch,
                    LogRow { epoch, lr, train_loss: loss_sum / seen as f64, train_accuracy, val_accuracy },
                )?;
            }
        }
    }

    let final_checkpoint = out_dir.join("final.nbln");
    save_checkpoint(&model, &optim, config.epochs(), &final_checkpoint)?;
    let log_path = out_dir.join("train_log.csv");
    std::fs::write(&log_path, log.to_csv()).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome { log, log_path, final_checkpoint, best_checkpoint: best_path, transfer })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    config: &RunConfig,
    model: &mut Model<f32>,
    optim: &OptimState,
    out_dir: &Path,
    log: &mut TrainLog,
    best_val: &mut f64,
    best_path: &Path,
    epoch: usize,
    row: LogRow,
) -> Result<()> {
    if row.val_accuracy > *best_val {
        *best_val = row.val_accuracy;
        save_checkpoint(model, optim, epoch + 1, best_path)?;
    }
    if (epoch + 1) % config.checkpoint_every() == 0 {
        save_checkpoint(model, optim, epoch + 1, &out_dir.join(format!("ckpt_{:04}.nbln", epoch + 1)))?;
    }
    log.rows.push(row);
    Ok(())
}

fn save_checkpoint(model: &Model<f32>, optim: &OptimState, epoch: usize, path: &Path) -> Result<()> {
    let snapshot = match optim {
        OptimState::Adam(st) => OptimSnapshot::adam(st),
        OptimState::Sgd(st) => OptimSnapshot::sgd(st),
    };
    Checkpoint::from_model(model, epoch, Some(snapshot)).save(path)
}

/// Evaluation results: both aggregations for segmentation, the
/// per-class report for classification.
#[derive(Debug)]
pub enum EvalOutcome {
    Seg { micro: MetricsReport, mean: MetricsReport },
    Cls { report: ClassificationReport },
}

impl EvalOutcome {
    pub fn to_csv(&self) -> String {
        match self {
            EvalOutcome::Seg { micro, mean } => {
                let mut s = micro.to_csv();
                // Drop the duplicate header from the second block.
                let mean_csv = mean.to_csv();
                if let Some(idx) = mean_csv.find('\n') {
                    s.push_str(&mean_csv[idx + 1..]);
                }
                s
            }
            EvalOutcome::Cls { report } => report.to_csv(),
        }
    }
}

/// Infer-mode evaluation of a checkpoint over `data_dir`, which holds
/// `images/` plus either `masks/` (segmentation) or `labels.csv`
/// (classification) matching the checkpoint's task.
pub fn evaluate(checkpoint: &Path, data_dir: &Path, threshold: f64) -> Result<EvalOutcome> {
    let model: Model<f32> = Checkpoint::load(checkpoint)?.into_model()?;
    let size = model.spec.input_size;
    let channels = resolved_in_channels(&model.spec);
    match model.spec.family {
        Family::Nabla => {
            let records =
                load_segmentation_dataset(&data_dir.join("images"), &data_dir.join("masks"))?;
            if records.is_empty() {
                return Err(Error::data(format!("no image/mask pairs under {}", data_dir.display())));
            }
            let records = adapt_seg(resize_seg_records(&records, size)?, channels)?;
            let pairs = seg_eval_pairs(&model, &records, 8, threshold)?;
            let micro =
                evaluate_dataset(pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())), Aggregation::Micro)?;
            let mean = evaluate_dataset(
                pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())),
                Aggregation::PerImageMean,
            )?;
            Ok(EvalOutcome::Seg { micro, mean })
        }
        Family::Irrcnn => {
            let records = load_classification_dataset(&data_dir.join("images"), &data_dir.join("labels.csv"))?;
            if records.is_empty() {
                return Err(Error::data(format!("no labeled images under {}", data_dir.display())));
            }
            let records = adapt_cls(resize_cls_records(&records, size)?, channels)?;
            let mut y_true = Vec::with_capacity(records.len());
            let mut y_pred = Vec::with_capacity(records.len());
            for chunk in records.chunks(8) {
                let images: Vec<Tensor<f32>> = chunk.iter().map(|r| r.image.to_unit_tensor()).collect();
                let out = model.infer(data::stack(&images))?;
                let rows = split_rows(&out);
                for (i, r) in chunk.iter().enumerate() {
                    y_true.push(r.label);
                    y_pred.push(argmax(rows[i]));
                }
            }
            let report = classification_report(&y_true, &y_pred, model.spec.classes)?;
            Ok(EvalOutcome::Cls { report })
        }
    }
}

/// Boundary pixels of a mask: foreground with any 4-neighbor (out of
/// bounds counts as background) that differs.
pub fn contour(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let at = |x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= mask.width as isize || y >= mask.height as isize {
            0
        } else {
            mask.data[y as usize * mask.width + x as usize]
        }
    };
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 1 {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            if at(xi - 1, yi) == 0 || at(xi + 1, yi) == 0 || at(xi, yi - 1) == 0 || at(xi, yi + 1) == 0 {
                out.push((x, y));
            }
        }
    }
    out
}

fn draw_contour(image: &mut Raster, pixels: &[(usize, usize)], rgb: [u8; 3]) {
    for &(x, y) in pixels {
        for (c, &v) in rgb.iter().enumerate() {
            image.set(x, y, c, v);
        }
    }
}

/// Artifacts written by [`predict`].
#[derive(Debug)]
pub struct PredictOutcome {
    pub mask_path: PathBuf,
    pub overlay_path: PathBuf,
    /// Fraction of predicted-foreground pixels at the original size.
    pub foreground_fraction: f64,
}

/// Segments one image with a checkpoint: writes `<stem>_mask.png`
/// ({0, 255} values, original image extents) and `<stem>_overlay.png`
/// (ground-truth contour in green when given, prediction contour in
/// blue on top).
pub fn predict(
    checkpoint: &Path,
    image_path: &Path,
    gt_path: Option<&Path>,
    out_dir: &Path,
    threshold: f64,
) -> Result<PredictOutcome> {
    let model: Model<f32> = Checkpoint::load(checkpoint)?.into_model()?;
    if model.spec.family != Family::Nabla {
        return Err(Error::train("predict needs a segmentation checkpoint"));
    }
    let size = model.spec.input_size;
    let original = data::load_raster(image_path)?;
    let net_input = data::resize(
        &original.adapt_channels(resolved_in_channels(&model.spec))?,
        size,
        size,
        data::Interp::Bilinear,
    )?;
    let out = model.infer(net_input.to_unit_tensor())?;
    let mask_small = Mask::new(size, size, binarize(out.data(), threshold))?;
    let mask = mask_small.resize_nearest(original.height, original.width)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    synth::save_mask_png(&mask_path, &mask)?;

    let mut overlay = original.to_rgb();
    if let Some(gt) = gt_path {
        let gt_raster = data::load_raster(gt)?.to_gray();
        let gt_mask = Mask::from_gray(&gt_raster)?;
        if gt_mask.width != original.width || gt_mask.height != original.height {
            return Err(Error::data(format!(
                "ground truth is {}x{}, image is {}x{}",
                gt_mask.width, gt_mask.height, original.width, original.height
            )));
        }
        draw_contour(&mut overlay, &contour(&gt_mask), [0, 255, 0]);
    }
    // Prediction drawn last so it stays visible where the curves agree.
    draw_contour(&mut overlay, &contour(&mask), [0, 0, 255]);
    let overlay_path = out_dir.join(format!("{stem}_overlay.png"));
    synth::save_raster_png(&overlay_path, &overlay)?;

    let fg = mask.data.iter().filter(|&&v| v == 1).count();
    Ok(PredictOutcome {
        mask_path,
        overlay_path,
        foreground_fraction: fg as f64 / (mask.width * mask.height) as f64,
    })
}
