//! Training loop, the two-stage lite pipeline, and metric logging.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalReport};
use super::optim::{poly_lr, Sgd};
use crate::data::augment::{apply, augment, AugmentParams};
use crate::data::{Dataset, SegSample};
use crate::eal::EalConfig;
use crate::error::{Error, Result, StateDict};
use crate::segnet::{MrfmMode, SegModel};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Eal(EalConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Config {
    pub lr_scale: f64,
    pub freeze_norm: bool,
    /// `None` means 20% of the stage-1 iterations.
    pub iters: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr_scale: 0.1,
            freeze_norm: true,
            iters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub loss: LossKind,
    /// Random scale, flip and crop; off means samples are used as stored.
    pub augment: bool,
    /// Validate every this many iterations (0: only after the last one).
    pub eval_every: usize,
    /// Boundary band in px for the logged boundary mIoU.
    pub band: usize,
    pub stage2: Stage2Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            power: 0.9,
            max_iter: 3000,
            momentum: 0.9,
            weight_decay: 0.0004,
            batch_size: 8,
            crop: 64,
            loss: LossKind::Ce,
            augment: true,
            eval_every: 500,
            band: 2,
            stage2: Stage2Config::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: learning rate 0.1, crop 513, batch 12.
    pub fn full_scale() -> Self {
        TrainConfig {
            base_lr: 0.1,
            crop: 513,
            batch_size: 12,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be positive");
        }
        if self.power.is_nan() || self.power <= 0.0 {
            return fail("power must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.crop == 0 {
            return fail("batch_size and crop must be positive");
        }
        if self.band == 0 {
            return fail("band must be >= 1");
        }
        if self.stage2.lr_scale.is_nan() || self.stage2.lr_scale <= 0.0 {
            return fail("stage2 lr_scale must be positive");
        }
        if let LossKind::Eal(e) = self.loss {
            e.validate()?;
        }
        Ok(())
    }

    pub fn stage2_iters(&self) -> usize {
        self.stage2.iters.unwrap_or(self.max_iter / 5)
    }
}

/// One CSV row. Validation fields are present only on validation iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
    pub boundary_miou: Option<f64>,
    pub class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<LogRow>,
    /// Best validation mIoU, its iteration and the parameters at that point.
    pub best: Option<(f64, usize, StateDict)>,
    pub final_eval: Option<EvalReport>,
}

/// CSV with header `iter,lr,loss,miou,boundary_miou,iou_0..iou_{C-1}`.
pub fn history_csv(rows: &[LogRow], classes: usize) -> String {
    let mut out = String::from("iter,lr,loss,miou,boundary_miou");
    for c in 0..classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for r in rows {
        let _ = write!(
            out,
            "{},{:.17e},{:.17e},{},{}",
            r.iter,
            r.lr,
            r.loss,
            opt(r.miou),
            opt(r.boundary_miou)
        );
        for c in 0..classes {
            let _ = write!(out, ",{}", opt(r.class_iou.get(c).copied().flatten()));
        }
        out.push('\n');
    }
    out
}

fn prepare_batch(
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SegSample>> {
    indices
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            if cfg.augment {
                augment(s, cfg.crop, rng)
            } else if (s.labels.height(), s.labels.width()) == (cfg.crop, cfg.crop) {
                Ok(s.clone())
            } else {
                let p = AugmentParams {
                    scale: 1.0,
                    flip: false,
                    offset_y: 0,
                    offset_x: 0,
                };
                apply(s, &p, cfg.crop)
            }
        })
        .collect()
}

/// Loss of `model` on one batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &SegModel,
    batch: &[SegSample],
    loss: &LossKind,
) -> Result<crate::tensor::Var> {
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<_> = batch.iter().map(|s| s.labels.clone()).collect();
    let x = tape.constant(Tensor::stack(&images)?);
    let logits = model.forward(tape, x)?;
    match loss {
        LossKind::Ce => tape.softmax_cross_entropy(logits, &labels),
        LossKind::Eal(e) => tape.eal_loss(logits, &labels, e),
    }
}

/// Runs `cfg.max_iter` SGD steps on `train_ds`, validating on `val` (at
/// scale 1) every `cfg.eval_every` iterations and after the last one.
///
/// The sample order comes from a per-epoch permutation and, together with
/// the augmentation draws, is fully determined by `seed`.
pub fn train(
    model: &SegModel,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() && cfg.max_iter > 0 {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    if train_ds.num_classes != model.config().num_classes {
        return Err(Error::config(format!(
            "model has {} classes, training data {}",
            model.config().num_classes,
            train_ds.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.trainable_params();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.max_iter);
    let mut best: Option<(f64, usize, StateDict)> = None;
    let mut final_eval = None;

    for iter in 0..cfg.max_iter {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        while indices.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_ds.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let batch = prepare_batch(train_ds, &indices, cfg, &mut rng)?;
        let lr = poly_lr(cfg.base_lr, cfg.power, iter, cfg.max_iter);

        let snapshot = model.state_dict();
        model.set_training(true);
        let mut tape = Tape::new();
        let loss_var = batch_loss(&mut tape, model, &batch, &cfg.loss)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iter,
                loss,
                last_good: Box::new(snapshot),
            });
        }
        for (_, p) in &params {
            p.zero_grad();
        }
        tape.backward(loss_var)?;
        drop(tape);
        sgd.step(&params, lr)?;

        let mut row = LogRow {
            iter: iter + 1,
            lr,
            loss,
            miou: None,
            boundary_miou: None,
            class_iou: Vec::new(),
        };
        let last = iter + 1 == cfg.max_iter;
        if let Some(val) = val {
            if last || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) {
                let report = evaluate(model, val, &[1.0], cfg.band)?;
                let s = &report.per_scale[0];
                row.miou = Some(s.miou);
                row.boundary_miou = s.boundary_miou;
                row.class_iou = s.confusion.per_class_iou();
                if best.as_ref().is_none_or(|(b, _, _)| s.miou > *b) {
                    best = Some((s.miou, iter + 1, model.state_dict()));
                }
                if last {
                    final_eval = Some(report);
                }
            }
        }
        history.push(row);
    }
    if cfg.max_iter == 0 {
        if let Some(val) = val {
            final_eval = Some(evaluate(model, val, &[1.0], cfg.band)?);
        }
    }
    Ok(TrainOutcome {
        history,
        best,
        final_eval,
    })
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub stage1: TrainOutcome,
    /// Dual-path parameters at the end of stage 1, before pruning.
    pub stage1_state: StateDict,
    pub stage2: TrainOutcome,
}

const STAGE2_STREAM: u64 = 0x5eed_0002;

/// Stage 1 trains the dual-path lite model; every lite block then loses its
/// atrous path, and stage 2 fine-tunes at `base_lr · lr_scale` with all
/// normalization frozen.
pub fn train_lite_two_stage(
    model: &mut SegModel,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TwoStageOutcome> {
    if model.config().mrfm_mode != MrfmMode::Lite
        || model.config().mrfm_pruned
        || model.mrfm_blocks().is_empty()
    {
        return Err(Error::config(
            "two-stage training needs a model with at least one unpruned lite MRFM block",
        ));
    }
    let stage1 = train(model, train_ds, val, cfg, seed)?;
    let stage1_state = model.state_dict();
    model.prune_lite()?;
    if cfg.stage2.freeze_norm {
        model.freeze_norm();
    }
    let cfg2 = TrainConfig {
        base_lr: cfg.base_lr * cfg.stage2.lr_scale,
        max_iter: cfg.stage2_iters(),
        ..cfg.clone()
    };
    let stage2 = train(model, train_ds, val, &cfg2, seed ^ STAGE2_STREAM)?;
    Ok(TwoStageOutcome {
        stage1,
        stage1_state,
        stage2,
    })
}
