//! Two-stage training.
//!
//! Stage 1 optimizes the contrastive objective on embedding-space views.
//! Stage 2 freezes the configured layers, fits the linear head on the
//! validation subset and then runs meta-weighted steps, each of which weighs
//! the samples of a batch by how well their gradients align with the gradient
//! of the validation top-k loss.
//!
//! Both stages share one learning-rate schedule spanning all epochs. Each
//! stage starts with fresh optimizer moments, so running the stages in one
//! process or from a saved stage-1 checkpoint gives identical results.

pub mod meta;
pub mod optim;
pub mod sampler;
pub mod views;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{objective_terms, training_loss, validation_topk_loss, LossConfig, MultiviewedBatch};
use crate::netcore::{gather_rows, LayerSelector, ModelParams};
use crate::pseudolabel::PseudoLabelTable;
use crate::rng;

pub use meta::{meta_step, meta_weights, weight_entropy, MetaOutcome, MetaSettings};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use views::{make_views, AugmentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Fraction of epochs spent in stage 1.
    pub stage_split: f64,
    /// Step size of the virtual update in the meta step.
    pub inner_lr: f64,
    pub val_subset_size: usize,
    pub val_batch_size: usize,
    pub val_topk: usize,
    pub val_conf_threshold: f64,
    /// Attribute whose pseudo-labels form the validation task; defaults to
    /// the first attribute of the table.
    pub target_attribute: Option<String>,
    /// Attributes averaged in the contrastive loss; defaults to all.
    pub loss_attributes: Option<Vec<String>>,
    /// Layers frozen in stage 2: `none`, `all_encoder`,
    /// `encoder_except_last` or a comma-separated list of layer names.
    pub freeze: String,
    pub head_warmup_steps: usize,
    pub head_lr: f64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            base_lr: 1e-3,
            warmup_epochs: 2,
            stage_split: 0.7,
            inner_lr: 0.1,
            val_subset_size: 128,
            val_batch_size: 32,
            val_topk: 8,
            val_conf_threshold: 0.9,
            target_attribute: None,
            loss_attributes: None,
            freeze: "encoder_except_last".into(),
            head_warmup_steps: 200,
            head_lr: 1e-2,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("trainer.{m}")));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be >= 0");
        }
        if !(self.stage_split > 0.0 && self.stage_split <= 1.0) {
            return bad("stage_split must lie in (0, 1]");
        }
        if !(self.inner_lr > 0.0) {
            return bad("inner_lr must be positive");
        }
        if self.val_batch_size == 0 || self.val_topk == 0 || self.val_topk > self.val_batch_size {
            return bad("val_topk must lie in 1..=val_batch_size");
        }
        if self.val_subset_size == 0 {
            return bad("val_subset_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.val_conf_threshold) {
            return bad("val_conf_threshold must lie in [0, 1]");
        }
        if !(self.head_lr > 0.0) {
            return bad("head_lr must be positive");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || o.weight_decay < 0.0 {
            return bad("optimizer settings out of range");
        }
        self.freeze.parse::<LayerSelector>()?;
        self.augment.validate()
    }

    /// Epochs run in stage 1, `ceil(stage_split * epochs)`.
    pub fn stage1_epochs(&self) -> usize {
        let raw = self.stage_split * self.epochs as f64;
        let near = raw.round();
        let e = if (raw - near).abs() < 1e-9 { near } else { raw.ceil() };
        (e as usize).clamp(1, self.epochs)
    }

    fn schedule(&self, batches_per_epoch: usize) -> LrSchedule {
        LrSchedule::WarmupCosine {
            base_lr: self.base_lr,
            warmup_steps: (self.warmup_epochs * batches_per_epoch) as u64,
            total_steps: (self.epochs * batches_per_epoch) as u64,
        }
    }
}

/// Training inputs and their pseudo-labels.
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub table: &'a PseudoLabelTable,
    /// Attribute columns used by the loss.
    pub loss_attributes: Vec<usize>,
    /// Attribute used to stratify batches and to define the validation task.
    pub target_attribute: usize,
}

impl<'a> TrainSet<'a> {
    pub fn new(
        inputs: ArrayView2<'a, f64>,
        table: &'a PseudoLabelTable,
        loss_attributes: Vec<usize>,
        target_attribute: usize,
    ) -> Result<Self> {
        if inputs.nrows() != table.n() {
            return Err(Error::Dimension(format!(
                "{} training rows but {} pseudo-label rows",
                inputs.nrows(),
                table.n()
            )));
        }
        if let Some(&a) = loss_attributes
            .iter()
            .chain(std::iter::once(&target_attribute))
            .find(|&&a| a >= table.attributes())
        {
            return Err(Error::Dimension(format!(
                "attribute {a} requested but the table has {}",
                table.attributes()
            )));
        }
        if loss_attributes.is_empty() {
            return Err(Error::Config("no loss attributes selected".into()));
        }
        Ok(Self {
            inputs,
            table,
            loss_attributes,
            target_attribute,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels_for(&self, rows: &[usize]) -> Vec<Vec<u8>> {
        rows.iter().map(|&r| self.table.row_labels(r).to_vec()).collect()
    }

    fn strata(&self) -> Vec<u8> {
        self.table.column(self.target_attribute)
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        sampler::batch_count(self.len(), batch_size)
    }
}

/// Validation subset with its pseudo-labels as class indices.
#[derive(Debug, Clone)]
pub struct ValSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl ValSet {
    pub fn from_rows(inputs: ArrayView2<f64>, table: &PseudoLabelTable, attribute: usize, rows: &[usize]) -> Self {
        Self {
            x: gather_rows(inputs, rows),
            y: rows.iter().map(|&r| table.label(r, attribute) as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    pub steps: usize,
    pub skipped: usize,
    pub mean_weight_entropy: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    pub val_topk_loss: Option<f64>,
    pub weight_entropy: Option<f64>,
    pub lr: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone)]
struct Accumulator {
    loss: f64,
    grad: f64,
    max_grad: f64,
    steps: usize,
    skipped: usize,
    entropy: f64,
    entropy_steps: usize,
    lr: f64,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            loss: 0.0,
            grad: 0.0,
            max_grad: 0.0,
            steps: 0,
            skipped: 0,
            entropy: 0.0,
            entropy_steps: 0,
            lr: 0.0,
        }
    }

    fn finish(self, with_entropy: bool) -> EpochMetrics {
        let s = self.steps.max(1) as f64;
        EpochMetrics {
            mean_loss: self.loss / s,
            mean_grad_norm: self.grad / s,
            max_grad_norm: self.max_grad,
            steps: self.steps,
            skipped: self.skipped,
            mean_weight_entropy: with_entropy
                .then(|| self.entropy / self.entropy_steps.max(1) as f64),
            lr: self.lr,
        }
    }
}

/// One stage-1 step on a batch of views. Returns (loss, gradient norm, lr),
/// with the loss reported per anchor so it is comparable across batch sizes.
pub fn pretrain_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    views: ArrayView2<f64>,
    labels: Vec<Vec<u8>>,
    attributes: &[usize],
    loss: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let forward = params.forward_embed(views)?;
    let batch = MultiviewedBatch::paired(forward.z.clone(), labels)?;
    let terms = objective_terms(&batch, attributes, loss)?;
    let value = training_loss(&terms, forward.z.view(), loss)?;
    let grads = params.backward(&forward.tape, Some(value.grad.view()), None)?;
    let lr = opt.step(params, &grads)?;
    let reported = if loss.topk_enabled {
        value.value
    } else {
        value.value / terms.len() as f64
    };
    Ok((reported, grads.norm(), lr))
}

/// One pass of stage 1 over the data.
pub fn pretrain_epoch(
    params: &mut ModelParams,
    opt: &mut AdamW,
    data: &TrainSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochMetrics> {
    let mut shuffle = rng::stream(seed, &format!("shuffle/{epoch}"));
    let mut view_rng = rng::stream(seed, &format!("views/{epoch}"));
    let batches = sampler::stratified_batches(&data.strata(), cfg.batch_size, &mut shuffle)?;
    let mut acc = Accumulator::new();
    for rows in &batches {
        let views = views::view_matrix(data.inputs, rows, &cfg.augment, &mut view_rng);
        match pretrain_step(params, opt, views.view(), data.labels_for(rows), &data.loss_attributes, loss) {
            Ok((l, g, lr)) => {
                acc.loss += l;
                acc.grad += g;
                acc.max_grad = acc.max_grad.max(g);
                acc.steps += 1;
                acc.lr = lr;
            }
            Err(Error::Degenerate(msg)) => {
                log::warn!("epoch {epoch}: skipping degenerate batch: {msg}");
                acc.skipped += 1;
                acc.lr = opt.skip();
            }
            Err(e) => return Err(e),
        }
    }
    Ok(acc.finish(false))
}

/// One pass of stage 2 over the data; every step draws a fresh validation
/// batch from `val`.
#[allow(clippy::too_many_arguments)]
pub fn meta_epoch(
    params: &mut ModelParams,
    opt: &mut AdamW,
    data: &TrainSet,
    val: &ValSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochMetrics> {
    use rand::seq::index::sample;
    if val.is_empty() {
        return Err(Error::Data("empty validation subset".into()));
    }
    let mut shuffle = rng::stream(seed, &format!("shuffle/{epoch}"));
    let mut view_rng = rng::stream(seed, &format!("views/{epoch}"));
    let mut val_rng = rng::stream(seed, &format!("val-batch/{epoch}"));
    let batches = sampler::stratified_batches(&data.strata(), cfg.batch_size, &mut shuffle)?;
    let vb = cfg.val_batch_size.min(val.len());
    let settings = MetaSettings {
        inner_lr: cfg.inner_lr,
        val_topk: cfg.val_topk.min(vb),
        loss,
        attributes: &data.loss_attributes,
    };
    let mut acc = Accumulator::new();
    for rows in &batches {
        let views = views::view_matrix(data.inputs, rows, &cfg.augment, &mut view_rng);
        let mut picks = sample(&mut val_rng, val.len(), vb).into_vec();
        picks.sort_unstable();
        let vx = gather_rows(val.x.view(), &picks);
        let vy: Vec<usize> = picks.iter().map(|&i| val.y[i]).collect();
        match meta_step(params, opt, views.view(), data.labels_for(rows), vx.view(), &vy, &settings) {
            Ok(out) => {
                acc.lr = out.lr;
                if out.skipped {
                    acc.skipped += 1;
                    continue;
                }
                acc.loss += out.weighted_loss;
                acc.grad += out.grad_norm;
                acc.max_grad = acc.max_grad.max(out.grad_norm);
                acc.entropy += weight_entropy(&out.weights);
                acc.entropy_steps += 1;
                acc.steps += 1;
            }
            Err(Error::Degenerate(msg)) => {
                log::warn!("epoch {epoch}: skipping degenerate batch: {msg}");
                acc.skipped += 1;
                acc.lr = opt.skip();
            }
            Err(e) => return Err(e),
        }
    }
    Ok(acc.finish(true))
}

/// Validation top-k loss over the whole subset, with `k` scaled from the
/// per-batch setting to the subset size.
pub fn full_validation_loss(params: &ModelParams, val: &ValSet, cfg: &TrainConfig) -> Result<f64> {
    let vb = cfg.val_batch_size.min(val.len());
    let k = (cfg.val_topk.min(vb) * val.len()).div_ceil(vb).clamp(1, val.len());
    Ok(validation_topk_loss(params, val.x.view(), &val.y, k)?.value)
}

/// Fits the linear head on encoder features of the validation subset by
/// full-batch Adam on the mean cross-entropy. The encoder is not touched.
pub fn fit_head(params: &mut ModelParams, val: &ValSet, steps: usize, lr: f64) -> Result<()> {
    if val.is_empty() || steps == 0 {
        return Ok(());
    }
    let features = params.features(val.x.view())?;
    let head = params.layers().last().unwrap().param_range();
    let mut opt = AdamW::new(
        params.len(),
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        LrSchedule::Constant(lr),
    );
    let m = val.len() as f64;
    for _ in 0..steps {
        let logits = params.head_forward(features.view())?;
        let mut d = logits;
        for (r, mut row) in d.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
            row[val.y[r]] -= 1.0;
            row /= m;
        }
        let mut grads = params.zero_grad();
        params.head_backward(features.view(), d.view(), &mut grads);
        for (k, g) in grads.values.iter_mut().enumerate() {
            if !head.contains(&k) {
                *g = 0.0;
            }
        }
        opt.step(params, &grads)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Validation top-k loss right after the stage switch (head fitted).
    pub val_loss_at_switch: Option<f64>,
    pub val_loss_final: Option<f64>,
}

/// Stage 1 epochs on `params`.
pub fn run_pretrain(
    params: &mut ModelParams,
    data: &TrainSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    loss.validate()?;
    let bpe = data.batches_per_epoch(cfg.batch_size);
    let mut opt = AdamW::new(params.len(), cfg.optimizer, cfg.schedule(bpe));
    let mut history = Vec::new();
    for epoch in 0..cfg.stage1_epochs() {
        let m = pretrain_epoch(params, &mut opt, data, cfg, loss, seed, epoch)?;
        log::info!("pretrain epoch {}: loss {:.4}", epoch + 1, m.mean_loss);
        history.push(HistoryRow {
            epoch: epoch + 1,
            stage: "pretrain".into(),
            loss: m.mean_loss,
            val_topk_loss: None,
            weight_entropy: None,
            lr: m.lr,
        });
    }
    Ok(history)
}

/// Stage 2 on a stage-1 model: freeze, fit the head, then meta epochs.
pub fn run_meta(
    params: &mut ModelParams,
    data: &TrainSet,
    val: &ValSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let first = cfg.stage1_epochs();
    if first == cfg.epochs {
        return Ok(TrainOutcome::default());
    }
    params.set_frozen(&cfg.freeze.parse()?)?;
    fit_head(params, val, cfg.head_warmup_steps, cfg.head_lr)?;
    let at_switch = full_validation_loss(params, val, cfg)?;
    let bpe = data.batches_per_epoch(cfg.batch_size);
    let mut opt = AdamW::new(params.len(), cfg.optimizer, cfg.schedule(bpe))
        .starting_at((first * bpe) as u64);
    let mut history = Vec::new();
    let mut last = at_switch;
    for epoch in first..cfg.epochs {
        let m = meta_epoch(params, &mut opt, data, val, cfg, loss, seed, epoch)?;
        last = full_validation_loss(params, val, cfg)?;
        log::info!(
            "meta epoch {}: loss {:.4}, val top-k {:.4}, skipped {}",
            epoch + 1,
            m.mean_loss,
            last,
            m.skipped
        );
        history.push(HistoryRow {
            epoch: epoch + 1,
            stage: "meta".into(),
            loss: m.mean_loss,
            val_topk_loss: Some(last),
            weight_entropy: m.mean_weight_entropy,
            lr: m.lr,
        });
    }
    Ok(TrainOutcome {
        history,
        val_loss_at_switch: Some(at_switch),
        val_loss_final: Some(last),
    })
}

/// Both stages in sequence.
pub fn staged_train(
    params: &mut ModelParams,
    data: &TrainSet,
    val: &ValSet,
    cfg: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut history = run_pretrain(params, data, cfg, loss, seed)?;
    let meta = run_meta(params, data, val, cfg, loss, seed)?;
    history.extend(meta.history);
    Ok(TrainOutcome { history, ..meta })
}
