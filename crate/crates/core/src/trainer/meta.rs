//! Meta-weighted training step.
//!
//! Each training sample `i` gets a perturbation weight `eps_i` in a virtual
//! step `theta' = theta - alpha * sum_i eps_i g_i`. At `eps = 0` the
//! derivative of the validation loss is `-alpha <g_v, g_i>`, so only the inner
//! products between the validation gradient and the per-sample gradients are
//! needed. They are computed without materializing any `g_i`: a forward-mode
//! pass along `g_v` gives the change of every view, and the coupling matrix of
//! the anchor terms turns that into the change of every per-sample loss.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::losses::{objective_terms, validation_topk_loss, AnchorTerms, LossConfig, MultiviewedBatch};
use crate::netcore::{Forward, GradientBundle, ModelParams};

use super::optim::AdamW;

/// Per-sample losses `l_i`: the mean of the two anchor terms of sample `i`.
pub fn per_sample_losses(terms: &AnchorTerms, batch: &MultiviewedBatch) -> Vec<f64> {
    batch
        .sample_views()
        .iter()
        .map(|[a, b]| 0.5 * (terms.terms[*a] + terms.terms[*b]))
        .collect()
}

/// Anchor coefficients that turn per-sample weights into a weighted sum of
/// anchor terms, `sum_i w_i l_i`.
pub fn anchor_coefficients(weights: &[f64], batch: &MultiviewedBatch) -> Vec<f64> {
    (0..batch.views()).map(|v| 0.5 * weights[batch.origin(v)]).collect()
}

/// `d l_v / d eps_i = -alpha <g_v, g_i>` for every sample.
pub fn meta_gradient(
    params: &ModelParams,
    forward: &Forward,
    terms: &AnchorTerms,
    batch: &MultiviewedBatch,
    val_grad: &GradientBundle,
    alpha: f64,
) -> Result<Vec<f64>> {
    let zdot = params.jvp_projection(&forward.tape, val_grad)?;
    let dterms = terms.tangent(forward.z.view(), zdot.view());
    Ok(batch
        .sample_views()
        .iter()
        .map(|[a, b]| -alpha * 0.5 * (dterms[*a] + dterms[*b]))
        .collect())
}

/// Explicit gradients `g_i` of every per-sample loss (frozen layers zeroed).
pub fn per_sample_gradients(
    params: &ModelParams,
    forward: &Forward,
    terms: &AnchorTerms,
    batch: &MultiviewedBatch,
) -> Result<Vec<GradientBundle>> {
    let n = batch.samples();
    crate::par::map_range(n, |i| {
        let mut onehot = vec![0.0; n];
        onehot[i] = 1.0;
        let dz = terms.gradient(forward.z.view(), &anchor_coefficients(&onehot, batch));
        params.backward(&forward.tape, Some(dz.view()), None)
    })
    .into_iter()
    .collect()
}

/// `-alpha <g_v, g_i>` from explicit per-sample gradients.
pub fn explicit_meta_gradient(val_grad: &GradientBundle, per_sample: &[GradientBundle], alpha: f64) -> Vec<f64> {
    per_sample.iter().map(|g| -alpha * val_grad.dot(g)).collect()
}

/// `w_i = max(-grad_eps_i, 0)` normalized to sum 1, or all zeros when every
/// clamped value is zero.
pub fn meta_weights(grad_eps: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = grad_eps.iter().map(|g| (-g).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

/// Shannon entropy (nats) of a weight vector; zero entries contribute nothing.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum()
}

#[derive(Debug, Clone)]
pub struct MetaSettings<'a> {
    pub inner_lr: f64,
    pub val_topk: usize,
    pub loss: &'a LossConfig,
    pub attributes: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct MetaOutcome {
    pub weights: Vec<f64>,
    pub grad_eps: Vec<f64>,
    /// `sum_i w_i l_i`.
    pub weighted_loss: f64,
    pub val_loss: f64,
    pub skipped: bool,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One meta-weighted update.
///
/// `views` holds two views per sample (rows `2i`, `2i + 1`); `labels[i]` are
/// the pseudo-labels of sample `i`. The head is trained on the validation
/// loss in the same update. When every weight is zero the step is skipped
/// and only the schedule advances.
pub fn meta_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    views: ArrayView2<f64>,
    labels: Vec<Vec<u8>>,
    val_x: ArrayView2<f64>,
    val_y: &[usize],
    settings: &MetaSettings,
) -> Result<MetaOutcome> {
    if !(settings.inner_lr > 0.0) {
        return Err(Error::Config("trainer.inner_lr must be positive".into()));
    }
    if val_x.nrows() == 0 {
        return Err(Error::Data("empty validation batch".into()));
    }
    let forward = params.forward_embed(views)?;
    let batch = MultiviewedBatch::paired(forward.z.clone(), labels)?;
    let terms = objective_terms(&batch, settings.attributes, settings.loss)?;
    let val = validation_topk_loss(params, val_x, val_y, settings.val_topk.min(val_x.nrows()))?;
    let grad_eps = meta_gradient(params, &forward, &terms, &batch, &val.grad, settings.inner_lr)?;
    let weights = meta_weights(&grad_eps);
    let losses = per_sample_losses(&terms, &batch);
    let weighted_loss = weights.iter().zip(&losses).map(|(w, l)| w * l).sum();
    if weights.iter().all(|&w| w == 0.0) {
        let lr = opt.skip();
        return Ok(MetaOutcome {
            weights,
            grad_eps,
            weighted_loss,
            val_loss: val.value,
            skipped: true,
            grad_norm: 0.0,
            lr,
        });
    }
    let dz = terms.gradient(forward.z.view(), &anchor_coefficients(&weights, &batch));
    let mut grads = params.backward(&forward.tape, Some(dz.view()), None)?;
    let head = params.layers().last().unwrap().param_range();
    for k in head {
        grads.values[k] += val.grad.values[k];
    }
    let lr = opt.step(params, &grads)?;
    Ok(MetaOutcome {
        weights,
        grad_eps,
        weighted_loss,
        val_loss: val.value,
        skipped: false,
        grad_norm: grads.norm(),
        lr,
    })
}
