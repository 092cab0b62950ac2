//! Embedding-space views: coordinate masking, Gaussian noise and a
//! multiplicative scale jitter, applied in that order.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    /// Views are scaled by a factor drawn from `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            mask_prob: 0.1,
            scale_jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("augment.noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::Config("augment.mask_prob must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config("augment.scale_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One augmented copy of `x`.
pub fn make_view(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut v = x.to_vec();
    if cfg.mask_prob > 0.0 {
        for c in &mut v {
            if rng.random::<f64>() < cfg.mask_prob {
                *c = 0.0;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for c in &mut v {
            *c += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    if cfg.scale_jitter > 0.0 {
        let s = rng.random_range(1.0 - cfg.scale_jitter..=1.0 + cfg.scale_jitter);
        for c in &mut v {
            *c *= s;
        }
    }
    v
}

/// Two independent views of `x`.
pub fn make_views(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let a = make_view(x, cfg, rng);
    let b = make_view(x, cfg, rng);
    (a, b)
}

/// Views of `rows` of `x`, laid out so rows `2i` and `2i + 1` come from `rows[i]`.
pub fn view_matrix(
    x: ArrayView2<f64>,
    rows: &[usize],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let d = x.ncols();
    let mut out = Array2::zeros((2 * rows.len(), d));
    for (i, &r) in rows.iter().enumerate() {
        let src = x.row(r).to_vec();
        let (a, b) = make_views(&src, cfg, rng);
        out.row_mut(2 * i).assign(&ndarray::ArrayView1::from(&a));
        out.row_mut(2 * i + 1).assign(&ndarray::ArrayView1::from(&b));
    }
    out
}
