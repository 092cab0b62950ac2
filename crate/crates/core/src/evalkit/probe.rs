//! Multinomial logistic-regression probe on standardized frozen features.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Penalty `l2 * |W|^2 / 2` on the weights (not the bias).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm is at most this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 20_000,
            tolerance: 1e-6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) || !(self.tolerance > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(
                "probe.l2 must be >= 0, probe.tolerance > 0 and probe.max_iters > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub classes: usize,
    pub features: usize,
    pub mean: Vec<f64>,
    /// Per-feature standard deviation (1 for constant features).
    pub scale: Vec<f64>,
    /// `classes x features`, row-major, acting on standardized features.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
}

/// Flat parameter vector: weights (row-major) followed by biases.
struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Objective<'_> {
    fn split<'p>(&self, p: &'p [f64]) -> (ArrayView2<'p, f64>, &'p [f64]) {
        let f = self.x.ncols();
        let w = ArrayView2::from_shape((self.classes, f), &p[..self.classes * f]).unwrap();
        (w, &p[self.classes * f..])
    }

    fn value_grad(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = self.split(p);
        let n = self.x.nrows();
        let f = self.x.ncols();
        let c = self.classes;
        let parts = par::map_chunks(n, |range| {
            let xs = self.x.slice(ndarray::s![range.clone(), ..]);
            let mut logits = xs.dot(&w.t());
            let mut loss = 0.0;
            for (r, mut row) in logits.rows_mut().into_iter().enumerate() {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
                let y = self.y[range.start + r];
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let shifted = row[y] - max;
                row.mapv_inplace(|v| (v - max).exp());
                let s = row.sum();
                loss += s.ln() - shifted;
                row /= s;
                row[y] -= 1.0;
            }
            let gw = logits.t().dot(&xs);
            let gb = logits.sum_axis(Axis(0));
            (loss, gw, gb)
        });
        let mut loss = 0.0;
        let mut gw = Array2::<f64>::zeros((c, f));
        let mut gb = Array1::<f64>::zeros(c);
        for (l, w_, b_) in parts {
            loss += l;
            gw += &w_;
            gb += &b_;
        }
        let inv = 1.0 / n as f64;
        let mut grad: Vec<f64> = gw.iter().map(|g| g * inv).collect();
        grad.extend(gb.iter().map(|g| g * inv));
        let mut value = loss * inv;
        for (k, wv) in w.iter().enumerate() {
            value += 0.5 * self.l2 * wv * wv;
            grad[k] += self.l2 * wv;
        }
        (value, grad)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Column means and standard deviations.
fn standardizer(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let var = x.var_axis(Axis(0), 0.0);
    let scale = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    (mean.to_vec(), scale)
}

fn standardize(x: ArrayView2<f64>, mean: &[f64], scale: &[f64]) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Fits the probe with accelerated gradient descent, backtracking on the
/// step size and restarting the momentum whenever the objective rises.
pub fn train_probe(features: ArrayView2<f64>, labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<ProbeModel> {
    cfg.validate()?;
    let n = features.nrows();
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} feature rows but {} labels", labels.len())));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite probe feature".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let present = (0..classes).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::Data("probe labels contain a single class".into()));
    }
    let (mean, scale) = standardizer(features);
    let x = standardize(features, &mean, &scale);
    let obj = Objective {
        x: x.view(),
        y: labels,
        classes,
        l2: cfg.l2,
    };
    let f = features.ncols();
    let mut rng = rng::stream(seed, "probe-init");
    let mut xk: Vec<f64> = (0..classes * (f + 1))
        .map(|k| if k < classes * f { 0.01 * rng.sample::<f64, _>(StandardNormal) } else { 0.0 })
        .collect();
    let (mut fx, mut gx) = obj.value_grad(&xk);
    let mut yk = xk.clone();
    let (mut fy, mut gy) = (fx, gx.clone());
    let mut t = 1.0f64;
    let mut lip = 1.0f64;
    let mut iterations = 0;
    while iterations < cfg.max_iters && norm(&gx) > cfg.tolerance {
        iterations += 1;
        let gy_sq: f64 = gy.iter().map(|g| g * g).sum();
        let (next, fnext, gnext) = loop {
            let cand: Vec<f64> = yk.iter().zip(&gy).map(|(y, g)| y - g / lip).collect();
            let (fc, gc) = obj.value_grad(&cand);
            if fc <= fy - 0.5 * gy_sq / lip + 1e-12 * fy.abs() || lip > 1e12 {
                break (cand, fc, gc);
            }
            lip *= 2.0;
        };
        if fnext > fx {
            // momentum overshot: restart from the current iterate
            t = 1.0;
            yk = xk.clone();
            fy = fx;
            gy = gx.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        yk = next.iter().zip(&xk).map(|(a, b)| a + beta * (a - b)).collect();
        (fy, gy) = if beta == 0.0 { (fnext, gnext.clone()) } else { obj.value_grad(&yk) };
        xk = next;
        fx = fnext;
        gx = gnext;
        t = t_next;
        lip *= 0.9;
    }
    if !fx.is_finite() {
        return Err(Error::Numeric("probe objective diverged".into()));
    }
    let bias = xk.split_off(classes * f);
    Ok(ProbeModel {
        classes,
        features: f,
        mean,
        scale,
        weight: xk,
        bias,
        iterations,
        grad_norm: norm(&gx),
        loss: fx,
    })
}

impl ProbeModel {
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.features {
            return Err(Error::Dimension(format!(
                "probe expects {}-d features, got {}",
                self.features,
                features.ncols()
            )));
        }
        let x = standardize(features, &self.mean, &self.scale);
        let w = ArrayView2::from_shape((self.classes, self.features), &self.weight).unwrap();
        Ok(x.dot(&w.t()) + ndarray::ArrayView1::from(&self.bias))
    }

    /// Arg-max class per row; ties go to the lower class index.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("probe serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.weight.len() != m.classes * m.features
            || m.bias.len() != m.classes
            || m.mean.len() != m.features
            || m.scale.len() != m.features
        {
            return Err(Error::Format(format!("{}: inconsistent probe shapes", path.display())));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_differences_vec;
    use rand::SeedableRng;

    fn blobs(n: usize, sep: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(r, c)| {
            let center = if c == 0 { if y[r] == 1 { sep } else { -sep } } else { 0.0 };
            center + rng.sample::<f64, _>(StandardNormal) * 0.3
        });
        (x, y)
    }

    #[test]
    fn separable_clusters() {
        let (x, y) = blobs(200, 3.0, 1);
        let m = train_probe(x.view(), &y, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(m.predict(x.view()).unwrap(), y);
    }

    #[test]
    fn chance_level_on_random_labels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((2000, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let (train, test) = (x.slice(ndarray::s![..1000, ..]), x.slice(ndarray::s![1000.., ..]));
        let m = train_probe(train, &y[..1000], &ProbeConfig::default(), 0).unwrap();
        let pred = m.predict(test).unwrap();
        let acc = pred.iter().zip(&y[1000..]).filter(|(a, b)| a == b).count() as f64 / 10.0;
        assert!((acc - 50.0).abs() <= 5.0, "{acc}");
    }

    #[test]
    fn restarts_agree() {
        let (x, y) = blobs(300, 0.5, 2);
        let a = train_probe(x.view(), &y, &ProbeConfig::default(), 1).unwrap();
        let b = train_probe(x.view(), &y, &ProbeConfig::default(), 2).unwrap();
        assert!(a.grad_norm <= 1e-6 && b.grad_norm <= 1e-6);
        assert!((a.loss - b.loss).abs() < 1e-6);
        let again = train_probe(x.view(), &y, &ProbeConfig::default(), 1).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn objective_gradient() {
        let (x, y) = blobs(20, 1.0, 3);
        let obj = Objective {
            x: x.view(),
            y: &y,
            classes: 2,
            l2: 0.3,
        };
        let p = vec![0.2, -0.1, 0.4, 0.3, 0.05, -0.2];
        let (_, g) = obj.value_grad(&p);
        let fd = central_differences_vec(&p, 1e-5, |q| obj.value_grad(q).0);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn single_class_rejected_and_roundtrip() {
        let x = Array2::zeros((3, 2));
        assert!(train_probe(x.view(), &[1, 1, 1], &ProbeConfig::default(), 0).is_err());
        let (x, y) = blobs(40, 2.0, 4);
        let m = train_probe(x.view(), &y, &ProbeConfig::default(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probe.json");
        m.save(&p).unwrap();
        assert_eq!(ProbeModel::load(&p).unwrap(), m);
    }
}
