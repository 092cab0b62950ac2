//! Contrastive objectives on normalized projections, the top-k wrapper and
//! the validation cross-entropy proxy.
//!
//! Every contrastive loss here is a weighted sum of per-anchor terms
//!
//! `t_a = -mean_attr (1/|P_a|) sum_{p in P_a} s_ap + log sum_{b != a} exp(s_ab)`
//!
//! with `s_ab = z_a . z_b / tau`. [`AnchorTerms`] keeps the coupling matrix
//! `G_ab = d t_a / d(z_a . z_b)`, from which gradients of any weighted sum of
//! terms, and directional derivatives of each term, follow in closed form.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{GradientBundle, ModelParams};
use crate::par;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Multi-attribute supervised contrastive loss on pseudo-labels.
    #[default]
    Supcon,
    /// Instance contrastive loss; positives are only the partner view.
    Contrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub topk_enabled: bool,
    /// Number of per-anchor terms averaged by the top-k wrapper; defaults to
    /// half of the anchors in the batch.
    pub topk_count: Option<usize>,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            topk_enabled: false,
            topk_count: None,
            objective: Objective::Supcon,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("loss.temperature must be positive".into()));
        }
        if self.topk_count == Some(0) {
            return Err(Error::Config("loss.topk_count must be at least 1".into()));
        }
        Ok(())
    }

    /// The k used for a batch with `anchors` terms.
    pub fn topk_for(&self, anchors: usize) -> Result<usize> {
        let k = self.topk_count.unwrap_or(anchors.div_ceil(2));
        if k == 0 || k > anchors {
            return Err(Error::Config(format!(
                "loss.topk_count {k} is out of range for {anchors} anchor terms"
            )));
        }
        Ok(k)
    }
}

/// Two views per origin, with per-origin pseudo-labels.
#[derive(Debug, Clone)]
pub struct MultiviewedBatch {
    z: Array2<f64>,
    origin: Vec<usize>,
    partner: Vec<usize>,
    labels: Vec<Vec<u8>>,
}

impl MultiviewedBatch {
    /// `z` rows are views, `origin[v]` the sample view `v` came from, and
    /// `labels[i]` the pseudo-labels of sample `i` (one per attribute).
    pub fn new(z: Array2<f64>, origin: Vec<usize>, labels: Vec<Vec<u8>>) -> Result<Self> {
        if z.nrows() != origin.len() {
            return Err(Error::Dimension(format!(
                "{} views but {} origin entries",
                z.nrows(),
                origin.len()
            )));
        }
        let n = labels.len();
        let mut seen: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (v, &o) in origin.iter().enumerate() {
            if o >= n {
                return Err(Error::Data(format!("view {v} has origin {o} but only {n} samples")));
            }
            seen[o].push(v);
        }
        if let Some(i) = seen.iter().position(|s| s.len() != 2) {
            return Err(Error::Data(format!(
                "sample {i} has {} views; every sample needs exactly two",
                seen[i].len()
            )));
        }
        if n < 2 {
            return Err(Error::Degenerate("a batch needs at least two samples".into()));
        }
        let attrs = labels[0].len();
        if labels.iter().any(|l| l.len() != attrs) {
            return Err(Error::Dimension("samples carry different attribute counts".into()));
        }
        for (v, row) in z.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Data(format!("view {v} has norm {norm}, expected 1")));
            }
        }
        let mut partner = vec![0; origin.len()];
        for s in &seen {
            partner[s[0]] = s[1];
            partner[s[1]] = s[0];
        }
        Ok(Self {
            z,
            origin,
            partner,
            labels,
        })
    }

    /// Views `2i` and `2i + 1` belong to sample `i`.
    pub fn paired(z: Array2<f64>, labels: Vec<Vec<u8>>) -> Result<Self> {
        let origin = (0..z.nrows()).map(|v| v / 2).collect();
        Self::new(z, origin, labels)
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn views(&self) -> usize {
        self.z.nrows()
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn attributes(&self) -> usize {
        self.labels[0].len()
    }

    pub fn origin(&self, view: usize) -> usize {
        self.origin[view]
    }

    pub fn partner(&self, view: usize) -> usize {
        self.partner[view]
    }

    /// Per-view label of one attribute.
    pub fn view_labels(&self, attribute: usize) -> Vec<u32> {
        self.origin
            .iter()
            .map(|&o| u32::from(self.labels[o][attribute]))
            .collect()
    }

    /// Per-view origin index, the labeling under which only partners match.
    pub fn origin_labels(&self) -> Vec<u32> {
        self.origin.iter().map(|&o| o as u32).collect()
    }

    /// The two view indices of every sample.
    pub fn sample_views(&self) -> Vec<[usize; 2]> {
        let mut out = vec![[usize::MAX; 2]; self.samples()];
        for (v, &o) in self.origin.iter().enumerate() {
            let slot = if out[o][0] == usize::MAX { 0 } else { 1 };
            out[o][slot] = v;
        }
        out
    }
}

/// Per-anchor loss terms together with their coupling matrix.
#[derive(Debug, Clone)]
pub struct AnchorTerms {
    pub terms: Vec<f64>,
    coupling: Array2<f64>,
    /// Indices of the label sets that took part.
    pub included: Vec<usize>,
}

impl AnchorTerms {
    pub fn total(&self) -> f64 {
        self.terms.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Gradient of `sum_a coeffs[a] * t_a` with respect to the views:
    /// `(M + M^T) Z` with `M = diag(coeffs) G`.
    pub fn gradient(&self, z: ArrayView2<f64>, coeffs: &[f64]) -> Array2<f64> {
        let c = Array1::from(coeffs.to_vec());
        let m = &self.coupling * &c.view().insert_axis(Axis(1));
        let sym = &m + &m.t();
        sym.dot(&z)
    }

    /// Directional derivative of every term when the views move along `zdot`:
    /// `sum_b G_ab (zdot_a . z_b + z_a . zdot_b)`.
    pub fn tangent(&self, z: ArrayView2<f64>, zdot: ArrayView2<f64>) -> Vec<f64> {
        let cross = zdot.dot(&z.t());
        let sym = &cross + &cross.t();
        (&self.coupling * &sym).sum_axis(Axis(1)).to_vec()
    }
}

/// Per-anchor terms for arbitrary views and label sets. Every label set gives
/// each view a class; positives of anchor `a` are the other views of its class.
///
/// Label sets in which some anchor has no positive are skipped when
/// `skip_empty` is set and reported as a degenerate batch otherwise.
pub fn anchor_terms(
    z: ArrayView2<f64>,
    label_sets: &[Vec<u32>],
    temperature: f64,
    skip_empty: bool,
) -> Result<AnchorTerms> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::Degenerate("need at least two views".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if let Some(bad) = label_sets.iter().position(|l| l.len() != n) {
        return Err(Error::Dimension(format!("label set {bad} does not cover every view")));
    }
    let mut included = Vec::new();
    for (s, labels) in label_sets.iter().enumerate() {
        let lonely = (0..n).find(|&a| (0..n).all(|b| b == a || labels[b] != labels[a]));
        match lonely {
            None => included.push(s),
            Some(a) if !skip_empty => {
                return Err(Error::Degenerate(format!(
                    "anchor {a} has no positive (label set {s})"
                )));
            }
            Some(_) => {}
        }
    }
    if included.is_empty() {
        return Err(Error::Degenerate(
            "every attribute leaves some anchor without a positive".into(),
        ));
    }
    let sims = z.dot(&z.t()) / temperature;
    let share = 1.0 / included.len() as f64;
    let rows = par::map_range(n, |a| {
        let row = sims.row(a);
        let max = (0..n).filter(|&b| b != a).map(|b| row[b]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for b in 0..n {
            if b != a {
                denom += (row[b] - max).exp();
            }
        }
        let lse = max + denom.ln();
        let mut g = vec![0.0; n];
        for b in 0..n {
            if b != a {
                g[b] = (row[b] - max).exp() / denom;
            }
        }
        let mut pos_part = 0.0;
        for &s in &included {
            let labels = &label_sets[s];
            let count = (0..n).filter(|&b| b != a && labels[b] == labels[a]).count() as f64;
            let mut acc = 0.0;
            for b in 0..n {
                if b != a && labels[b] == labels[a] {
                    acc += row[b];
                    g[b] -= share / count;
                }
            }
            pos_part += share * acc / count;
        }
        for v in &mut g {
            *v /= temperature;
        }
        (lse - pos_part, g)
    });
    let mut coupling = Array2::zeros((n, n));
    let mut terms = Vec::with_capacity(n);
    for (a, (t, g)) in rows.into_iter().enumerate() {
        terms.push(t);
        coupling.row_mut(a).assign(&Array1::from(g));
    }
    Ok(AnchorTerms {
        terms,
        coupling,
        included,
    })
}

/// Scalar loss with its gradient on the views.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn summed(terms: &AnchorTerms, z: ArrayView2<f64>) -> LossGrad {
    let ones = vec![1.0; terms.len()];
    LossGrad {
        value: terms.total(),
        grad: terms.gradient(z, &ones),
    }
}

/// Instance contrastive loss: the only positive of each view is its partner.
pub fn contrastive_loss(batch: &MultiviewedBatch, temperature: f64) -> Result<LossGrad> {
    let terms = anchor_terms(batch.z.view(), &[batch.origin_labels()], temperature, false)?;
    Ok(summed(&terms, batch.z.view()))
}

/// Supervised contrastive loss for one attribute.
pub fn supcon_loss(batch: &MultiviewedBatch, attribute: usize, temperature: f64) -> Result<LossGrad> {
    check_attribute(batch, attribute)?;
    let terms = anchor_terms(batch.z.view(), &[batch.view_labels(attribute)], temperature, false)?;
    Ok(summed(&terms, batch.z.view()))
}

/// Mean of per-attribute supervised contrastive losses over the attributes
/// in which every anchor has a positive.
pub fn multi_attribute_supcon(
    batch: &MultiviewedBatch,
    attributes: &[usize],
    temperature: f64,
) -> Result<LossGrad> {
    let terms = multi_attribute_terms(batch, attributes, temperature)?;
    Ok(summed(&terms, batch.z.view()))
}

pub fn multi_attribute_terms(
    batch: &MultiviewedBatch,
    attributes: &[usize],
    temperature: f64,
) -> Result<AnchorTerms> {
    if attributes.is_empty() {
        return Err(Error::Config("no attributes selected for the loss".into()));
    }
    for &a in attributes {
        check_attribute(batch, a)?;
    }
    let sets: Vec<Vec<u32>> = attributes.iter().map(|&a| batch.view_labels(a)).collect();
    let mut terms = anchor_terms(batch.z.view(), &sets, temperature, true)?;
    terms.included = terms.included.iter().map(|&s| attributes[s]).collect();
    Ok(terms)
}

/// Anchor terms of the configured training objective.
pub fn objective_terms(
    batch: &MultiviewedBatch,
    attributes: &[usize],
    config: &LossConfig,
) -> Result<AnchorTerms> {
    match config.objective {
        Objective::Supcon => multi_attribute_terms(batch, attributes, config.temperature),
        Objective::Contrastive => {
            anchor_terms(batch.z.view(), &[batch.origin_labels()], config.temperature, false)
        }
    }
}

/// Training loss for a batch: the sum of anchor terms, or their top-k mean
/// when the wrapper is enabled.
pub fn training_loss(terms: &AnchorTerms, z: ArrayView2<f64>, config: &LossConfig) -> Result<LossGrad> {
    if !config.topk_enabled {
        return Ok(summed(terms, z));
    }
    let k = config.topk_for(terms.len())?;
    let top = topk_average(&terms.terms, k)?;
    let coeffs: Vec<f64> = top.mask.iter().map(|&m| if m { 1.0 / k as f64 } else { 0.0 }).collect();
    Ok(LossGrad {
        value: top.value,
        grad: terms.gradient(z, &coeffs),
    })
}

fn check_attribute(batch: &MultiviewedBatch, attribute: usize) -> Result<()> {
    if attribute >= batch.attributes() {
        return Err(Error::Dimension(format!(
            "attribute {attribute} requested but batch has {}",
            batch.attributes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub value: f64,
    /// The k-th largest term.
    pub threshold: f64,
    pub mask: Vec<bool>,
}

/// Mean of the `k` largest values in hinge form,
/// `lambda + (1/k) sum_i max(l_i - lambda, 0)` with `lambda` the k-th largest.
/// The mask marks the k contributing terms; ties go to the lower index.
pub fn topk_average(values: &[f64], k: usize) -> Result<TopK> {
    if k == 0 || k > values.len() {
        return Err(Error::Config(format!(
            "top-k count {k} outside 1..={}",
            values.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN among top-k terms".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let lambda = values[order[k - 1]];
    let excess: f64 = values.iter().map(|&v| (v - lambda).max(0.0)).sum();
    let mut mask = vec![false; values.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(TopK {
        value: lambda + excess / k as f64,
        threshold: lambda,
        mask,
    })
}

/// Validation proxy: top-k mean of per-sample cross-entropies of the head
/// on encoder features, with its exact parameter gradient.
#[derive(Debug, Clone)]
pub struct ValidationLoss {
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub mask: Vec<bool>,
    pub grad: GradientBundle,
}

pub fn validation_topk_loss(
    params: &ModelParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    k: usize,
) -> Result<ValidationLoss> {
    let m = x.nrows();
    if m == 0 {
        return Err(Error::Data("empty validation batch".into()));
    }
    if labels.len() != m {
        return Err(Error::Dimension(format!("{m} validation rows but {} labels", labels.len())));
    }
    if k == 0 || k > m {
        return Err(Error::Config(format!("validation top-k {k} outside 1..={m}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.classes()) {
        return Err(Error::Data(format!("label {bad} but head has {} classes", params.classes())));
    }
    let tape = params.forward_features(x)?;
    let logits = params.head_forward(tape.features().view())?;
    let mut probs = logits.clone();
    let mut per_sample = Vec::with_capacity(m);
    for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
        per_sample.push(max + s.ln() - logits[[r, labels[r]]]);
    }
    let top = topk_average(&per_sample, k)?;
    let mut dlogits = probs;
    for (r, mut row) in dlogits.rows_mut().into_iter().enumerate() {
        if top.mask[r] {
            row[labels[r]] -= 1.0;
            row /= k as f64;
        } else {
            row.fill(0.0);
        }
    }
    let mut grad = params.zero_grad();
    let dfeat = params.head_backward(tape.features().view(), dlogits.view(), &mut grad);
    params.backward_into(&tape, None, Some(dfeat.view()), &mut grad)?;
    Ok(ValidationLoss {
        value: top.value,
        per_sample,
        mask: top.mask,
        grad,
    })
}
