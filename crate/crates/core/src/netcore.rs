//! MLP encoder, three-layer projection head and linear classifier head.
//!
//! All parameters live in one flat `Vec<f64>`; each [`LayerSpec`] records the
//! offset of its weight matrix (`outputs x inputs`, row-major) followed by its
//! bias. Gradients use the same layout, which keeps optimizer updates, inner
//! products between gradients and finite-difference checks trivial.
//!
//! The projection output `v` is L2-normalized to `z = v / |v|`; its backward
//! pass applies the exact Jacobian `(I - z z^T) / |v|`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PROJECTION_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Projection,
    Head,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Projection => 1,
            Role::Head => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Role::Encoder),
            1 => Ok(Role::Projection),
            2 => Ok(Role::Head),
            _ => Err(Error::Format(format!("unknown layer role {c}"))),
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Projection => "projection",
            Role::Head => "head",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub role: Role,
    /// Position within its role.
    pub index: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub frozen: bool,
    offset: usize,
}

impl LayerSpec {
    pub fn name(&self) -> String {
        match self.role {
            Role::Head => "head".to_string(),
            r => format!("{}.{}", r.prefix(), self.index),
        }
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.outputs * self.inputs
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let w = self.offset + self.outputs * self.inputs;
        w..w + self.outputs
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.outputs * (self.inputs + 1)
    }
}

/// Layer weights handed to [`ModelParams::from_layers`].
#[derive(Debug, Clone)]
pub struct DenseLayer {
    /// `outputs x inputs`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn identity(dim: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder widths after the input; the last one is the feature dimension.
    pub encoder_widths: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub head_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![128, 64],
            projection_hidden: 128,
            projection_dim: 32,
            head_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(
                "model.encoder_widths needs at least one positive width".into(),
            ));
        }
        if self.projection_hidden == 0 || self.projection_dim == 0 || self.head_classes < 2 {
            return Err(Error::Config(
                "model.projection_* must be positive and head_classes >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Flat gradient (or direction) buffer matching a [`ModelParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub values: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.values {
            *a *= c;
        }
    }
}

/// Which layers to freeze.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSelector {
    None,
    AllEncoder,
    EncoderExceptLast,
    Names(Vec<String>),
}

impl std::str::FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "" | "none" => LayerSelector::None,
            "encoder" | "all_encoder" => LayerSelector::AllEncoder,
            "encoder_except_last" => LayerSelector::EncoderExceptLast,
            list => LayerSelector::Names(list.split(',').map(|p| p.trim().to_string()).collect()),
        })
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to every processed layer, in network order.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    features: Array2<f64>,
    projection: Option<ProjectionTape>,
}

#[derive(Debug, Clone)]
struct ProjectionTape {
    norms: Array1<f64>,
    z: Array2<f64>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.features.nrows()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Normalized projection outputs, when the projection head was run.
    pub fn z(&self) -> Option<&Array2<f64>> {
        self.projection.as_ref().map(|p| &p.z)
    }

    /// Smallest |pre-activation| over rectified units; small values mean a
    /// finite-difference probe may cross a kink.
    pub fn min_abs_preactivation(&self, params: &ModelParams) -> f64 {
        self.pre
            .iter()
            .zip(&params.layers)
            .filter(|(_, l)| l.activation == Activation::Relu)
            .flat_map(|(p, _)| p.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Output of [`ModelParams::forward_embed`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Array2<f64>,
    pub z: Array2<f64>,
    pub tape: Tape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<LayerSpec>,
    values: Vec<f64>,
}

impl ModelParams {
    /// Seeded uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init(input_dim: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut rng = rng::stream(seed, "init");
        let mut layers = Vec::new();
        let mut dims = vec![input_dim];
        dims.extend(&config.encoder_widths);
        for w in dims.windows(2) {
            layers.push(random_layer(w[0], w[1], Activation::Relu, &mut rng));
        }
        let feat = *dims.last().unwrap();
        let hidden = config.projection_hidden;
        let projection = vec![
            random_layer(feat, hidden, Activation::Relu, &mut rng),
            random_layer(hidden, hidden, Activation::Relu, &mut rng),
            random_layer(hidden, config.projection_dim, Activation::Identity, &mut rng),
        ];
        let head = random_layer(feat, config.head_classes, Activation::Identity, &mut rng);
        Self::from_layers(layers, projection, head)
    }

    pub fn from_layers(
        encoder: Vec<DenseLayer>,
        projection: Vec<DenseLayer>,
        head: DenseLayer,
    ) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if projection.len() != PROJECTION_DEPTH {
            return Err(Error::Config(format!(
                "projection must have exactly {PROJECTION_DEPTH} layers, got {}",
                projection.len()
            )));
        }
        let mut layers = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut push = |role, index, l: DenseLayer| -> Result<usize> {
            let (out, inp) = l.weight.dim();
            if l.bias.len() != out {
                return Err(Error::Dimension(format!(
                    "{role:?} layer {index}: bias has {} entries for {out} outputs",
                    l.bias.len()
                )));
            }
            layers.push(LayerSpec {
                role,
                index,
                inputs: inp,
                outputs: out,
                activation: l.activation,
                frozen: false,
                offset: values.len(),
            });
            values.extend(l.weight.iter());
            values.extend(l.bias.iter());
            Ok(out)
        };
        let mut width = None;
        let chain = |width: &mut Option<usize>, inp: usize, out: usize, what: &str| {
            if let Some(w) = *width {
                if w != inp {
                    return Err(Error::Dimension(format!(
                        "{what} expects {inp} inputs but previous layer emits {w}"
                    )));
                }
            }
            *width = Some(out);
            Ok(())
        };
        for (i, l) in encoder.into_iter().enumerate() {
            let inp = l.weight.ncols();
            let out = push(Role::Encoder, i, l)?;
            chain(&mut width, inp, out, &format!("encoder.{i}"))?;
        }
        let feat = width.unwrap();
        for (i, l) in projection.into_iter().enumerate() {
            let inp = l.weight.ncols();
            let out = push(Role::Projection, i, l)?;
            chain(&mut width, inp, out, &format!("projection.{i}"))?;
        }
        if head.weight.ncols() != feat {
            return Err(Error::Dimension(format!(
                "head expects {} inputs but features are {feat}-d",
                head.weight.ncols()
            )));
        }
        push(Role::Head, 0, head)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite parameter".into()));
        }
        Ok(Self { layers, values })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn encoder_depth(&self) -> usize {
        self.layers.iter().filter(|l| l.role == Role::Encoder).count()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.encoder_depth() - 1].outputs
    }

    pub fn projection_dim(&self) -> usize {
        self.layers[self.encoder_depth() + PROJECTION_DEPTH - 1].outputs
    }

    pub fn classes(&self) -> usize {
        self.head().outputs
    }

    fn head(&self) -> &LayerSpec {
        self.layers.last().unwrap()
    }

    pub fn zero_grad(&self) -> GradientBundle {
        GradientBundle::zeros(self.values.len())
    }

    /// Boolean mask over the flat parameter vector; `true` marks frozen entries.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for l in &self.layers {
            if l.frozen {
                mask[l.param_range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let spec = &self.layers[l];
        ArrayView2::from_shape((spec.outputs, spec.inputs), &self.values[spec.weight_range()])
            .unwrap()
    }

    fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.layers[l].bias_range()])
    }

    /// Freezes exactly the selected layers and unfreezes all others.
    pub fn set_frozen(&mut self, selector: &LayerSelector) -> Result<()> {
        let depth = self.encoder_depth();
        let chosen: Vec<bool> = match selector {
            LayerSelector::None => vec![false; self.layers.len()],
            LayerSelector::AllEncoder => self.layers.iter().map(|l| l.role == Role::Encoder).collect(),
            LayerSelector::EncoderExceptLast => self
                .layers
                .iter()
                .map(|l| l.role == Role::Encoder && l.index + 1 < depth)
                .collect(),
            LayerSelector::Names(names) => {
                let known: Vec<String> = self.layers.iter().map(|l| l.name()).collect();
                if let Some(bad) = names.iter().find(|n| !known.contains(n)) {
                    return Err(Error::Config(format!(
                        "unknown layer {bad:?}; layers are {}",
                        known.join(", ")
                    )));
                }
                known.iter().map(|k| names.contains(k)).collect()
            }
        };
        for (l, c) in self.layers.iter_mut().zip(chosen) {
            l.frozen = c;
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input is {}-d, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn run_layers(&self, x: ArrayView2<f64>, upto: usize) -> Tape {
        let mut inputs = Vec::with_capacity(upto);
        let mut pre = Vec::with_capacity(upto);
        let mut cur = x.to_owned();
        let depth = self.encoder_depth();
        let mut features = None;
        for l in 0..upto {
            let p = cur.dot(&self.weight(l).t()) + self.bias(l);
            let act = self.layers[l].activation;
            let post = p.mapv(|v| act.apply(v));
            inputs.push(cur);
            pre.push(p);
            cur = post;
            if l + 1 == depth {
                features = Some(cur.clone());
            }
        }
        let features = features.unwrap();
        let projection = (upto > depth).then(|| ProjectionTape {
            norms: Array1::zeros(0),
            z: cur,
        });
        Tape {
            inputs,
            pre,
            features,
            projection,
        }
    }

    /// Encoder features for a batch (rows are samples), with the tape.
    pub fn forward_features(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        Ok(self.run_layers(x, self.encoder_depth()))
    }

    /// Features and unit-norm projections for a batch.
    pub fn forward_embed(&self, x: ArrayView2<f64>) -> Result<Forward> {
        self.check_input(&x)?;
        let mut tape = self.run_layers(x, self.encoder_depth() + PROJECTION_DEPTH);
        let proj = tape.projection.as_mut().unwrap();
        let raw = std::mem::replace(&mut proj.z, Array2::zeros((0, 0)));
        let norms = raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
            return Err(Error::Degenerate(format!(
                "projection of sample {i} is the zero vector"
            )));
        }
        let z = &raw / &norms.view().insert_axis(Axis(1));
        proj.norms = norms;
        proj.z = z.clone();
        Ok(Forward {
            features: tape.features.clone(),
            z,
            tape,
        })
    }

    /// Single-vector convenience wrapper around [`Self::forward_embed`].
    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Tape)> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        let f = self.forward_embed(view)?;
        Ok((f.features.row(0).to_vec(), f.z.row(0).to_vec(), f.tape))
    }

    /// Encoder features without keeping a tape.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_features(x)?.features)
    }

    /// Linear head logits (no nonlinearity).
    pub fn head_forward(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.layers.len() - 1;
        if features.ncols() != self.layers[h].inputs {
            return Err(Error::Dimension(format!(
                "head expects {}-d features, got {}",
                self.layers[h].inputs,
                features.ncols()
            )));
        }
        Ok(features.dot(&self.weight(h).t()) + self.bias(h))
    }

    /// Accumulates head gradients for `dlogits` into `grad`; returns the
    /// gradient with respect to the features.
    pub fn head_backward(
        &self,
        features: ArrayView2<f64>,
        dlogits: ArrayView2<f64>,
        grad: &mut GradientBundle,
    ) -> Array2<f64> {
        let h = self.layers.len() - 1;
        let spec = &self.layers[h];
        if !spec.frozen {
            accumulate(&mut grad.values, spec, dlogits, features);
        }
        dlogits.dot(&self.weight(h))
    }

    /// Reverse-mode gradient through the encoder and projection.
    ///
    /// `dz` is the upstream gradient on the normalized projections and
    /// `dfeatures` an optional extra gradient on the encoder features.
    /// Frozen layers get zero gradient.
    pub fn backward(
        &self,
        tape: &Tape,
        dz: Option<ArrayView2<f64>>,
        dfeatures: Option<ArrayView2<f64>>,
    ) -> Result<GradientBundle> {
        let mut grad = self.zero_grad();
        self.backward_into(tape, dz, dfeatures, &mut grad)?;
        Ok(grad)
    }

    pub fn backward_into(
        &self,
        tape: &Tape,
        dz: Option<ArrayView2<f64>>,
        dfeatures: Option<ArrayView2<f64>>,
        grad: &mut GradientBundle,
    ) -> Result<()> {
        let depth = self.encoder_depth();
        let b = tape.batch();
        if grad.values.len() != self.values.len() {
            return Err(Error::Dimension("gradient buffer does not match parameters".into()));
        }
        let mut delta: Option<Array2<f64>> = None;
        if let Some(dz) = dz {
            let proj = tape.projection.as_ref().ok_or_else(|| {
                Error::Dimension("tape has no projection; run forward_embed".into())
            })?;
            if dz.dim() != proj.z.dim() {
                return Err(Error::Dimension(format!(
                    "upstream gradient {:?} does not match projections {:?}",
                    dz.dim(),
                    proj.z.dim()
                )));
            }
            // d/dv of z = v/|v|: (dz - z (z . dz)) / |v|
            let zdz = (&proj.z * &dz).sum_axis(Axis(1));
            let mut dv = dz.to_owned() - &proj.z * &zdz.view().insert_axis(Axis(1));
            dv /= &proj.norms.view().insert_axis(Axis(1));
            let top = depth + PROJECTION_DEPTH;
            delta = Some(self.backprop(tape, depth..top, dv, grad));
        }
        if let Some(df) = dfeatures {
            if df.dim() != (b, self.feature_dim()) {
                return Err(Error::Dimension(format!(
                    "feature gradient {:?} does not match features {:?}",
                    df.dim(),
                    (b, self.feature_dim())
                )));
            }
            delta = Some(match delta {
                Some(d) => d + df,
                None => df.to_owned(),
            });
        }
        if let Some(d) = delta {
            self.backprop(tape, 0..depth, d, grad);
        }
        Ok(())
    }

    /// Backpropagates `delta` (gradient on the output of the last layer in
    /// `range`) and returns the gradient on the range's input.
    fn backprop(
        &self,
        tape: &Tape,
        range: std::ops::Range<usize>,
        mut delta: Array2<f64>,
        grad: &mut GradientBundle,
    ) -> Array2<f64> {
        let first_trainable = self.layers.iter().position(|l| !l.frozen);
        for l in range.clone().rev() {
            let spec = &self.layers[l];
            let act = spec.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(&tape.pre[l])
                    .for_each(|d, &p| *d *= act.slope(p));
            }
            if !spec.frozen {
                accumulate(&mut grad.values, spec, delta.view(), tape.inputs[l].view());
            }
            let upstream_needed = l > range.start || first_trainable.is_some_and(|f| f < l);
            if !upstream_needed {
                return Array2::zeros((delta.nrows(), spec.inputs));
            }
            delta = delta.dot(&self.weight(l));
        }
        delta
    }

    /// Forward-mode derivative of the normalized projections along
    /// `direction` in parameter space. Returns `dz/dt` per sample.
    pub fn jvp_projection(&self, tape: &Tape, direction: &GradientBundle) -> Result<Array2<f64>> {
        let proj = tape.projection.as_ref().ok_or_else(|| {
            Error::Dimension("tape has no projection; run forward_embed".into())
        })?;
        if direction.values.len() != self.values.len() {
            return Err(Error::Dimension("direction does not match parameters".into()));
        }
        let top = self.encoder_depth() + PROJECTION_DEPTH;
        let mut tangent: Option<Array2<f64>> = None;
        for l in 0..top {
            let spec = &self.layers[l];
            let dw = &direction.values[spec.weight_range()];
            let db = &direction.values[spec.bias_range()];
            let moves = dw.iter().chain(db).any(|&v| v != 0.0);
            if tangent.is_none() && !moves {
                continue;
            }
            let mut pre_dot = match &tangent {
                Some(t) => t.dot(&self.weight(l).t()),
                None => Array2::zeros((tape.batch(), spec.outputs)),
            };
            if moves {
                let dw = ArrayView2::from_shape((spec.outputs, spec.inputs), dw).unwrap();
                pre_dot = pre_dot + tape.inputs[l].dot(&dw.t()) + ArrayView1::from(db);
            }
            let act = spec.activation;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut pre_dot)
                    .and(&tape.pre[l])
                    .for_each(|d, &p| *d *= act.slope(p));
            }
            tangent = Some(pre_dot);
        }
        let Some(vdot) = tangent else {
            return Ok(Array2::zeros(proj.z.dim()));
        };
        let zv = (&proj.z * &vdot).sum_axis(Axis(1));
        let mut zdot = vdot - &proj.z * &zv.view().insert_axis(Axis(1));
        zdot /= &proj.norms.view().insert_axis(Axis(1));
        Ok(zdot)
    }

    pub fn layer_weight(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.layers
            .iter()
            .position(|l| l.name() == name)
            .map(|i| self.weight(i))
    }

    pub fn layer_params(&self, name: &str) -> Option<&[f64]> {
        self.layers
            .iter()
            .find(|l| l.name() == name)
            .map(|l| &self.values[l.param_range()])
    }

    /// Replaces the head with `weight` (`classes x features`) and `bias`.
    pub fn set_head(&mut self, weight: ArrayView2<f64>, bias: ArrayView1<f64>) -> Result<()> {
        let spec = self.head().clone();
        if weight.dim() != (spec.outputs, spec.inputs) || bias.len() != spec.outputs {
            return Err(Error::Dimension("head shape mismatch".into()));
        }
        for (dst, src) in self.values[spec.weight_range()].iter_mut().zip(weight.iter()) {
            *dst = *src;
        }
        self.values[spec.bias_range()]
            .iter_mut()
            .zip(bias.iter())
            .for_each(|(d, s)| *d = *s);
        Ok(())
    }
}

fn random_layer(inp: usize, out: usize, act: Activation, rng: &mut impl Rng) -> DenseLayer {
    let bound = 1.0 / (inp as f64).sqrt();
    DenseLayer {
        weight: Array2::from_shape_fn((out, inp), |_| rng.random_range(-bound..bound)),
        bias: Array1::from_shape_fn(out, |_| rng.random_range(-bound..bound)),
        activation: act,
    }
}

/// `gW += delta^T input`, `gb += sum_rows(delta)` for one layer.
fn accumulate(grad: &mut [f64], spec: &LayerSpec, delta: ArrayView2<f64>, input: ArrayView2<f64>) {
    let gw = delta.t().dot(&input);
    for (g, v) in grad[spec.weight_range()].iter_mut().zip(gw.iter()) {
        *g += v;
    }
    let gb = delta.sum_axis(Axis(0));
    for (g, v) in grad[spec.bias_range()].iter_mut().zip(gb.iter()) {
        *g += v;
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Writes the checkpoint: magic, version, layer count, then per layer
    /// `role u8, activation u8, frozen u8, pad u8, inputs u32, outputs u32`
    /// followed by f64 weights (row-major) and biases.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&self.to_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.layers.len() * 12 + self.values.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&[l.role.code(), l.activation.code(), u8::from(l.frozen), 0]);
            out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
            out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
            for v in &self.values[l.param_range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut encoder = Vec::new();
        let mut projection = Vec::new();
        let mut head = None;
        let mut frozen = Vec::new();
        for _ in 0..count {
            let hdr = cur.take(4)?;
            let (role, act, fz) = (Role::from_code(hdr[0])?, Activation::from_code(hdr[1])?, hdr[2]);
            let inp = cur.u32()? as usize;
            let out = cur.u32()? as usize;
            let mut vals = Vec::with_capacity(out * (inp + 1));
            for _ in 0..out * (inp + 1) {
                vals.push(cur.f64()?);
            }
            let bias = Array1::from(vals.split_off(out * inp));
            let layer = DenseLayer {
                weight: Array2::from_shape_vec((out, inp), vals).unwrap(),
                bias,
                activation: act,
            };
            frozen.push(fz != 0);
            match role {
                Role::Encoder => encoder.push(layer),
                Role::Projection => projection.push(layer),
                Role::Head => {
                    if head.replace(layer).is_some() {
                        return Err(Error::Format("checkpoint has two heads".into()));
                    }
                }
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Size(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - cur.pos
            )));
        }
        let head = head.ok_or_else(|| Error::Format("checkpoint has no head".into()))?;
        let mut params = Self::from_layers(encoder, projection, head)?;
        // layers are stored in network order
        for (l, f) in params.layers.iter_mut().zip(frozen) {
            l.frozen = f;
        }
        Ok(params)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Size("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Slice of the batch `x[rows]` as an owned matrix.
pub fn gather_rows(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.slice_mut(s![r, ..]).assign(&x.row(i));
    }
    out
}
