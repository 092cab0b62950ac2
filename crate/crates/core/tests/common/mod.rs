#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use fairssl::evalkit::FairnessReport;
use fairssl::losses::MultiviewedBatch;
use fairssl::netcore::{ModelConfig, ModelParams};
use fairssl::pipeline::{self, MetaSummary, PipelineConfig, Stage};
use fairssl::synth::{self, WorldConfig};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut z = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
    for mut r in z.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    z
}

/// Random binary labels in which every attribute takes both values.
pub fn mixed_labels(samples: usize, attrs: usize, rng: &mut impl Rng) -> Vec<Vec<u8>> {
    let mut labels: Vec<Vec<u8>> = (0..samples)
        .map(|_| (0..attrs).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    for a in 0..attrs {
        if labels.iter().all(|l| l[a] == labels[0][a]) {
            let i = rng.random_range(0..samples);
            labels[i][a] ^= 1;
        }
    }
    labels
}

/// `samples` samples with two unit views each and `attrs` binary labels.
pub fn random_batch(samples: usize, d: usize, attrs: usize, rng: &mut impl Rng) -> MultiviewedBatch {
    let z = unit_rows(2 * samples, d, rng);
    MultiviewedBatch::paired(z, mixed_labels(samples, attrs, rng)).unwrap()
}

/// Supervised contrastive loss written as a plain double loop:
/// `sum_i -1/|P(i)| sum_{p in P(i)} log(exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t))`.
pub fn supcon_oracle(z: ArrayView2<f64>, labels: &[u32], tau: f64) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (z.row(i).dot(&z.row(a)) / tau).exp();
            }
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                acc += ((z.row(i).dot(&z.row(p)) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        total -= acc / count as f64;
    }
    total
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![8, 6],
        projection_hidden: 8,
        projection_dim: 4,
        head_classes: 2,
    }
}

/// Random inputs for which no ReLU pre-activation of `params` lies within
/// `margin` of zero, so central differences do not straddle a kink.
pub fn kink_free_inputs(params: &ModelParams, n: usize, margin: f64, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let x = Array2::from_shape_fn((n, params.input_dim()), |_| rng.random_range(-1.0f64..1.0));
        let tape = params.forward_embed(x.view()).unwrap().tape;
        if tape.min_abs_preactivation(params) > margin {
            return x;
        }
    }
}

/// Per-group accuracy, TPR, FPR and positive rate by direct counting.
pub struct GroupCounts {
    pub acc: BTreeMap<u32, f64>,
    pub tpr: BTreeMap<u32, f64>,
    pub fpr: BTreeMap<u32, f64>,
    pub pos_rate: BTreeMap<u32, f64>,
}

pub fn group_counts(pred: &[usize], labels: &[usize], groups: &[u32]) -> GroupCounts {
    let mut ids: Vec<u32> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut out = GroupCounts {
        acc: BTreeMap::new(),
        tpr: BTreeMap::new(),
        fpr: BTreeMap::new(),
        pos_rate: BTreeMap::new(),
    };
    for g in ids {
        let (mut n, mut correct, mut pos, mut tp, mut p, mut fp, mut neg) = (0, 0, 0, 0, 0, 0, 0);
        for i in 0..pred.len() {
            if groups[i] != g {
                continue;
            }
            n += 1;
            correct += usize::from(pred[i] == labels[i]);
            pos += usize::from(pred[i] == 1);
            if labels[i] == 1 {
                p += 1;
                tp += usize::from(pred[i] == 1);
            } else {
                neg += 1;
                fp += usize::from(pred[i] == 1);
            }
        }
        out.acc.insert(g, 100.0 * correct as f64 / n as f64);
        out.pos_rate.insert(g, pos as f64 / n as f64);
        if p > 0 {
            out.tpr.insert(g, tp as f64 / p as f64);
        }
        if neg > 0 {
            out.fpr.insert(g, fp as f64 / neg as f64);
        }
    }
    out
}

pub fn spread(m: &BTreeMap<u32, f64>) -> f64 {
    let max = m.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = m.values().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Result of one synthetic end-to-end run.
pub struct EndToEnd {
    pub report: FairnessReport,
    pub meta: MetaSummary,
    pub bayes_accuracy: f64,
}

/// Writes the synthetic world for `seed` into `dir` and runs every stage.
pub fn synthetic_run(seed: u64, dir: &Path, overrides: &[String]) -> EndToEnd {
    let ds = synth::generate(&WorldConfig::default(), seed).unwrap();
    let config = synth::write_dataset(&ds, dir, seed).unwrap();
    let cfg = PipelineConfig::load(&config, overrides).unwrap();
    let summary = pipeline::run(&cfg, "pipeline", &Stage::ALL).unwrap();
    let meta: MetaSummary =
        serde_json::from_str(&std::fs::read_to_string(cfg.paths.out_dir.join(pipeline::META_SUMMARY)).unwrap())
            .unwrap();
    let bayes = ds.world.bayes_predict(&ds.probe_test, 0.5);
    let hits = bayes
        .iter()
        .zip(&ds.probe_test.target)
        .filter(|(p, y)| **p == **y as usize)
        .count();
    EndToEnd {
        report: summary.report.unwrap(),
        meta,
        bayes_accuracy: 100.0 * hits as f64 / bayes.len() as f64,
    }
}
