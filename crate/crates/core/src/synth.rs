//! Synthetic embedding world with known generative structure.
//!
//! Raw embeddings are Gaussian around class means built from four orthonormal
//! directions: a shared background `b`, a target attribute `e_t`, a second
//! attribute `e_s` and a group direction `e_g`. For group `g`, target `y` and
//! second attribute `s` the mean is
//!
//! `c b + (2g - 1) gamma e_g + mu_t(g, y) e_t + (2s - 1) mu_s e_s`
//!
//! where group-1 positives get a smaller target margin than everyone else.
//! Stored embeddings are the unit-normalized raw vectors. The uncurated pool
//! under-represents group 1 and contains exact duplicates; the curated set and
//! the probe splits are balanced over group and target.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{AttributeTemplateBank, TemplatePair};
use crate::rng::{self, StreamRng};
use crate::store::{
    normalize_rows, save_embeddings, DatasetManifest, EmbeddingMatrix, Record, Source,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dim: usize,
    pub background: f64,
    pub group_shift: f64,
    pub target_margin: f64,
    /// Target margin of group-1 positives.
    pub minority_positive_margin: f64,
    pub second_margin: f64,
    pub noise: f64,
    pub pool_size: usize,
    /// Fraction of the pool drawn from group 1.
    pub pool_minority_fraction: f64,
    pub duplicate_fraction: f64,
    pub curated_size: usize,
    pub probe_train_size: usize,
    pub probe_test_size: usize,
    pub templates_per_attribute: usize,
    pub template_strength: f64,
    pub template_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            background: 1.0,
            group_shift: 0.6,
            target_margin: 0.5,
            minority_positive_margin: 0.25,
            second_margin: 0.5,
            noise: 0.3,
            pool_size: 4000,
            pool_minority_fraction: 0.15,
            duplicate_fraction: 0.02,
            curated_size: 200,
            probe_train_size: 1000,
            probe_test_size: 1000,
            templates_per_attribute: 3,
            template_strength: 0.5,
            template_noise: 0.05,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::Config("synth.dim must be at least 4".into()));
        }
        if !(self.noise > 0.0) {
            return Err(Error::Config("synth.noise must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pool_minority_fraction) || !(0.0..1.0).contains(&self.duplicate_fraction) {
            return Err(Error::Config("synth fractions must lie in [0, 1]".into()));
        }
        if self.curated_size < 8 || self.probe_train_size < 8 || self.probe_test_size < 8 || self.pool_size < 8 {
            return Err(Error::Config("synth set sizes must be at least 8".into()));
        }
        if self.templates_per_attribute == 0 {
            return Err(Error::Config("synth.templates_per_attribute must be positive".into()));
        }
        Ok(())
    }
}

/// Labeled draws in raw (unnormalized) space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub raw: Array2<f64>,
    pub group: Vec<u32>,
    pub target: Vec<u8>,
    pub second: Vec<u8>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn embeddings(&self) -> Result<EmbeddingMatrix> {
        normalize_rows(&EmbeddingMatrix::from_array(&self.raw)?)
    }

    fn push_from(&mut self, other: &Sample, i: usize) {
        let row = other.raw.row(i).to_owned();
        self.raw.push_row(row.view()).unwrap();
        self.group.push(other.group[i]);
        self.target.push(other.target[i]);
        self.second.push(other.second[i]);
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    /// Rows: background, target, second attribute, group.
    pub directions: Array2<f64>,
}

impl World {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "synth-directions");
        let d = config.dim;
        let mut dirs = Array2::<f64>::zeros((4, d));
        for k in 0..4 {
            let mut v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            for j in 0..k {
                let proj = v.dot(&dirs.row(j));
                v -= &(&dirs.row(j) * proj);
            }
            let n = v.dot(&v).sqrt();
            dirs.row_mut(k).assign(&(v / n));
        }
        Ok(Self {
            config,
            directions: dirs,
        })
    }

    fn target_coefficient(&self, group: u32, target: u8) -> f64 {
        let c = &self.config;
        match (group, target) {
            (1, 1) => c.minority_positive_margin,
            (_, 1) => c.target_margin,
            _ => -c.target_margin,
        }
    }

    pub fn mean(&self, group: u32, target: u8, second: u8) -> Array1<f64> {
        let c = &self.config;
        let coef = [
            c.background,
            self.target_coefficient(group, target),
            if second == 1 { c.second_margin } else { -c.second_margin },
            if group == 1 { c.group_shift } else { -c.group_shift },
        ];
        coef.iter()
            .enumerate()
            .fold(Array1::zeros(c.dim), |acc, (k, &w)| acc + &(&self.directions.row(k) * w))
    }

    /// Draws with group 1 at probability `minority`, target and second
    /// attribute uniform.
    pub fn draw(&self, n: usize, minority: f64, rng: &mut StreamRng) -> Sample {
        let mut group = Vec::with_capacity(n);
        let mut target = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for _ in 0..n {
            group.push(u32::from(rng.random::<f64>() < minority));
            target.push(u8::from(rng.random::<bool>()));
            second.push(u8::from(rng.random::<bool>()));
        }
        self.realize(group, target, second, rng)
    }

    /// Draws with every (group, target) cell equally represented and a
    /// shuffled order.
    pub fn draw_balanced(&self, n: usize, rng: &mut StreamRng) -> Sample {
        let mut cells: Vec<(u32, u8)> = (0..n).map(|i| ((i % 2) as u32, ((i / 2) % 2) as u8)).collect();
        cells.shuffle(rng);
        let second = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        let (group, target) = cells.into_iter().unzip();
        self.realize(group, target, second, rng)
    }

    fn realize(&self, group: Vec<u32>, target: Vec<u8>, second: Vec<u8>, rng: &mut StreamRng) -> Sample {
        let d = self.config.dim;
        let mut raw = Array2::zeros((group.len(), d));
        for (i, mut row) in raw.rows_mut().into_iter().enumerate() {
            let mu = self.mean(group[i], target[i], second[i]);
            for (v, m) in row.iter_mut().zip(mu.iter()) {
                *v = m + self.config.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Sample {
            raw,
            group,
            target,
            second,
        }
    }

    /// Posterior probability of target = 1 for a raw vector under the full
    /// mixture with group-1 prior `minority`.
    pub fn target_posterior(&self, raw: &[f64], minority: f64) -> f64 {
        let var = self.config.noise * self.config.noise;
        let mut logs = [Vec::new(), Vec::new()];
        for g in 0..2u32 {
            let pg = if g == 1 { minority } else { 1.0 - minority };
            if pg == 0.0 {
                continue;
            }
            for y in 0..2u8 {
                for s in 0..2u8 {
                    let mu = self.mean(g, y, s);
                    let sq: f64 = raw.iter().zip(mu.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                    logs[y as usize].push(pg.ln() + 0.25f64.ln() - sq / (2.0 * var));
                }
            }
        }
        let lse = |v: &[f64]| {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let (l0, l1) = (lse(&logs[0]), lse(&logs[1]));
        1.0 / (1.0 + (l0 - l1).exp())
    }

    /// Bayes-optimal target predictions from raw vectors.
    pub fn bayes_predict(&self, sample: &Sample, minority: f64) -> Vec<usize> {
        sample
            .raw
            .rows()
            .into_iter()
            .map(|r| usize::from(self.target_posterior(r.as_slice().unwrap(), minority) >= 0.5))
            .collect()
    }

    /// Template bank with attributes `target` and `second`. Each template
    /// pair is the background plus or minus the attribute direction, with a
    /// little template-specific noise.
    pub fn templates(&self, rng: &mut StreamRng) -> Result<AttributeTemplateBank> {
        let c = &self.config;
        let mut pairs = Vec::new();
        for k in [1usize, 2] {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for _ in 0..c.templates_per_attribute {
                let jitter: Vec<f64> = (0..c.dim)
                    .map(|_| c.template_noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let build = |sign: f64| -> Vec<f32> {
                    (0..c.dim)
                        .map(|j| {
                            (c.background * self.directions[[0, j]]
                                + sign * c.template_strength * self.directions[[k, j]]
                                + jitter[j]) as f32
                        })
                        .collect()
                };
                pos.push(build(1.0));
                neg.push(build(-1.0));
            }
            let pos = normalize_rows(&EmbeddingMatrix::from_rows(&pos)?)?;
            let neg = normalize_rows(&EmbeddingMatrix::from_rows(&neg)?)?;
            pairs.push(TemplatePair::new(pos, neg)?);
        }
        AttributeTemplateBank::new(vec!["target".into(), "second".into()], pairs)
    }
}

/// Curated, uncurated, probe-train and probe-test sets plus templates.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: World,
    pub curated: Sample,
    pub pool: Sample,
    pub probe_train: Sample,
    pub probe_test: Sample,
    pub templates: AttributeTemplateBank,
}

pub fn generate(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    let world = World::new(config.clone(), seed)?;
    let curated = world.draw_balanced(config.curated_size, &mut rng::stream(seed, "synth-curated"));
    let mut prng = rng::stream(seed, "synth-pool");
    let base = world.draw(config.pool_size, config.pool_minority_fraction, &mut prng);
    let dups = (config.pool_size as f64 * config.duplicate_fraction).round() as usize;
    let mut pool = Sample {
        raw: Array2::zeros((0, config.dim)),
        group: Vec::new(),
        target: Vec::new(),
        second: Vec::new(),
    };
    for i in 0..config.pool_size - dups {
        pool.push_from(&base, i);
    }
    for _ in 0..dups {
        let src = prng.random_range(0..config.pool_size - dups);
        pool.push_from(&base, src);
    }
    let probe_train = world.draw_balanced(config.probe_train_size, &mut rng::stream(seed, "synth-probe-train"));
    let probe_test = world.draw_balanced(config.probe_test_size, &mut rng::stream(seed, "synth-probe-test"));
    let templates = world.templates(&mut rng::stream(seed, "synth-templates"))?;
    Ok(Dataset {
        world,
        curated,
        pool,
        probe_train,
        probe_test,
        templates,
    })
}

fn manifest(sample: &Sample, prefix: &str, source: Source, quality: Option<&[f64]>, labeled: bool) -> DatasetManifest {
    DatasetManifest {
        records: (0..sample.len())
            .map(|i| Record {
                id: format!("{prefix}-{i:05}"),
                row: i,
                source,
                quality: quality.map(|q| q[i]),
                group: labeled.then_some(sample.group[i]),
                label: labeled.then_some(u32::from(sample.target[i])),
            })
            .collect(),
    }
}

/// Writes embeddings, manifests and the template bank into `dir`, plus a
/// `config.toml` that runs the full pipeline on them. Curated and pool
/// manifests carry group labels for inspection only; stages that must stay
/// group-blind read them through the blind manifest view.
pub fn write_dataset(ds: &Dataset, dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut qrng = rng::stream(seed, "synth-quality");
    let quality: Vec<f64> = (0..ds.pool.len()).map(|_| qrng.random::<f64>()).collect();
    let sets: [(&Sample, &str, Source, Option<&[f64]>); 4] = [
        (&ds.curated, "curated", Source::Curated, None),
        (&ds.pool, "pool", Source::Uncurated, Some(&quality)),
        (&ds.probe_train, "probe_train", Source::Curated, None),
        (&ds.probe_test, "probe_test", Source::Curated, None),
    ];
    for (sample, name, source, q) in sets {
        save_embeddings(&sample.embeddings()?, &dir.join(format!("{name}.fsemb")))?;
        manifest(sample, name, source, q, true).save(&dir.join(format!("{name}.jsonl")))?;
    }
    std::fs::create_dir_all(dir.join("templates")).map_err(|e| Error::io(dir, e))?;
    ds.templates.save(&dir.join("templates").join("index.json"))?;
    let config = format!(
        "# Synthetic demo run; paths are relative to this file.\n\
         seed = {seed}\n\n\
         [paths]\n\
         curated_embeddings = \"curated.fsemb\"\n\
         curated_manifest = \"curated.jsonl\"\n\
         uncurated_embeddings = \"pool.fsemb\"\n\
         uncurated_manifest = \"pool.jsonl\"\n\
         templates = \"templates/index.json\"\n\
         probe_train_embeddings = \"probe_train.fsemb\"\n\
         probe_train_manifest = \"probe_train.jsonl\"\n\
         probe_test_embeddings = \"probe_test.fsemb\"\n\
         probe_test_manifest = \"probe_test.jsonl\"\n\
         out_dir = \"out\"\n\n\
         [curation]\n\
         quality_threshold = 0.1\n\n\
         [trainer]\n\
         epochs = 20\n\
         target_attribute = \"target\"\n"
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, config).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
