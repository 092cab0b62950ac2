//! Pipeline configuration: one TOML file plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::evalkit::ProbeConfig;
use crate::losses::LossConfig;
use crate::netcore::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub curated_embeddings: PathBuf,
    pub curated_manifest: PathBuf,
    pub uncurated_embeddings: PathBuf,
    pub uncurated_manifest: PathBuf,
    /// JSON index of the attribute template bank.
    pub templates: PathBuf,
    pub probe_train_embeddings: PathBuf,
    pub probe_train_manifest: PathBuf,
    pub probe_test_embeddings: PathBuf,
    pub probe_test_manifest: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Predictions read by `evaluate`; defaults to the probe output.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Logit scale applied to cosine similarities.
    pub scale: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            scale: crate::pseudolabel::DEFAULT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Never changes results.
    #[serde(default)]
    pub workers: usize,
    pub paths: Paths,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub pseudolabel: PseudoLabelConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl PipelineConfig {
    /// Reads `path`, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax or a bare string), resolves relative paths against the config
    /// file's directory and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    pub fn from_toml_str(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let value = toml::Value::Table(table);
        let mut cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.curation.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.trainer.validate()?;
        self.probe.validate()?;
        if !(self.pseudolabel.scale > 0.0 && self.pseudolabel.scale.is_finite()) {
            return Err(Error::Config("pseudolabel.scale must be positive".into()));
        }
        for (key, p) in self.paths.inputs() {
            if !p.is_file() {
                return Err(Error::Config(format!("paths.{key}: file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring settings that cannot
    /// change results (worker count and output location).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.paths.out_dir = PathBuf::new();
        c.paths.predictions = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for (_, p) in self.inputs_mut() {
            fix(p);
        }
        fix(&mut self.out_dir);
        if let Some(p) = self.predictions.as_mut() {
            fix(p);
        }
    }

    /// External input files, keyed by config field name.
    pub fn inputs(&self) -> Vec<(&'static str, &Path)> {
        vec![
            ("curated_embeddings", &self.curated_embeddings),
            ("curated_manifest", &self.curated_manifest),
            ("uncurated_embeddings", &self.uncurated_embeddings),
            ("uncurated_manifest", &self.uncurated_manifest),
            ("templates", &self.templates),
            ("probe_train_embeddings", &self.probe_train_embeddings),
            ("probe_train_manifest", &self.probe_train_manifest),
            ("probe_test_embeddings", &self.probe_test_embeddings),
            ("probe_test_manifest", &self.probe_test_manifest),
        ]
    }

    fn inputs_mut(&mut self) -> Vec<(&'static str, &mut PathBuf)> {
        vec![
            ("curated_embeddings", &mut self.curated_embeddings),
            ("curated_manifest", &mut self.curated_manifest),
            ("uncurated_embeddings", &mut self.uncurated_embeddings),
            ("uncurated_manifest", &mut self.uncurated_manifest),
            ("templates", &mut self.templates),
            ("probe_train_embeddings", &mut self.probe_train_embeddings),
            ("probe_train_manifest", &mut self.probe_train_manifest),
            ("probe_test_embeddings", &mut self.probe_test_embeddings),
            ("probe_test_manifest", &mut self.probe_test_manifest),
        ]
    }
}

/// Sets `key` (dotted path) in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
