//! Config-driven stages and their on-disk artifacts.
//!
//! Every stage reads its inputs from the configured paths or from artifacts
//! of earlier stages in `out_dir`, and writes its own artifacts there. Each
//! invocation ends by writing `run_manifest.json` with SHA-256 checksums of
//! the inputs it read and the artifacts it produced.

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{apply_override, Paths, PipelineConfig, PseudoLabelConfig};

use crate::curation::curate;
use crate::error::{Error, Result};
use crate::evalkit::{build_report, render_table, train_probe, FairnessReport};
use crate::netcore::ModelParams;
use crate::par;
use crate::pseudolabel::{build_pseudolabel_table, select_validation_subset, AttributeTemplateBank, PseudoLabelTable};
use crate::store::{load_embeddings, save_embeddings, BlindManifest, DatasetManifest, EmbeddingMatrix};
use crate::trainer::{self, csv_error, read_history, write_history, TrainSet, ValSet};

pub const AUGMENTED_EMBEDDINGS: &str = "augmented.fsemb";
pub const AUGMENTED_MANIFEST: &str = "augmented.jsonl";
pub const CURATION_REPORT: &str = "curation_report.json";
pub const PSEUDOLABELS: &str = "pseudolabels.fspl";
pub const ATTRIBUTES: &str = "attributes.json";
pub const VAL_SUBSET: &str = "val_subset.json";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.fsck";
pub const PRETRAIN_HISTORY: &str = "history_pretrain.csv";
pub const MODEL_CHECKPOINT: &str = "model.fsck";
pub const HISTORY: &str = "history.csv";
pub const META_SUMMARY: &str = "meta_summary.json";
pub const PROBE: &str = "probe.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Curate,
    Pseudolabel,
    Pretrain,
    TrainMeta,
    Probe,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Curate,
        Stage::Pseudolabel,
        Stage::Pretrain,
        Stage::TrainMeta,
        Stage::Probe,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::Pseudolabel => "pseudolabel",
            Stage::Pretrain => "pretrain",
            Stage::TrainMeta => "train-meta",
            Stage::Probe => "probe",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Input checksums keyed by config field (template files as `templates:<file>`).
    pub inputs: BTreeMap<String, String>,
    /// Artifact checksums keyed by file name in the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValSubsetFile {
    pub attribute: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub stage1_epochs: usize,
    pub epochs: usize,
    pub val_loss_at_switch: Option<f64>,
    pub val_loss_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub report: Option<FairnessReport>,
}

/// Runs `stages` in order under `cfg.workers` threads and writes the run
/// manifest, also when a stage fails.
pub fn run(cfg: &PipelineConfig, command: &str, stages: &[Stage]) -> Result<RunSummary> {
    par::with_workers(cfg.workers, || run_inner(cfg, command, stages))
}

fn run_inner(cfg: &PipelineConfig, command: &str, stages: &[Stage]) -> Result<RunSummary> {
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ctx = Context {
        cfg,
        out,
        inputs: BTreeMap::new(),
        artifacts: BTreeMap::new(),
        report: None,
    };
    let mut failure = None;
    for &stage in stages {
        log::info!("stage {stage}");
        if let Err(e) = ctx.run_stage(stage) {
            failure = Some((stage, e));
            break;
        }
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        status: if failure.is_some() { "failed" } else { "ok" }.to_string(),
        failed_stage: failure.as_ref().map(|(s, _)| s.name().to_string()),
        error: failure.as_ref().map(|(_, e)| e.to_string()),
        inputs: ctx.inputs,
        artifacts: ctx.artifacts,
    };
    let path = out.join(RUN_MANIFEST);
    write_json(&path, &manifest)?;
    match failure {
        Some((_, e)) => Err(e),
        None => Ok(RunSummary {
            manifest,
            report: ctx.report,
        }),
    }
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    inputs: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
    report: Option<FairnessReport>,
}

impl Context<'_> {
    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Curate => self.curate(),
            Stage::Pseudolabel => self.pseudolabel(),
            Stage::Pretrain => self.pretrain(),
            Stage::TrainMeta => self.train_meta(),
            Stage::Probe => self.probe(),
            Stage::Evaluate => self.evaluate(),
        }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.to_string(), sha256_file(path)?);
        Ok(())
    }

    fn produced(&mut self, name: &str) -> Result<()> {
        let sum = sha256_file(&self.artifact(name))?;
        self.artifacts.insert(name.to_string(), sum);
        Ok(())
    }

    fn curate(&mut self) -> Result<()> {
        let p = &self.cfg.paths;
        let curated = load_embeddings(&p.curated_embeddings)?;
        let curated_manifest = BlindManifest::load(&p.curated_manifest)?;
        let pool = load_embeddings(&p.uncurated_embeddings)?;
        let pool_manifest = BlindManifest::load(&p.uncurated_manifest)?;
        for (key, path) in [
            ("curated_embeddings", p.curated_embeddings.clone()),
            ("curated_manifest", p.curated_manifest.clone()),
            ("uncurated_embeddings", p.uncurated_embeddings.clone()),
            ("uncurated_manifest", p.uncurated_manifest.clone()),
        ] {
            self.input(key, &path)?;
        }
        let result = curate(
            &curated,
            &curated_manifest,
            &pool,
            &pool_manifest,
            &self.cfg.curation,
            self.cfg.seed,
        )?;
        let report = result.report(curated.n(), pool.n());
        log::info!(
            "curation: {} curated + {} accepted of {} pool rows ({} duplicates removed)",
            report.curated,
            result.accepted.len(),
            report.pool,
            report.removed_duplicates
        );
        save_embeddings(&result.augmented, &self.artifact(AUGMENTED_EMBEDDINGS))?;
        result.augmented_manifest.save(&self.artifact(AUGMENTED_MANIFEST))?;
        write_json(&self.artifact(CURATION_REPORT), &report)?;
        for name in [AUGMENTED_EMBEDDINGS, AUGMENTED_MANIFEST, CURATION_REPORT] {
            self.produced(name)?;
        }
        Ok(())
    }

    fn load_bank(&mut self) -> Result<AttributeTemplateBank> {
        let index = self.cfg.paths.templates.clone();
        let base = index.parent().unwrap_or(Path::new(".")).to_path_buf();
        for file in AttributeTemplateBank::referenced_files(&index)? {
            let rel = file.strip_prefix(&base).unwrap_or(&file);
            self.input(&format!("templates:{}", rel.display()), &file)?;
        }
        AttributeTemplateBank::load(&index)
    }

    fn pseudolabel(&mut self) -> Result<()> {
        let images = load_embeddings(&self.artifact(AUGMENTED_EMBEDDINGS))?;
        let bank = self.load_bank()?;
        let table = build_pseudolabel_table(&images, &bank, self.cfg.pseudolabel.scale)?;
        table.save(&self.artifact(PSEUDOLABELS))?;
        write_json(&self.artifact(ATTRIBUTES), &bank.attributes)?;
        let tc = &self.cfg.trainer;
        let target = resolve_target(&bank.attributes, tc)?;
        let indices = if tc.stage1_epochs() < tc.epochs {
            select_validation_subset(
                &table,
                target,
                tc.val_conf_threshold,
                tc.val_subset_size,
                self.cfg.seed,
            )?
        } else {
            Vec::new()
        };
        let subset = ValSubsetFile {
            attribute: bank.attributes[target].clone(),
            indices,
        };
        write_json(&self.artifact(VAL_SUBSET), &subset)?;
        for name in [PSEUDOLABELS, ATTRIBUTES, VAL_SUBSET] {
            self.produced(name)?;
        }
        Ok(())
    }

    fn training_inputs(&self) -> Result<(Array2<f64>, PseudoLabelTable, Vec<usize>, usize)> {
        let images = load_embeddings(&self.artifact(AUGMENTED_EMBEDDINGS))?;
        let table = PseudoLabelTable::load(&self.artifact(PSEUDOLABELS))?;
        let names: Vec<String> = read_json(&self.artifact(ATTRIBUTES))?;
        if names.len() != table.attributes() {
            return Err(Error::Data(format!(
                "{} lists {} attributes, the pseudo-label table has {}",
                ATTRIBUTES,
                names.len(),
                table.attributes()
            )));
        }
        let tc = &self.cfg.trainer;
        let target = resolve_target(&names, tc)?;
        let loss_attrs = match &tc.loss_attributes {
            None => (0..names.len()).collect(),
            Some(list) => list
                .iter()
                .map(|n| attribute_index(&names, n, "trainer.loss_attributes"))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok((images.to_array(), table, loss_attrs, target))
    }

    fn pretrain(&mut self) -> Result<()> {
        let (x, table, loss_attrs, target) = self.training_inputs()?;
        let data = TrainSet::new(x.view(), &table, loss_attrs, target)?;
        let mut params = ModelParams::init(x.ncols(), &self.cfg.model, self.cfg.seed)?;
        let history = trainer::run_pretrain(&mut params, &data, &self.cfg.trainer, &self.cfg.loss, self.cfg.seed)?;
        params.save(&self.artifact(PRETRAIN_CHECKPOINT))?;
        write_history(&self.artifact(PRETRAIN_HISTORY), &history)?;
        self.produced(PRETRAIN_CHECKPOINT)?;
        self.produced(PRETRAIN_HISTORY)
    }

    fn train_meta(&mut self) -> Result<()> {
        let (x, table, loss_attrs, target) = self.training_inputs()?;
        let data = TrainSet::new(x.view(), &table, loss_attrs, target)?;
        let subset: ValSubsetFile = read_json(&self.artifact(VAL_SUBSET))?;
        let val = ValSet::from_rows(x.view(), &table, target, &subset.indices);
        let mut params = ModelParams::load(&self.artifact(PRETRAIN_CHECKPOINT))?;
        let tc = &self.cfg.trainer;
        if tc.stage1_epochs() < tc.epochs && val.is_empty() {
            return Err(Error::Selection(format!(
                "{VAL_SUBSET} is empty but the meta stage needs a validation subset"
            )));
        }
        let outcome = trainer::run_meta(&mut params, &data, &val, tc, &self.cfg.loss, self.cfg.seed)?;
        params.save(&self.artifact(MODEL_CHECKPOINT))?;
        let mut history = read_history(&self.artifact(PRETRAIN_HISTORY))?;
        history.extend(outcome.history);
        write_history(&self.artifact(HISTORY), &history)?;
        let summary = MetaSummary {
            stage1_epochs: tc.stage1_epochs(),
            epochs: tc.epochs,
            val_loss_at_switch: outcome.val_loss_at_switch,
            val_loss_final: outcome.val_loss_final,
        };
        write_json(&self.artifact(META_SUMMARY), &summary)?;
        for name in [MODEL_CHECKPOINT, HISTORY, META_SUMMARY] {
            self.produced(name)?;
        }
        Ok(())
    }

    fn probe(&mut self) -> Result<()> {
        let p = self.cfg.paths.clone();
        let params = ModelParams::load(&self.artifact(MODEL_CHECKPOINT))?;
        let (train_x, train_m) = load_labeled(&p.probe_train_embeddings, &p.probe_train_manifest)?;
        let (test_x, test_m) = load_labeled(&p.probe_test_embeddings, &p.probe_test_manifest)?;
        for (key, path) in [
            ("probe_train_embeddings", &p.probe_train_embeddings),
            ("probe_train_manifest", &p.probe_train_manifest),
            ("probe_test_embeddings", &p.probe_test_embeddings),
            ("probe_test_manifest", &p.probe_test_manifest),
        ] {
            self.input(key, path)?;
        }
        let labels = record_labels(&train_m, &p.probe_train_manifest)?;
        let rows: Vec<usize> = train_m.sorted_by_row().iter().map(|r| r.row).collect();
        let feats = params.features(train_x.rows_to_array(&rows).view())?;
        let probe = train_probe(feats.view(), &labels, &self.cfg.probe, self.cfg.seed)?;
        log::info!(
            "probe: {} iterations, gradient norm {:.2e}, loss {:.4}",
            probe.iterations,
            probe.grad_norm,
            probe.loss
        );
        probe.save(&self.artifact(PROBE))?;
        let test_records = test_m.sorted_by_row();
        let rows: Vec<usize> = test_records.iter().map(|r| r.row).collect();
        let pred = probe.predict(params.features(test_x.rows_to_array(&rows).view())?.view())?;
        let path = self.artifact(PREDICTIONS);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["id", "prediction"]).map_err(|e| csv_error(&path, e))?;
        for (r, y) in test_records.iter().zip(&pred) {
            w.write_record([r.id.as_str(), &y.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.produced(PROBE)?;
        self.produced(PREDICTIONS)
    }

    fn evaluate(&mut self) -> Result<()> {
        let p = &self.cfg.paths;
        let pred_path = p.predictions.clone().unwrap_or_else(|| self.artifact(PREDICTIONS));
        let manifest_path = p.probe_test_manifest.clone();
        let manifest = DatasetManifest::load(&manifest_path)?;
        manifest.validate(None)?;
        self.input("probe_test_manifest", &manifest_path)?;
        if p.predictions.is_some() {
            self.input("predictions", &pred_path)?;
        }
        let predicted = read_predictions(&pred_path)?;
        let mut pred = Vec::with_capacity(manifest.records.len());
        let mut labels = Vec::with_capacity(manifest.records.len());
        let mut groups = Vec::with_capacity(manifest.records.len());
        for r in manifest.sorted_by_row() {
            let y = predicted.get(&r.id).ok_or_else(|| {
                Error::Data(format!("{}: no prediction for sample {:?}", pred_path.display(), r.id))
            })?;
            pred.push(*y);
            labels.push(require(r.label, "label", &r.id, &manifest_path)? as usize);
            groups.push(require(r.group, "group", &r.id, &manifest_path)?);
        }
        if predicted.len() != pred.len() {
            return Err(Error::Data(format!(
                "{} has {} predictions for {} test samples",
                pred_path.display(),
                predicted.len(),
                pred.len()
            )));
        }
        let report = build_report(&pred, &labels, &groups)?;
        write_json(&self.artifact(REPORT_JSON), &report)?;
        let text = render_table(&[("model", &report)]);
        let path = self.artifact(REPORT_TEXT);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.produced(REPORT_JSON)?;
        self.produced(REPORT_TEXT)?;
        self.report = Some(report);
        Ok(())
    }
}

fn resolve_target(names: &[String], tc: &trainer::TrainConfig) -> Result<usize> {
    match &tc.target_attribute {
        None if names.is_empty() => Err(Error::Data("template bank has no attributes".into())),
        None => Ok(0),
        Some(n) => attribute_index(names, n, "trainer.target_attribute"),
    }
}

fn attribute_index(names: &[String], name: &str, key: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::Config(format!("{key}: unknown attribute {name:?} (have {names:?})")))
}

fn load_labeled(emb: &Path, manifest: &Path) -> Result<(EmbeddingMatrix, DatasetManifest)> {
    let x = load_embeddings(emb)?;
    let m = DatasetManifest::load(manifest)?;
    m.validate(Some(x.n()))?;
    Ok((x, m))
}

fn record_labels(m: &DatasetManifest, path: &Path) -> Result<Vec<usize>> {
    m.sorted_by_row()
        .iter()
        .map(|r| require(r.label, "label", &r.id, path).map(|y| y as usize))
        .collect()
}

fn require(v: Option<u32>, field: &str, id: &str, path: &Path) -> Result<u32> {
    v.ok_or_else(|| Error::Data(format!("{}: record {id:?} has no {field}", path.display())))
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, usize>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        prediction: usize,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(|e| csv_error(path, e))?;
        if out.insert(row.id.clone(), row.prediction).is_some() {
            return Err(Error::Data(format!("{}: duplicate id {:?}", path.display(), row.id)));
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
