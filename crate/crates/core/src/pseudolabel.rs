//! Zero-shot binary pseudo-labels from positive/negative template embeddings.
//!
//! For every attribute a sample is compared against `T` pairs of template
//! embeddings ("with X" / "without X"). Each pair yields a two-class softmax
//! over the scaled similarities; the `T` probability vectors are averaged and
//! the label is the argmax (ties go to the positive class).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::curation::{dot, ensure_normalized};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::store::{load_embeddings, row_norm, save_embeddings, EmbeddingMatrix, NORM_TOL};

pub const DEFAULT_SCALE: f64 = 100.0;

/// The 40 CelebA attribute names, the default attribute vocabulary.
pub const CELEBA_ATTRIBUTES: [&str; 40] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Bald",
    "Bangs",
    "Big_Lips",
    "Big_Nose",
    "Black_Hair",
    "Blond_Hair",
    "Blurry",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Goatee",
    "Gray_Hair",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Oval_Face",
    "Pale_Skin",
    "Pointy_Nose",
    "Receding_Hairline",
    "Rosy_Cheeks",
    "Sideburns",
    "Smiling",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Lipstick",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Young",
];

/// `T` positive and `T` negative template embeddings for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePair {
    pub pos: EmbeddingMatrix,
    pub neg: EmbeddingMatrix,
}

impl TemplatePair {
    pub fn new(pos: EmbeddingMatrix, neg: EmbeddingMatrix) -> Result<Self> {
        if pos.n() != neg.n() {
            return Err(Error::Data(format!(
                "{} positive templates but {} negative",
                pos.n(),
                neg.n()
            )));
        }
        if pos.n() == 0 {
            return Err(Error::Data("attribute has no templates".into()));
        }
        if pos.d() != neg.d() {
            return Err(Error::Dimension(format!(
                "positive templates are {}-d, negative {}-d",
                pos.d(),
                neg.d()
            )));
        }
        Ok(Self {
            pos: ensure_normalized(&pos)?,
            neg: ensure_normalized(&neg)?,
        })
    }

    pub fn template_count(&self) -> usize {
        self.pos.n()
    }

    /// Same templates with the polarities exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pos: self.neg.clone(),
            neg: self.pos.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTemplateBank {
    pub attributes: Vec<String>,
    pub templates: Vec<TemplatePair>,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    attributes: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    name: String,
    pos: PathBuf,
    neg: PathBuf,
}

impl AttributeTemplateBank {
    pub fn new(attributes: Vec<String>, templates: Vec<TemplatePair>) -> Result<Self> {
        if attributes.len() != templates.len() {
            return Err(Error::Data(format!(
                "{} attribute names for {} template pairs",
                attributes.len(),
                templates.len()
            )));
        }
        if let Some(d) = templates.first().map(|t| t.pos.d()) {
            if templates.iter().any(|t| t.pos.d() != d) {
                return Err(Error::Dimension("template banks disagree on dimension".into()));
            }
        }
        Ok(Self {
            attributes,
            templates,
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.templates.first().map(|t| t.pos.d())
    }

    /// Loads a JSON index `{"attributes": [{"name", "pos", "neg"}]}`; file
    /// paths are relative to the index.
    pub fn load(index: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(index)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(index, e))?;
        let parsed: BankIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
        let base = index.parent().unwrap_or(Path::new("."));
        let mut names = Vec::new();
        let mut templates = Vec::new();
        for entry in parsed.attributes {
            let pos = load_embeddings(&base.join(&entry.pos))?;
            let neg = load_embeddings(&base.join(&entry.neg))?;
            templates.push(TemplatePair::new(pos, neg)?);
            names.push(entry.name);
        }
        Self::new(names, templates)
    }

    /// The index followed by every template file it references.
    pub fn referenced_files(index: &Path) -> Result<Vec<PathBuf>> {
        let text = std::fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
        let parsed: BankIndex = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", index.display())))?;
        let base = index.parent().unwrap_or(Path::new("."));
        let mut files = vec![index.to_path_buf()];
        for entry in parsed.attributes {
            files.push(base.join(entry.pos));
            files.push(base.join(entry.neg));
        }
        Ok(files)
    }

    /// Writes one embedding file per attribute and polarity next to `index`.
    pub fn save(&self, index: &Path) -> Result<()> {
        let base = index.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (name, pair) in self.attributes.iter().zip(&self.templates) {
            let pos = PathBuf::from(format!("{name}.pos.fsemb"));
            let neg = PathBuf::from(format!("{name}.neg.fsemb"));
            save_embeddings(&pair.pos, &base.join(&pos))?;
            save_embeddings(&pair.neg, &base.join(&neg))?;
            entries.push(BankEntry {
                name: name.clone(),
                pos,
                neg,
            });
        }
        let text = serde_json::to_string_pretty(&BankIndex {
            attributes: entries,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(index, text).map_err(|e| Error::io(index, e))
    }
}

/// Outcome of a two-class zero-shot decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShot {
    pub label: u8,
    pub confidence: f64,
    /// `[p(positive), p(negative)]`
    pub probs: [f64; 2],
}

impl ZeroShot {
    fn from_probs(probs: [f64; 2]) -> Self {
        let label = u8::from(probs[0] >= probs[1]);
        Self {
            label,
            confidence: probs[0].max(probs[1]),
            probs,
        }
    }
}

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

fn check_unit(v: &[f32], what: &str) -> Result<()> {
    let n = row_norm(v);
    if (n - 1.0).abs() > NORM_TOL {
        return Err(Error::Data(format!("{what} has norm {n:.9}, expected 1")));
    }
    Ok(())
}

/// Softmax over `scale * [img.pos, img.neg]`; label 1 iff `p(pos) >= p(neg)`.
pub fn zero_shot_label(img: &[f32], pos: &[f32], neg: &[f32], scale: f64) -> Result<ZeroShot> {
    if img.len() != pos.len() || img.len() != neg.len() {
        return Err(Error::Dimension(format!(
            "image {}-d, templates {}-d/{}-d",
            img.len(),
            pos.len(),
            neg.len()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::Config(format!("logit scale must be positive, got {scale}")));
    }
    check_unit(img, "image embedding")?;
    check_unit(pos, "positive template")?;
    check_unit(neg, "negative template")?;
    Ok(ZeroShot::from_probs(softmax2(
        scale * dot(img, pos),
        scale * dot(img, neg),
    )))
}

/// Template-averaged zero-shot decision for every row of `images`.
pub fn label_attribute(
    images: &EmbeddingMatrix,
    pair: &TemplatePair,
    scale: f64,
) -> Result<Vec<ZeroShot>> {
    if !images.is_normalized() {
        return Err(Error::Data("image embeddings must be normalized".into()));
    }
    if pair.pos.n() != pair.neg.n() {
        return Err(Error::Data("template count differs between polarities".into()));
    }
    if images.n() > 0 && images.d() != pair.pos.d() {
        return Err(Error::Dimension(format!(
            "images are {}-d, templates {}-d",
            images.d(),
            pair.pos.d()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::Config(format!("logit scale must be positive, got {scale}")));
    }
    let t = pair.template_count();
    Ok(par::map_range(images.n(), |i| {
        let img = images.row(i);
        let mut acc = [0.0f64; 2];
        for k in 0..t {
            let p = softmax2(
                scale * dot(img, pair.pos.row(k)),
                scale * dot(img, pair.neg.row(k)),
            );
            acc[0] += p[0];
            acc[1] += p[1];
        }
        ZeroShot::from_probs([acc[0] / t as f64, acc[1] / t as f64])
    }))
}

pub const TABLE_MAGIC: &[u8; 4] = b"FSPL";
pub const TABLE_VERSION: u32 = 1;

/// `n x A` binary pseudo-labels with confidences, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelTable {
    n: usize,
    a: usize,
    labels: Vec<u8>,
    confidences: Vec<f32>,
}

impl PseudoLabelTable {
    pub fn new(n: usize, a: usize, labels: Vec<u8>, confidences: Vec<f32>) -> Result<Self> {
        if labels.len() != n * a || confidences.len() != n * a {
            return Err(Error::Size(format!("pseudo-label table is not {n}x{a}")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("pseudo-labels must be 0 or 1".into()));
        }
        if confidences
            .iter()
            .any(|c| !c.is_finite() || !(0.5..=1.0).contains(c))
        {
            return Err(Error::Data("confidences must lie in [0.5, 1]".into()));
        }
        Ok(Self {
            n,
            a,
            labels,
            confidences,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn attributes(&self) -> usize {
        self.a
    }

    pub fn label(&self, i: usize, attr: usize) -> u8 {
        self.labels[i * self.a + attr]
    }

    pub fn confidence(&self, i: usize, attr: usize) -> f32 {
        self.confidences[i * self.a + attr]
    }

    /// Labels of sample `i` across all attributes.
    pub fn row_labels(&self, i: usize) -> &[u8] {
        &self.labels[i * self.a..(i + 1) * self.a]
    }

    pub fn column(&self, attr: usize) -> Vec<u8> {
        (0..self.n).map(|i| self.label(i, attr)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(TABLE_MAGIC).map_err(io)?;
        w.write_all(&TABLE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.n as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.a as u32).to_le_bytes()).map_err(io)?;
        for (l, c) in self.labels.iter().zip(&self.confidences) {
            w.write_all(&[*l]).map_err(io)?;
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 8 + 4;
        if bytes.len() < HEADER || &bytes[..4] != TABLE_MAGIC {
            return Err(Error::Format("not a pseudo-label table (bad header)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let a = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let body = &bytes[HEADER..];
        if Some(body.len()) != n.checked_mul(a).and_then(|c| c.checked_mul(5)) {
            return Err(Error::Size(format!(
                "table body is {} bytes, header declares {n}x{a}",
                body.len()
            )));
        }
        let mut labels = Vec::with_capacity(n * a);
        let mut confidences = Vec::with_capacity(n * a);
        for c in body.chunks_exact(5) {
            labels.push(c[0]);
            confidences.push(f32::from_le_bytes(c[1..5].try_into().unwrap()));
        }
        Self::new(n, a, labels, confidences)
    }
}

/// Applies [`label_attribute`] to every attribute of the bank.
pub fn build_pseudolabel_table(
    images: &EmbeddingMatrix,
    bank: &AttributeTemplateBank,
    scale: f64,
) -> Result<PseudoLabelTable> {
    let columns = bank
        .templates
        .iter()
        .map(|pair| label_attribute(images, pair, scale))
        .collect::<Result<Vec<_>>>()?;
    let (n, a) = (images.n(), bank.len());
    let mut labels = Vec::with_capacity(n * a);
    let mut confidences = Vec::with_capacity(n * a);
    for i in 0..n {
        for col in &columns {
            labels.push(col[i].label);
            confidences.push(col[i].confidence as f32);
        }
    }
    PseudoLabelTable::new(n, a, labels, confidences)
}

/// Seeded, class-balanced sample of `m` samples whose confidence on `attr`
/// is at least `conf_threshold`. Returned indices are ascending.
pub fn select_validation_subset(
    table: &PseudoLabelTable,
    attr: usize,
    conf_threshold: f64,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if attr >= table.attributes() {
        return Err(Error::Config(format!(
            "attribute index {attr} outside table with {} attributes",
            table.attributes()
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..table.n() {
        if table.confidence(i, attr) as f64 >= conf_threshold {
            by_class[table.label(i, attr) as usize].push(i);
        }
    }
    let available = by_class[0].len() + by_class[1].len();
    if available < m {
        return Err(Error::Selection(format!(
            "need {m} samples with confidence >= {conf_threshold}, only {available} qualify"
        )));
    }
    let mut rng = rng::stream(seed, "validation-subset");
    for class in &mut by_class {
        class.shuffle(&mut rng);
    }
    let half = m / 2;
    let mut take = [half.min(by_class[0].len()), half.min(by_class[1].len())];
    let mut short = m - take[0] - take[1];
    // fill any shortfall (odd m or a thin class) from the class with more left
    while short > 0 {
        let spare = [by_class[0].len() - take[0], by_class[1].len() - take[1]];
        let c = usize::from(spare[1] > spare[0]);
        take[c] += 1;
        short -= 1;
    }
    let mut out: Vec<usize> = by_class[0][..take[0]]
        .iter()
        .chain(&by_class[1][..take[1]])
        .copied()
        .collect();
    out.sort_unstable();
    Ok(out)
}
