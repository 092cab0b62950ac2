//! Curation of an uncurated embedding pool against a small curated set.
//!
//! The pool is first deduplicated greedily, then the `m` nearest kept pool rows
//! of every curated row are retrieved, optionally filtered by a quality score,
//! and appended to the curated set.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::store::{normalize_rows, BlindManifest, BlindRecord, EmbeddingMatrix, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnBackend {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub dedup_threshold: f64,
    pub retrieval_m: usize,
    pub quality_threshold: Option<f64>,
    pub knn_backend: KnnBackend,
    /// Inverted lists for the approximate backend; `None` means `sqrt(n)`.
    pub ivf_lists: Option<usize>,
    /// Lists probed per query; `None` means a third of the lists.
    pub ivf_probes: Option<usize>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            dedup_threshold: 0.95,
            retrieval_m: 4,
            quality_threshold: None,
            knn_backend: KnnBackend::Exact,
            ivf_lists: None,
            ivf_probes: None,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "curation.dedup_threshold must lie in (0, 1], got {}",
                self.dedup_threshold
            )));
        }
        if self.retrieval_m == 0 {
            return Err(Error::Config("curation.retrieval_m must be at least 1".into()));
        }
        if self.ivf_lists == Some(0) || self.ivf_probes == Some(0) {
            return Err(Error::Config("curation.ivf_lists/ivf_probes must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of {}-d and {}-d vectors",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn require_normalized(m: &EmbeddingMatrix, what: &str) -> Result<()> {
    if m.is_normalized() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} embeddings must be normalized")))
    }
}

/// Greedy first-wins deduplication in row order.
///
/// Row `i` is kept iff its cosine similarity to every previously kept row is
/// below `threshold`. Returns kept row indices in ascending order.
pub fn deduplicate(pool: &EmbeddingMatrix, threshold: f64) -> Result<Vec<usize>> {
    require_normalized(pool, "pool")?;
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("dedup threshold {threshold} outside (0, 1]")));
    }
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..pool.n() {
        let row = pool.row(i);
        let dup = kept.iter().any(|&k| dot(row, pool.row(k)).min(1.0) >= threshold);
        if !dup {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Orders `(similarity, index)` by descending similarity, then ascending index.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

fn top_m(mut scored: Vec<(f64, usize)>, m: usize) -> Vec<usize> {
    if scored.len() > m {
        scored.select_nth_unstable_by(m - 1, rank);
        scored.truncate(m);
    }
    scored.sort_by(rank);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn check_knn_inputs(
    curated: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    kept: &[usize],
    m: usize,
) -> Result<()> {
    require_normalized(curated, "curated")?;
    require_normalized(pool, "pool")?;
    if curated.d() != pool.d() {
        return Err(Error::Dimension(format!(
            "curated d={} but pool d={}",
            curated.d(),
            pool.d()
        )));
    }
    if m == 0 {
        return Err(Error::Config("retrieval m must be at least 1".into()));
    }
    if m > kept.len() {
        return Err(Error::Config(format!(
            "retrieval m={m} exceeds the {} kept pool rows",
            kept.len()
        )));
    }
    if let Some(&bad) = kept.iter().find(|&&k| k >= pool.n()) {
        return Err(Error::Data(format!("kept index {bad} outside pool of {}", pool.n())));
    }
    Ok(())
}

/// Exact `m` nearest kept pool rows for every curated row, best first.
pub fn knn_neighbors(
    curated: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    kept: &[usize],
    m: usize,
) -> Result<Vec<Vec<usize>>> {
    check_knn_inputs(curated, pool, kept, m)?;
    Ok(par::map_range(curated.n(), |q| {
        let query = curated.row(q);
        let scored = kept.iter().map(|&k| (dot(query, pool.row(k)), k)).collect();
        top_m(scored, m)
    }))
}

fn union_sorted(lists: Vec<Vec<usize>>) -> Vec<usize> {
    let mut all: Vec<usize> = lists.into_iter().flatten().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Deduplicated, ascending union of the exact `m`-nearest neighbors.
pub fn knn_retrieve(
    curated: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    kept: &[usize],
    m: usize,
) -> Result<Vec<usize>> {
    knn_neighbors(curated, pool, kept, m).map(union_sorted)
}

/// Inverted-file index over normalized rows, built with spherical k-means.
#[derive(Debug, Clone)]
pub struct IvfIndex {
    d: usize,
    centroids: Vec<Vec<f32>>,
    lists: Vec<Vec<usize>>,
    probes: usize,
}

impl IvfIndex {
    const KMEANS_ITERS: usize = 10;

    pub fn build(
        pool: &EmbeddingMatrix,
        kept: &[usize],
        lists: Option<usize>,
        probes: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        require_normalized(pool, "pool")?;
        if kept.is_empty() {
            return Err(Error::Config("cannot index an empty pool".into()));
        }
        let nlist = lists
            .unwrap_or_else(|| (kept.len() as f64).sqrt().round() as usize)
            .clamp(1, kept.len());
        let probes = probes.unwrap_or(nlist.div_ceil(3)).clamp(1, nlist);
        let d = pool.d();

        let mut init = kept.to_vec();
        init.shuffle(&mut rng::stream(seed, "ivf-init"));
        let mut centroids: Vec<Vec<f32>> =
            init[..nlist].iter().map(|&k| pool.row(k).to_vec()).collect();

        let mut assign = vec![0usize; kept.len()];
        for _ in 0..Self::KMEANS_ITERS {
            assign = par::map_slice(kept, |&k| nearest_centroid(&centroids, pool.row(k)));
            let mut sums = vec![vec![0.0f64; d]; nlist];
            for (&k, &c) in kept.iter().zip(&assign) {
                for (s, &v) in sums[c].iter_mut().zip(pool.row(k)) {
                    *s += v as f64;
                }
            }
            for (c, s) in sums.into_iter().enumerate() {
                let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    centroids[c] = s.iter().map(|v| (v / norm) as f32).collect();
                }
            }
        }
        let mut inverted = vec![Vec::new(); nlist];
        for (&k, &c) in kept.iter().zip(&assign) {
            inverted[c].push(k);
        }
        Ok(Self {
            d,
            centroids,
            lists: inverted,
            probes,
        })
    }

    pub fn list_count(&self) -> usize {
        self.lists.len()
    }

    /// Approximate `m` nearest rows. Probes more lists until `m` candidates exist.
    pub fn search(&self, pool: &EmbeddingMatrix, query: &[f32], m: usize) -> Vec<usize> {
        debug_assert_eq!(query.len(), self.d);
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(c, cen)| (dot(query, cen), c))
            .collect();
        order.sort_by(rank);
        let mut candidates = Vec::new();
        for (probed, &(_, c)) in order.iter().enumerate() {
            if probed >= self.probes && candidates.len() >= m {
                break;
            }
            candidates.extend(self.lists[c].iter().map(|&k| (dot(query, pool.row(k)), k)));
        }
        top_m(candidates, m)
    }
}

fn nearest_centroid(centroids: &[Vec<f32>], row: &[f32]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (c, cen) in centroids.iter().enumerate() {
        let s = dot(row, cen);
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

/// Retrieval through the backend selected in `config`.
pub fn knn_retrieve_with(
    curated: &EmbeddingMatrix,
    pool: &EmbeddingMatrix,
    kept: &[usize],
    config: &CurationConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let m = config.retrieval_m;
    match config.knn_backend {
        KnnBackend::Exact => knn_retrieve(curated, pool, kept, m),
        KnnBackend::Approximate => {
            check_knn_inputs(curated, pool, kept, m)?;
            let index = IvfIndex::build(pool, kept, config.ivf_lists, config.ivf_probes, seed)?;
            let lists = par::map_range(curated.n(), |q| index.search(pool, curated.row(q), m));
            Ok(union_sorted(lists))
        }
    }
}

/// Positions of records whose quality score is at least `threshold`.
pub fn quality_filter(records: &[BlindRecord], threshold: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.quality {
            Some(q) if q >= threshold => out.push(i),
            Some(_) => {}
            None => {
                return Err(Error::Data(format!(
                    "record {:?} has no quality score",
                    r.id
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CurationResult {
    pub kept_uncurated: Vec<usize>,
    pub retrieved: Vec<usize>,
    /// Retrieved pool rows that passed the quality filter.
    pub accepted: Vec<usize>,
    pub augmented_manifest: BlindManifest,
    pub augmented: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub curated: usize,
    pub pool: usize,
    pub kept: usize,
    pub removed_duplicates: usize,
    pub retrieved: usize,
    pub filtered_out: usize,
    pub augmented: usize,
}

impl CurationResult {
    pub fn report(&self, curated: usize, pool: usize) -> CurationReport {
        CurationReport {
            curated,
            pool,
            kept: self.kept_uncurated.len(),
            removed_duplicates: pool - self.kept_uncurated.len(),
            retrieved: self.retrieved.len(),
            filtered_out: self.retrieved.len() - self.accepted.len(),
            augmented: self.augmented_manifest.records.len(),
        }
    }
}

/// Curated records first (by row), then accepted retrieved pool rows by
/// ascending pool index. Rows are re-indexed into the augmented matrix.
pub fn build_augmented_curated(
    curated: &EmbeddingMatrix,
    curated_manifest: &BlindManifest,
    pool: &EmbeddingMatrix,
    pool_manifest: &BlindManifest,
    kept: Vec<usize>,
    retrieved: Vec<usize>,
    quality_threshold: Option<f64>,
) -> Result<CurationResult> {
    curated_manifest.validate(Some(curated.n()))?;
    pool_manifest.validate(Some(pool.n()))?;
    let by_row: HashMap<usize, &BlindRecord> =
        pool_manifest.records.iter().map(|r| (r.row, r)).collect();
    let retrieved_records: Vec<BlindRecord> = retrieved
        .iter()
        .map(|row| {
            by_row
                .get(row)
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::Data(format!("pool row {row} has no manifest record")))
        })
        .collect::<Result<_>>()?;
    let accepted: Vec<usize> = match quality_threshold {
        Some(t) => quality_filter(&retrieved_records, t)?
            .into_iter()
            .map(|i| retrieved[i])
            .collect(),
        None => retrieved.clone(),
    };

    let mut curated_records: Vec<&BlindRecord> = curated_manifest.records.iter().collect();
    curated_records.sort_by_key(|r| r.row);
    let curated_rows: Vec<usize> = curated_records.iter().map(|r| r.row).collect();

    let mut ids: HashSet<&str> = curated_records.iter().map(|r| r.id.as_str()).collect();
    let mut records = Vec::with_capacity(curated_records.len() + accepted.len());
    for (i, r) in curated_records.iter().enumerate() {
        records.push(BlindRecord {
            id: r.id.clone(),
            row: i,
            source: Source::Curated,
            quality: r.quality,
        });
    }
    for &row in &accepted {
        let r = by_row[&row];
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Data(format!(
                "retrieved id {:?} collides with an existing record",
                r.id
            )));
        }
        records.push(BlindRecord {
            id: r.id.clone(),
            row: records.len(),
            source: Source::Retrieved,
            quality: r.quality,
        });
    }
    let augmented = curated
        .select_rows(&curated_rows)
        .concat(&pool.select_rows(&accepted))?;
    Ok(CurationResult {
        kept_uncurated: kept,
        retrieved,
        accepted,
        augmented_manifest: BlindManifest { records },
        augmented,
    })
}

/// Full curation: normalize, deduplicate, retrieve, filter, merge.
pub fn curate(
    curated: &EmbeddingMatrix,
    curated_manifest: &BlindManifest,
    pool: &EmbeddingMatrix,
    pool_manifest: &BlindManifest,
    config: &CurationConfig,
    seed: u64,
) -> Result<CurationResult> {
    config.validate()?;
    let curated = ensure_normalized(curated)?;
    let pool = ensure_normalized(pool)?;
    let kept = deduplicate(&pool, config.dedup_threshold)?;
    let retrieved = knn_retrieve_with(&curated, &pool, &kept, config, seed)?;
    build_augmented_curated(
        &curated,
        curated_manifest,
        &pool,
        pool_manifest,
        kept,
        retrieved,
        config.quality_threshold,
    )
}

pub(crate) fn ensure_normalized(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.is_normalized() {
        Ok(m.clone())
    } else {
        normalize_rows(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn unit_rows(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        normalize_rows(&EmbeddingMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
            .collect();
        unit_rows(&rows)
    }

    fn record(id: &str, row: usize, quality: Option<f64>) -> BlindRecord {
        BlindRecord {
            id: id.into(),
            row,
            source: Source::Uncurated,
            quality,
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846_197_076_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn dedup_exact_duplicate_and_orthogonal() {
        let m = unit_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(deduplicate(&m, 0.99).unwrap(), vec![0]);
        let o = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(deduplicate(&o, 0.99).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn dedup_chain_is_greedy() {
        // angles 0, a, 2a with cos a = 0.995: u0.u1 = u1.u2 = 0.995, u0.u2 ~ 0.980
        let a = 0.995f64.acos();
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|k| {
                let t = a * k as f64;
                vec![t.cos() as f32, t.sin() as f32]
            })
            .collect();
        let m = unit_rows(&rows);
        assert_eq!(deduplicate(&m, 0.99).unwrap(), vec![0, 2]);
    }

    #[test]
    fn dedup_requires_normalized() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 2.0]]).unwrap();
        assert!(deduplicate(&m, 0.9).is_err());
    }

    #[test]
    fn dedup_output_has_no_close_pair_and_is_idempotent() {
        // clustered data so that many pairs exceed the threshold
        let base = random_unit(40, 8, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f32>> = (0..400)
            .map(|i| {
                base.row(i % 40)
                    .iter()
                    .map(|&v| v + 0.05 * rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let pool = unit_rows(&rows);
        let kept = deduplicate(&pool, 0.95).unwrap();
        assert!(kept.len() < 400);
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                assert!(dot(pool.row(i), pool.row(j)) < 0.95);
            }
        }
        let again = deduplicate(&pool.select_rows(&kept), 0.95).unwrap();
        assert_eq!(again, (0..kept.len()).collect::<Vec<_>>());
    }

    #[test]
    fn knn_self_match_and_union() {
        let pool = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let q = pool.select_rows(&[1]);
        assert_eq!(knn_retrieve(&q, &pool, &[0, 1, 2], 1).unwrap(), vec![1]);

        let queries = unit_rows(&[vec![0.1, 1.0], vec![-0.1, 1.0]]);
        assert_eq!(knn_retrieve(&queries, &pool, &[0, 1, 2], 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pool = unit_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let q = unit_rows(&[vec![1.0, 0.0]]);
        assert_eq!(knn_neighbors(&q, &pool, &[0, 1, 2], 1).unwrap(), vec![vec![1]]);
        assert_eq!(knn_neighbors(&q, &pool, &[2, 0, 1], 2).unwrap(), vec![vec![1, 2]]);
    }

    #[test]
    fn knn_matches_argsort_oracle() {
        let curated = random_unit(4, 6, 11);
        let pool = random_unit(20, 6, 12);
        let kept: Vec<usize> = (0..20).collect();
        let got = knn_neighbors(&curated, &pool, &kept, 3).unwrap();
        for (q, list) in got.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..20)
                .map(|j| (cosine_similarity(curated.row(q), pool.row(j)).unwrap(), j))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..3].iter().map(|p| p.1).collect();
            assert_eq!(list, &want);
        }
    }

    #[test]
    fn knn_respects_kept_and_m_bound() {
        let pool = random_unit(10, 4, 5);
        let curated = random_unit(3, 4, 6);
        let kept = vec![1, 3, 5, 7];
        let got = knn_retrieve(&curated, &pool, &kept, 2).unwrap();
        assert!(got.iter().all(|i| kept.contains(i)));
        assert!(matches!(
            knn_retrieve(&curated, &pool, &kept, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ivf_recall_on_1k_pool() {
        let centers = random_unit(20, 16, 20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f32>> = (0..1000)
            .map(|i| {
                let c = centers.row(i % 20);
                c.iter().map(|&v| v + 0.15 * rng.random_range(-1.0f32..1.0)).collect()
            })
            .collect();
        let pool = normalize_rows(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
        let curated = random_unit(50, 16, 22);
        let kept: Vec<usize> = (0..1000).collect();
        let exact = knn_retrieve(&curated, &pool, &kept, 4).unwrap();
        let cfg = CurationConfig {
            knn_backend: KnnBackend::Approximate,
            ..CurationConfig::default()
        };
        let approx = knn_retrieve_with(&curated, &pool, &kept, &cfg, 3).unwrap();
        let hits = approx.iter().filter(|i| exact.binary_search(i).is_ok()).count();
        assert!(hits as f64 >= 0.95 * exact.len() as f64, "{hits}/{}", exact.len());
    }

    #[test]
    fn quality_filter_cases() {
        let recs = vec![record("a", 0, Some(0.2)), record("b", 1, Some(0.8))];
        assert_eq!(quality_filter(&recs, 0.5).unwrap(), vec![1]);
        assert_eq!(quality_filter(&recs, 0.0).unwrap(), vec![0, 1]);
        let missing = vec![record("a", 0, None)];
        assert!(matches!(quality_filter(&missing, 0.5), Err(Error::Data(_))));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let recs: Vec<BlindRecord> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| record(&i.to_string(), i, Some(s)))
            .collect();
        let want: Vec<usize> = (0..100).filter(|&i| scores[i] >= 0.7).collect();
        assert_eq!(quality_filter(&recs, 0.7).unwrap(), want);
    }

    fn manifest(prefix: &str, n: usize, source: Source) -> BlindManifest {
        BlindManifest {
            records: (0..n)
                .map(|i| BlindRecord {
                    id: format!("{prefix}{i}"),
                    row: i,
                    source,
                    quality: Some(i as f64 / n as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn augmented_empty_and_counts() {
        let curated = random_unit(100, 4, 1);
        let pool = random_unit(80, 4, 2);
        let cm = manifest("c", 100, Source::Curated);
        let pm = manifest("u", 80, Source::Uncurated);
        let kept: Vec<usize> = (0..80).collect();

        let r = build_augmented_curated(&curated, &cm, &pool, &pm, kept.clone(), vec![], None)
            .unwrap();
        assert_eq!(r.augmented_manifest, cm);
        assert_eq!(r.augmented, curated);

        let retrieved: Vec<usize> = (0..50).collect();
        let r = build_augmented_curated(&curated, &cm, &pool, &pm, kept, retrieved, None).unwrap();
        assert_eq!(r.augmented_manifest.records.len(), 150);
        assert_eq!(r.augmented.n(), 150);
        assert!(r.augmented_manifest.records[..100]
            .iter()
            .all(|x| x.source == Source::Curated));
        assert!(r.augmented_manifest.records[100..]
            .iter()
            .all(|x| x.source == Source::Retrieved));
        assert_eq!(r.augmented.row(100), pool.row(0));
        assert_eq!(r.report(100, 80).filtered_out, 0);
    }

    #[test]
    fn augmented_quality_and_collisions() {
        let curated = random_unit(2, 4, 1);
        let pool = random_unit(10, 4, 2);
        let cm = manifest("c", 2, Source::Curated);
        let pm = manifest("u", 10, Source::Uncurated);
        let r = build_augmented_curated(
            &curated,
            &cm,
            &pool,
            &pm,
            (0..10).collect(),
            vec![1, 4, 8],
            Some(0.35),
        )
        .unwrap();
        assert_eq!(r.accepted, vec![4, 8]);
        assert_eq!(r.report(2, 10).filtered_out, 1);

        let clash = manifest("c", 10, Source::Uncurated);
        assert!(matches!(
            build_augmented_curated(&curated, &cm, &pool, &clash, (0..10).collect(), vec![0], None),
            Err(Error::Data(_))
        ));
    }
}
