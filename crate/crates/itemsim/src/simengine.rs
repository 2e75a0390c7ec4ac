//! Pairwise cosine similarity, intra-/inter-strategy aggregation, band
//! classification, threshold counting, and pair flagging.
//!
//! All dot products accumulate in f64 regardless of the stored f32 vector
//! precision, and every score is clamped to [-1, 1]. Blocked/parallel code
//! paths assemble results in a fixed order so outputs are deterministic.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EpaTopic;
use crate::embedder::EmbeddingVector;

/// Column tile width for the blocked kernels; sized so a tile of 768-d f32
/// vectors stays L2-resident.
const COL_TILE: usize = 128;
/// Row tile height; each row tile is one parallel work unit.
const ROW_TILE: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("zero-norm vector at index {0}")]
    ZeroNorm(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("backend mismatch: {left} vs {right}")]
    BackendMismatch { left: String, right: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("intra-strategy mean needs at least 2 vectors, got {0}")]
    CorpusTooSmall(usize),
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("matrix relabel: expected {expected} ids, got {got}")]
    BadLabels { expected: usize, got: usize },
}

/// Item-indexed dense matrix of pairwise cosine coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.col_ids.len() + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Arithmetic mean over every entry.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// True when row and column ids denote the same corpus.
    pub fn is_within(&self) -> bool {
        self.row_ids == self.col_ids
    }

    /// Replaces the default index labels with item ids.
    pub fn relabel(mut self, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<Self, SimError> {
        if row_ids.len() != self.row_ids.len() {
            return Err(SimError::BadLabels {
                expected: self.row_ids.len(),
                got: row_ids.len(),
            });
        }
        if col_ids.len() != self.col_ids.len() {
            return Err(SimError::BadLabels {
                expected: self.col_ids.len(),
                got: col_ids.len(),
            });
        }
        self.row_ids = row_ids;
        self.col_ids = col_ids;
        Ok(self)
    }

    /// CSV export: column headers are col ids, first cell of each row is the
    /// row id, values at full (round-trippable) precision.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = String::from("id");
        for id in &self.col_ids {
            header.push(',');
            header.push_str(&csv_escape(id));
        }
        writeln!(w, "{header}")?;
        for (r, row_id) in self.row_ids.iter().enumerate() {
            let mut line = csv_escape(row_id);
            for c in 0..self.col_ids.len() {
                line.push(',');
                line.push_str(&format!("{}", self.get(r, c)));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Corpus packed into contiguous storage with precomputed inverse norms.
struct Packed {
    data: Vec<f32>,
    dim: usize,
    inv_norms: Vec<f64>,
}

impl Packed {
    fn len(&self) -> usize {
        self.inv_norms.len()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn pack(vectors: &[EmbeddingVector]) -> Result<Packed, SimError> {
    if vectors.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    let backend = &vectors[0].backend_id;
    let dim = vectors[0].values.len();
    let mut data = Vec::with_capacity(vectors.len() * dim);
    let mut inv_norms = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        if v.backend_id != *backend {
            return Err(SimError::BackendMismatch {
                left: backend.clone(),
                right: v.backend_id.clone(),
            });
        }
        if v.values.len() != dim {
            return Err(SimError::DimensionMismatch {
                left: dim,
                right: v.values.len(),
            });
        }
        let norm = norm_f64(&v.values);
        if norm == 0.0 {
            return Err(SimError::ZeroNorm(i));
        }
        inv_norms.push(1.0 / norm);
        data.extend_from_slice(&v.values);
    }
    Ok(Packed {
        data,
        dim,
        inv_norms,
    })
}

fn check_pair(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<(), SimError> {
    if u.backend_id != v.backend_id {
        return Err(SimError::BackendMismatch {
            left: u.backend_id.clone(),
            right: v.backend_id.clone(),
        });
    }
    if u.values.len() != v.values.len() {
        return Err(SimError::DimensionMismatch {
            left: u.values.len(),
            right: v.values.len(),
        });
    }
    Ok(())
}

fn dot_f64(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum::<f64>()
}

fn norm_f64(u: &[f32]) -> f64 {
    u.iter().map(|&a| (a as f64) * (a as f64)).sum::<f64>().sqrt()
}

fn clamp(score: f64) -> f64 {
    score.clamp(-1.0, 1.0)
}

/// Cosine similarity of two vectors from the same backend.
///
/// Renormalizes regardless of the vectors' `normalized` flag, so the result
/// does not depend on whether the backend normalized its output.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, SimError> {
    check_pair(u, v)?;
    let nu = norm_f64(&u.values);
    if nu == 0.0 {
        return Err(SimError::ZeroNorm(0));
    }
    let nv = norm_f64(&v.values);
    if nv == 0.0 {
        return Err(SimError::ZeroNorm(1));
    }
    Ok(clamp(dot_f64(&u.values, &v.values) / (nu * nv)))
}

/// Dense |A| x |B| cosine matrix, computed with a tiled kernel parallelized
/// over row tiles. Row/column labels default to indices; use
/// [`SimilarityMatrix::relabel`] to attach item ids.
pub fn pairwise_between(
    a: &[EmbeddingVector],
    b: &[EmbeddingVector],
) -> Result<SimilarityMatrix, SimError> {
    let pa = pack(a)?;
    let pb = pack(b)?;
    if pa.dim != pb.dim {
        return Err(SimError::DimensionMismatch {
            left: pa.dim,
            right: pb.dim,
        });
    }
    if a[0].backend_id != b[0].backend_id {
        return Err(SimError::BackendMismatch {
            left: a[0].backend_id.clone(),
            right: b[0].backend_id.clone(),
        });
    }
    let cols = pb.len();
    let mut values = vec![0.0f64; pa.len() * cols];
    values
        .par_chunks_mut(ROW_TILE * cols)
        .enumerate()
        .for_each(|(tile_idx, out)| {
            let row0 = tile_idx * ROW_TILE;
            let rows = out.len() / cols;
            for col0 in (0..cols).step_by(COL_TILE) {
                let col_end = (col0 + COL_TILE).min(cols);
                for r in 0..rows {
                    let u = pa.row(row0 + r);
                    let inv_u = pa.inv_norms[row0 + r];
                    for c in col0..col_end {
                        let dot = dot_f64(u, pb.row(c));
                        out[r * cols + c] = clamp(dot * inv_u * pb.inv_norms[c]);
                    }
                }
            }
        });
    Ok(SimilarityMatrix {
        row_ids: (0..pa.len()).map(|i| i.to_string()).collect(),
        col_ids: (0..cols).map(|i| i.to_string()).collect(),
        values,
    })
}

/// Mean cosine over the n(n-1)/2 distinct unordered pairs; self-pairs are
/// excluded.
pub fn intra_mean(corpus: &[EmbeddingVector]) -> Result<f64, SimError> {
    if corpus.len() < 2 {
        return Err(SimError::CorpusTooSmall(corpus.len()));
    }
    let p = pack(corpus)?;
    let n = p.len();
    // Per-row partial sums over j > i, then one sequential reduction, so the
    // result does not depend on thread scheduling.
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = p.row(i);
            let inv_u = p.inv_norms[i];
            let mut acc = 0.0;
            for j in (i + 1)..n {
                acc += clamp(dot_f64(u, p.row(j)) * inv_u * p.inv_norms[j]);
            }
            acc
        })
        .collect();
    let total: f64 = row_sums.iter().sum();
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs)
}

/// Mean cosine over all |A| x |B| cross pairs.
pub fn inter_mean(a: &[EmbeddingVector], b: &[EmbeddingVector]) -> Result<f64, SimError> {
    let pa = pack(a)?;
    let pb = pack(b)?;
    if pa.dim != pb.dim {
        return Err(SimError::DimensionMismatch {
            left: pa.dim,
            right: pb.dim,
        });
    }
    if a[0].backend_id != b[0].backend_id {
        return Err(SimError::BackendMismatch {
            left: a[0].backend_id.clone(),
            right: b[0].backend_id.clone(),
        });
    }
    let row_sums: Vec<f64> = (0..pa.len())
        .into_par_iter()
        .map(|i| {
            let u = pa.row(i);
            let inv_u = pa.inv_norms[i];
            let mut acc = 0.0;
            for j in 0..pb.len() {
                acc += clamp(dot_f64(u, pb.row(j)) * inv_u * pb.inv_norms[j]);
            }
            acc
        })
        .collect();
    let total: f64 = row_sums.iter().sum();
    Ok(total / (pa.len() * pb.len()) as f64)
}

/// Interpretive band labels, highest similarity first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BandLabel {
    NearDuplicate,
    VeryHigh,
    High,
    Moderate,
    Low,
    Negligible,
}

impl BandLabel {
    pub fn qualitative(&self) -> &'static str {
        match self {
            BandLabel::NearDuplicate => "Near-duplicate",
            BandLabel::VeryHigh => "Very high similarity",
            BandLabel::High => "High similarity",
            BandLabel::Moderate => "Moderate similarity",
            BandLabel::Low => "Low similarity",
            BandLabel::Negligible => "Negligible similarity",
        }
    }
}

/// One interpretive band: inclusive lower bound plus the suggested
/// test-security action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBand {
    pub label: BandLabel,
    pub lower_bound: f64,
    pub suggested_action: String,
}

const BAND_ACTIONS: [(BandLabel, f64, &str); 6] = [
    (
        BandLabel::NearDuplicate,
        0.90,
        "Treat as potential verbatim leak or clone; remove or rewrite at least one item.",
    ),
    (
        BandLabel::VeryHigh,
        0.80,
        "Flag for expert review; check for overlapping clinical scenario, identical distractors, or blueprint redundancy.",
    ),
    (
        BandLabel::High,
        0.65,
        "Examine for shared key phrases or identical rationale; consider minor revisions if items will appear in the same form.",
    ),
    (
        BandLabel::Moderate,
        0.50,
        "Acceptable for most operational use, but avoid scheduling in the same test booklet or immediate retest window.",
    ),
    (
        BandLabel::Low,
        0.30,
        "Generally safe; minimal semantic overlap. Routine psychometric checks only.",
    ),
    (
        BandLabel::Negligible,
        f64::NEG_INFINITY,
        "No substantive overlap detected; items can coexist without security concern.",
    ),
];

/// The six interpretive bands, ordered by strictly decreasing inclusive
/// lower bound. Bands partition the whole real line: a score belongs to the
/// first band whose lower bound it reaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTable {
    bands: Vec<SimilarityBand>,
}

impl Default for BandTable {
    fn default() -> Self {
        Self {
            bands: BAND_ACTIONS
                .iter()
                .map(|(label, lower_bound, action)| SimilarityBand {
                    label: *label,
                    lower_bound: *lower_bound,
                    suggested_action: (*action).to_string(),
                })
                .collect(),
        }
    }
}

impl BandTable {
    /// Default labels and actions with overridden lower bounds for the five
    /// finite bands (highest first); the last band keeps -inf.
    pub fn with_bounds(bounds: [f64; 5]) -> Result<Self, SimError> {
        if !bounds.iter().all(|b| b.is_finite()) || !bounds.windows(2).all(|w| w[0] > w[1]) {
            return Err(SimError::NonFiniteScore);
        }
        let mut table = Self::default();
        for (band, bound) in table.bands.iter_mut().zip(bounds) {
            band.lower_bound = bound;
        }
        Ok(table)
    }

    pub fn bands(&self) -> &[SimilarityBand] {
        &self.bands
    }

    /// Classifies a finite score into its band.
    pub fn classify(&self, score: f64) -> Result<&SimilarityBand, SimError> {
        if !score.is_finite() {
            return Err(SimError::NonFiniteScore);
        }
        self.bands
            .iter()
            .find(|band| score >= band.lower_bound)
            .ok_or(SimError::NonFiniteScore)
    }

    pub fn action_for(&self, label: BandLabel) -> &str {
        self.bands
            .iter()
            .find(|b| b.label == label)
            .map(|b| b.suggested_action.as_str())
            .unwrap_or("")
    }
}

/// Classifies against the default band table.
pub fn band_classify(score: f64) -> Result<SimilarityBand, SimError> {
    BandTable::default().classify(score).cloned()
}

/// One (topic, provider) comparison group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupKey {
    pub topic: EpaTopic,
    pub provider_id: String,
}

/// Number of group means at or above the threshold (inclusive).
pub fn count_at_or_above(group_means: &[(GroupKey, f64)], threshold: f64) -> usize {
    group_means.iter().filter(|(_, m)| *m >= threshold).count()
}

/// A pair whose similarity reached the flag threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPair {
    pub row_id: String,
    pub col_id: String,
    pub score: f64,
    pub band: BandLabel,
}

fn sort_flags(flags: &mut Vec<FlaggedPair>, top_k: Option<usize>) {
    flags.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.row_id.cmp(&b.row_id))
            .then_with(|| a.col_id.cmp(&b.col_id))
    });
    if let Some(k) = top_k {
        flags.truncate(k);
    }
}

/// All pairs at or above `threshold`, sorted by descending score with
/// (row id, col id) tie-breaks. For within-corpus matrices self-pairs are
/// excluded and each unordered pair is reported once.
pub fn flag_pairs(
    matrix: &SimilarityMatrix,
    threshold: f64,
    top_k: Option<usize>,
    bands: &BandTable,
) -> Result<Vec<FlaggedPair>, SimError> {
    if !threshold.is_finite() {
        return Err(SimError::NonFiniteScore);
    }
    let within = matrix.is_within();
    let mut flags = Vec::new();
    for r in 0..matrix.rows() {
        let c0 = if within { r + 1 } else { 0 };
        for c in c0..matrix.cols() {
            let score = matrix.get(r, c);
            if score >= threshold {
                flags.push(FlaggedPair {
                    row_id: matrix.row_ids[r].clone(),
                    col_id: matrix.col_ids[c].clone(),
                    score,
                    band: bands.classify(score)?.label,
                });
            }
        }
    }
    sort_flags(&mut flags, top_k);
    Ok(flags)
}

/// Streaming within-corpus flag extraction: scans all distinct pairs in
/// tiles without materializing the similarity matrix. Memory stays
/// proportional to the number of flagged pairs.
pub fn scan_flags(
    ids: &[String],
    vectors: &[EmbeddingVector],
    threshold: f64,
    top_k: Option<usize>,
    bands: &BandTable,
) -> Result<Vec<FlaggedPair>, SimError> {
    if !threshold.is_finite() {
        return Err(SimError::NonFiniteScore);
    }
    if ids.len() != vectors.len() {
        return Err(SimError::BadLabels {
            expected: vectors.len(),
            got: ids.len(),
        });
    }
    if vectors.is_empty() {
        return Ok(Vec::new());
    }
    let p = pack(vectors)?;
    let n = p.len();
    let tiles: Vec<usize> = (0..n).step_by(ROW_TILE).collect();
    let mut per_tile: Vec<Vec<(usize, usize, f64)>> = tiles
        .par_iter()
        .map(|&row0| {
            let row_end = (row0 + ROW_TILE).min(n);
            let mut local = Vec::new();
            for col0 in (row0..n).step_by(COL_TILE) {
                let col_end = (col0 + COL_TILE).min(n);
                for i in row0..row_end {
                    let u = p.row(i);
                    let inv_u = p.inv_norms[i];
                    let first = col0.max(i + 1);
                    for j in first..col_end {
                        let score = clamp(dot_f64(u, p.row(j)) * inv_u * p.inv_norms[j]);
                        if score >= threshold {
                            local.push((i, j, score));
                        }
                    }
                }
            }
            local
        })
        .collect();
    let mut flags = Vec::new();
    for tile in per_tile.drain(..) {
        for (i, j, score) in tile {
            flags.push(FlaggedPair {
                row_id: ids[i].clone(),
                col_id: ids[j].clone(),
                score,
                band: bands.classify(score)?.label,
            });
        }
    }
    sort_flags(&mut flags, top_k);
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector {
            backend_id: "test".into(),
            values: values.to_vec(),
            normalized: false,
        }
    }

    fn brute_cosine(u: &[f32], v: &[f32]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
        let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        dot / (nu * nv)
    }

    #[test]
    fn cosine_identity_is_one() {
        let v = vector(&[0.3, -1.2, 4.5]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let u = vector(&[1.0, 0.0, 0.0, 0.0]);
        let v = vector(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(cosine(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_case_eight_ninths() {
        let u = vector(&[1.0, 2.0, 2.0]);
        let v = vector(&[2.0, 1.0, 2.0]);
        let got = cosine(&u, &v).unwrap();
        assert!((got - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let u = vector(&[0.0, 0.0]);
        let v = vector(&[1.0, 0.0]);
        assert!(matches!(cosine(&u, &v), Err(SimError::ZeroNorm(_))));
        assert!(matches!(cosine(&v, &u), Err(SimError::ZeroNorm(_))));
    }

    #[test]
    fn cosine_dimension_mismatch_is_error() {
        let u = vector(&[1.0, 0.0]);
        let v = vector(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine(&u, &v),
            Err(SimError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_backend_mismatch_is_error() {
        let u = vector(&[1.0, 0.0]);
        let mut v = vector(&[1.0, 0.0]);
        v.backend_id = "other".into();
        assert!(matches!(cosine(&u, &v), Err(SimError::BackendMismatch { .. })));
    }

    #[test]
    fn pairwise_single_pair_is_unit() {
        let v = vector(&[0.1, 0.2]);
        let m = pairwise_between(std::slice::from_ref(&v), std::slice::from_ref(&v)).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(m.is_within());
    }

    #[test]
    fn pairwise_matches_brute_force() {
        let a: Vec<EmbeddingVector> = (0..3)
            .map(|i| vector(&[(i as f32) + 0.5, 1.0 - i as f32, 2.0, -0.25 * i as f32]))
            .collect();
        let b: Vec<EmbeddingVector> = (0..5)
            .map(|j| vector(&[1.0, (j as f32) - 2.0, 0.5 * j as f32, 1.5]))
            .collect();
        let m = pairwise_between(&a, &b).unwrap();
        for (i, u) in a.iter().enumerate() {
            for (j, v) in b.iter().enumerate() {
                let want = brute_cosine(&u.values, &v.values);
                assert!((m.get(i, j) - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn intra_mean_identical_vectors_is_one() {
        let v = vector(&[0.4, 0.6, -0.2]);
        let got = intra_mean(&[v.clone(), v]).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn intra_mean_of_constructed_cosines() {
        // Three unit vectors with pairwise cosines 0.2, 0.4, 0.9, built by
        // Cholesky factoring the Gram matrix [[1,.2,.4],[.2,1,.9],[.4,.9,1]].
        let l22 = (1.0f64 - 0.04).sqrt();
        let l32 = (0.9 - 0.2 * 0.4) / l22;
        let l33 = (1.0f64 - 0.4 * 0.4 - l32 * l32).sqrt();
        let v1 = vector(&[1.0, 0.0, 0.0]);
        let v2 = vector(&[0.2, l22 as f32, 0.0]);
        let v3 = vector(&[0.4, l32 as f32, l33 as f32]);
        let c12 = cosine(&v1, &v2).unwrap();
        let c13 = cosine(&v1, &v3).unwrap();
        let c23 = cosine(&v2, &v3).unwrap();
        assert!((c12 - 0.2).abs() < 1e-6);
        assert!((c13 - 0.4).abs() < 1e-6);
        assert!((c23 - 0.9).abs() < 1e-6);
        let corpus = [v1, v2, v3];
        let got = intra_mean(&corpus).unwrap();
        let brute = (c12 + c13 + c23) / 3.0;
        assert!((got - brute).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-6);
    }

    #[test]
    fn intra_mean_too_small_is_error() {
        let v = vector(&[1.0]);
        assert!(matches!(intra_mean(&[v]), Err(SimError::CorpusTooSmall(1))));
    }

    #[test]
    fn inter_mean_singletons() {
        let v = vector(&[0.3, 0.4]);
        let got = inter_mean(std::slice::from_ref(&v), std::slice::from_ref(&v)).unwrap();
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inter_mean_matches_hand_cosines() {
        let a = [vector(&[1.0, 0.0]), vector(&[0.0, 1.0])];
        let b = [vector(&[1.0, 1.0]), vector(&[1.0, -1.0])];
        let mut want = 0.0;
        for u in &a {
            for v in &b {
                want += brute_cosine(&u.values, &v.values);
            }
        }
        want /= 4.0;
        let got = inter_mean(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn inter_mean_empty_is_error() {
        let v = vector(&[1.0]);
        assert!(matches!(
            inter_mean(&[], std::slice::from_ref(&v)),
            Err(SimError::EmptyCorpus)
        ));
    }

    #[test]
    fn inter_mean_equals_matrix_mean() {
        let a: Vec<EmbeddingVector> = (1..=4)
            .map(|i| vector(&[i as f32, (i * i) as f32 * 0.1, -0.3]))
            .collect();
        let b: Vec<EmbeddingVector> = (1..=3)
            .map(|j| vector(&[0.5, j as f32, 0.25 * j as f32]))
            .collect();
        let m = pairwise_between(&a, &b).unwrap();
        let got = inter_mean(&a, &b).unwrap();
        assert!((got - m.mean()).abs() < 1e-12);
    }

    #[test]
    fn band_examples() {
        assert_eq!(band_classify(0.92).unwrap().label, BandLabel::NearDuplicate);
        assert_eq!(band_classify(0.65).unwrap().label, BandLabel::High);
        assert_eq!(band_classify(-0.2).unwrap().label, BandLabel::Negligible);
    }

    #[test]
    fn band_boundaries_map_to_higher_band() {
        let cases = [
            (0.90, BandLabel::NearDuplicate),
            (0.80, BandLabel::VeryHigh),
            (0.65, BandLabel::High),
            (0.50, BandLabel::Moderate),
            (0.30, BandLabel::Low),
        ];
        for (score, label) in cases {
            assert_eq!(band_classify(score).unwrap().label, label, "score {score}");
        }
    }

    #[test]
    fn band_nan_is_error() {
        assert!(band_classify(f64::NAN).is_err());
    }

    #[test]
    fn band_bounds_strictly_decrease() {
        let table = BandTable::default();
        let bounds: Vec<f64> = table.bands().iter().map(|b| b.lower_bound).collect();
        assert!(bounds.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn count_at_or_above_table_cells() {
        let key = |p: &str| GroupKey {
            topic: EpaTopic {
                descriptor: "t".into(),
                blueprint: None,
            },
            provider_id: p.into(),
        };
        let table3 = [0.70, 0.69, 0.51, 0.43, 0.63, 0.77, 0.48, 0.43, 0.60, 0.64, 0.44, 0.43];
        let means: Vec<(GroupKey, f64)> = table3.iter().map(|&m| (key("p"), m)).collect();
        assert_eq!(count_at_or_above(&means, 0.65), 3);
        assert_eq!(count_at_or_above(&[], 0.65), 0);
    }

    #[test]
    fn flag_pairs_excludes_self_pairs() {
        let v = vector(&[1.0, 0.0]);
        let corpus = [v.clone(), vector(&[0.0, 1.0]), vector(&[-1.0, 0.0])];
        let m = pairwise_between(&corpus, &corpus).unwrap();
        let flags = flag_pairs(&m, 0.95, None, &BandTable::default()).unwrap();
        assert!(flags.is_empty());
    }

    #[test]
    fn flag_pairs_finds_planted_pair() {
        let corpus = [
            vector(&[1.0, 0.0, 0.0]),
            vector(&[0.995, 0.0999, 0.0]),
            vector(&[0.0, 0.0, 1.0]),
        ];
        let m = pairwise_between(&corpus, &corpus)
            .unwrap()
            .relabel(
                vec!["i0".into(), "i1".into(), "i2".into()],
                vec!["i0".into(), "i1".into(), "i2".into()],
            )
            .unwrap();
        let flags = flag_pairs(&m, 0.97, None, &BandTable::default()).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].row_id, "i0");
        assert_eq!(flags[0].col_id, "i1");
        assert_eq!(flags[0].band, BandLabel::NearDuplicate);
    }

    #[test]
    fn scan_flags_matches_flag_pairs() {
        let corpus: Vec<EmbeddingVector> = (0..40)
            .map(|i| {
                let t = i as f32 * 0.157;
                vector(&[t.cos(), t.sin(), 0.1 * (i % 5) as f32])
            })
            .collect();
        let ids: Vec<String> = (0..40).map(|i| format!("item-{i:02}")).collect();
        let m = pairwise_between(&corpus, &corpus)
            .unwrap()
            .relabel(ids.clone(), ids.clone())
            .unwrap();
        let bands = BandTable::default();
        let want = flag_pairs(&m, 0.9, None, &bands).unwrap();
        assert!(!want.is_empty());
        let got = scan_flags(&ids, &corpus, 0.9, None, &bands).unwrap();
        assert_eq!(got, want);
        let top3 = scan_flags(&ids, &corpus, 0.9, Some(3), &bands).unwrap();
        assert_eq!(top3.as_slice(), &want[..3.min(want.len())]);
    }

    #[test]
    fn matrix_csv_has_headers_and_full_precision() {
        let a = [vector(&[1.0, 0.0]), vector(&[1.0, 1.0])];
        let m = pairwise_between(&a, &a)
            .unwrap()
            .relabel(vec!["r1".into(), "r2".into()], vec!["c1".into(), "c2".into()])
            .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "id,c1,c2");
        let row = lines.next().unwrap();
        assert!(row.starts_with("r1,1,"));
        let reparsed: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(reparsed, m.get(0, 1));
    }
}
