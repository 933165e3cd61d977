//! Embedding vectors: generation, normalization, persistence.
//!
//! Corpus segments and query texts must pass through the *same* embedder so
//! that a query identical to a corpus segment lands on the identical vector
//! and kernel density sees a distance-0 match. The hashed bag-of-tokens
//! embedder ([`toy_embed`]) keeps every test and example hermetic; production
//! vectors arrive through the HTTP embedder or pre-built matrix files.

mod io;
mod service;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_matrix, write_matrix, MATRIX_MAGIC};

/// Tolerance on |row norm - 1| enforced when a matrix is constructed in-process.
pub const NORM_TOLERANCE: f64 = 1e-4;
/// Looser tolerance used when loading external files; violations are logged,
/// not fatal.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

/// Row-major store of unit-norm `dim`-dimensional f32 vectors.
///
/// Immutable after construction and safe to share across threads. Squared row
/// norms are cached at construction so distance kernels can use the exact
/// cancellation form (see [`euclidean`]).
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    ids: Option<Vec<u64>>,
    sq_norms: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Build from a flat row-major buffer. Every row must be unit-norm within
    /// [`NORM_TOLERANCE`].
    pub fn from_flat(dim: usize, data: Vec<f32>, ids: Option<Vec<u64>>) -> Result<Self> {
        let m = Self::from_flat_unchecked(dim, data, ids)?;
        for (row, &sq) in m.sq_norms.iter().enumerate() {
            let norm = sq.sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NormViolation {
                    row,
                    norm,
                    tolerance: NORM_TOLERANCE,
                });
            }
        }
        Ok(m)
    }

    /// Build without the norm check (file loading validates separately).
    pub(crate) fn from_flat_unchecked(
        dim: usize,
        data: Vec<f32>,
        ids: Option<Vec<u64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("matrix dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "flat buffer length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        let count = data.len() / dim;
        if let Some(ids) = &ids {
            if ids.len() != count {
                return Err(Error::InvalidParameter(format!(
                    "id table has {} entries for {} rows",
                    ids.len(),
                    count
                )));
            }
        }
        let sq_norms = data.chunks_exact(dim).map(squared_norm).collect();
        Ok(Self {
            dim,
            data,
            ids,
            sq_norms,
        })
    }

    pub fn from_rows(dim: usize, rows: Vec<Vec<f32>>, ids: Option<Vec<u64>>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            let _ = i;
            data.extend_from_slice(row);
        }
        Self::from_flat(dim, data, ids)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sq_norm(&self, i: usize) -> f64 {
        self.sq_norms[i]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub(crate) fn flat(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    /// External id of a row: the id table entry when present, else the row
    /// index itself (segment ids are assigned densely for exactly this reason).
    pub fn id_of_row(&self, row: usize) -> u64 {
        match &self.ids {
            Some(ids) => ids[row],
            None => row as u64,
        }
    }

    /// New matrix with `extra` rows appended; ids stay dense (appended rows
    /// continue the row-index numbering).
    pub fn extended(&self, extra: &[Vec<f32>]) -> Result<Self> {
        let mut data = self.data.clone();
        for row in extra {
            if row.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        let ids = match &self.ids {
            None => None,
            Some(ids) => {
                let mut ids = ids.clone();
                let start = self.count() as u64;
                ids.extend((0..extra.len() as u64).map(|i| start + i));
                Some(ids)
            }
        };
        Self::from_flat(self.dim, data, ids)
    }
}

/// Dot product with four independent f64 accumulator lanes combined in a fixed
/// order, so results do not depend on thread count or call site.
pub fn dot(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut lanes = [0.0f64; 4];
    let mut cx = x.chunks_exact(4);
    let mut cy = y.chunks_exact(4);
    for (a, b) in (&mut cx).zip(&mut cy) {
        lanes[0] += a[0] as f64 * b[0] as f64;
        lanes[1] += a[1] as f64 * b[1] as f64;
        lanes[2] += a[2] as f64 * b[2] as f64;
        lanes[3] += a[3] as f64 * b[3] as f64;
    }
    let mut tail = 0.0f64;
    for (a, b) in cx.remainder().iter().zip(cy.remainder()) {
        tail += *a as f64 * *b as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

pub fn squared_norm(x: &[f32]) -> f64 {
    dot(x, x)
}

/// Euclidean distance between two stored vectors given their cached squared
/// norms and dot product: `sqrt(max(0, |x|^2 + |y|^2 - 2 x.y))`.
///
/// For unit vectors this is the usual `sqrt(2 - 2 cos)` but without assuming
/// the norms are exactly 1, so a bit-identical pair cancels to exactly 0
/// instead of picking up the f32 normalization residue (~1e-4 after the
/// square root), which would break distance-0 retrieval of planted copies.
pub fn euclidean(x_sq: f64, y_sq: f64, dot_xy: f64) -> f64 {
    (x_sq + y_sq - 2.0 * dot_xy).max(0.0).sqrt()
}

/// Euclidean distance between two raw vectors (norms computed on the fly).
pub fn euclidean_between(x: &[f32], y: &[f32]) -> f64 {
    euclidean(squared_norm(x), squared_norm(y), dot(x, y))
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
///
/// Bit-identical inputs return exactly 1.0 regardless of the f32
/// normalization residue.
pub fn cosine_sim(x: &[f32], y: &[f32]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x == y {
        return Ok(1.0);
    }
    Ok(dot(x, y).clamp(-1.0, 1.0))
}

fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Deterministic hashed bag-of-tokens embedding.
///
/// Each whitespace token maps to a signed coordinate bucket; the accumulated
/// histogram is L2-normalized. Texts with no tokens fall back to the basis
/// vector e_0 so every output is unit-norm.
pub fn toy_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 2, "toy_embed requires dim >= 2");
    let mut acc = vec![0.0f64; dim];
    for token in text.split_whitespace() {
        let h = fnv1a64(token.as_bytes(), seed);
        let bucket = ((h >> 1) % dim as u64) as usize;
        acc[bucket] += if h & 1 == 0 { 1.0 } else { -1.0 };
    }
    normalize_or_e0(&acc)
}

/// L2-normalize an f64 accumulator down to f32; an all-zero vector becomes
/// e_0 = (1, 0, ..., 0).
pub(crate) fn normalize_or_e0(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e0 = vec![0.0f32; v.len()];
        e0[0] = 1.0;
        return e0;
    }
    v.iter().map(|a| (a / norm) as f32).collect()
}

/// Which embedder produces vectors for a batch of texts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    ToyHash,
    ExternalService,
}

/// Embedder configuration. `toy-hash` must not carry an endpoint;
/// `external-service` requires one.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Seed for the toy-hash embedder.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_batch_size() -> usize {
    256
}
fn default_max_retries() -> usize {
    3
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    30
}

impl EmbedderSpec {
    pub fn toy_hash(dim: usize, seed: u64) -> Self {
        Self {
            kind: EmbedderKind::ToyHash,
            dim,
            endpoint: None,
            batch_size: default_batch_size(),
            seed,
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn external(dim: usize, endpoint: impl Into<String>) -> Self {
        Self {
            kind: EmbedderKind::ExternalService,
            dim,
            endpoint: Some(endpoint.into()),
            batch_size: default_batch_size(),
            seed: 0,
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidParameter("embedder dim must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        match (self.kind, &self.endpoint) {
            (EmbedderKind::ToyHash, Some(_)) => Err(Error::InvalidParameter(
                "toy-hash embedder takes no endpoint".into(),
            )),
            (EmbedderKind::ExternalService, None) => Err(Error::InvalidParameter(
                "external-service embedder requires an endpoint".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Embed a batch of texts. Row i corresponds to `texts[i]`; every row is
/// re-normalized before storage so downstream distance math sees unit vectors
/// no matter what the service returned.
pub fn embed_batch(texts: &[String], spec: &EmbedderSpec) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    let rows: Vec<Vec<f32>> = match spec.kind {
        EmbedderKind::ToyHash => texts
            .par_iter()
            .map(|t| toy_embed(t, spec.dim, spec.seed))
            .collect(),
        EmbedderKind::ExternalService => {
            let raw = service::embed_via_service(texts, spec)?;
            raw.into_iter()
                .map(|v| normalize_or_e0(&v.iter().map(|&x| x as f64).collect::<Vec<_>>()))
                .collect()
        }
    };
    EmbeddingMatrix::from_rows(spec.dim, rows, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(dim: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn toy_embed_is_deterministic() {
        let a = toy_embed("a a a", 8, 7);
        let b = toy_embed("a a a", 8, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn toy_embed_empty_text_falls_back_to_e0() {
        let v = toy_embed("", 8, 7);
        assert_eq!(v, basis(8, 0));
        // whitespace-only text also has no tokens
        assert_eq!(toy_embed("  \t\n ", 8, 7), basis(8, 0));
    }

    #[test]
    fn toy_embed_output_is_unit_norm() {
        let v = toy_embed("alpha beta", 16, 3);
        let norm = squared_norm(&v).sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
    }

    #[test]
    fn toy_embed_differs_across_seeds() {
        assert_ne!(toy_embed("alpha beta", 16, 3), toy_embed("alpha beta", 16, 4));
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let x = toy_embed("some text here", 8, 1);
        assert_eq!(cosine_sim(&x, &x).unwrap(), 1.0);
        let e0 = basis(4, 0);
        let e1 = basis(4, 1);
        assert_eq!(cosine_sim(&e0, &e1).unwrap(), 0.0);
        let neg: Vec<f32> = e0.iter().map(|v| -v).collect();
        assert_eq!(cosine_sim(&e0, &neg).unwrap(), -1.0);
    }

    #[test]
    fn cosine_rejects_dim_mismatch() {
        let e0 = basis(4, 0);
        let e1 = basis(5, 1);
        assert!(matches!(
            cosine_sim(&e0, &e1),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn euclidean_cosine_identity_holds_on_unit_vectors() {
        // |x - y|^2 = 2 - 2 cos(x, y) within 1e-5 for normalized vectors
        for seed in 0..50u64 {
            let x = toy_embed(&format!("alpha beta {seed}"), 32, 9);
            let y = toy_embed(&format!("gamma delta {seed}"), 32, 9);
            let direct: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            let via_cos = 2.0 - 2.0 * cosine_sim(&x, &y).unwrap();
            assert!(
                (direct - via_cos).abs() < 1e-5,
                "identity violated: {direct} vs {via_cos}"
            );
        }
    }

    #[test]
    fn identical_rows_are_at_distance_zero() {
        let x = toy_embed("repeated segment text", 24, 5);
        let m = EmbeddingMatrix::from_rows(24, vec![x.clone(), x.clone()], None).unwrap();
        let d = euclidean(m.sq_norm(0), m.sq_norm(1), dot(m.row(0), m.row(1)));
        assert_eq!(d, 0.0);
    }

    #[test]
    fn from_rows_rejects_non_unit_rows() {
        let err = EmbeddingMatrix::from_rows(3, vec![vec![1.0, 1.0, 0.0]], None);
        assert!(matches!(err, Err(Error::NormViolation { .. })));
    }

    #[test]
    fn from_flat_rejects_ragged_buffer() {
        let err = EmbeddingMatrix::from_flat(4, vec![0.0; 10], None);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn embed_batch_maps_identical_texts_to_identical_rows() {
        let spec = EmbedderSpec::toy_hash(16, 11);
        let texts = vec!["same text".to_string(), "same text".to_string()];
        let m = embed_batch(&texts, &spec).unwrap();
        assert_eq!(m.count(), 2);
        assert_eq!(m.dim(), 16);
        assert_eq!(m.row(0), m.row(1));
    }

    #[test]
    fn embedder_spec_invariants() {
        let mut toy = EmbedderSpec::toy_hash(8, 0);
        toy.endpoint = Some("http://localhost:1".into());
        assert!(toy.validate().is_err());

        let mut ext = EmbedderSpec::external(8, "http://localhost:1");
        ext.endpoint = None;
        assert!(ext.validate().is_err());
    }

    #[test]
    fn extended_appends_rows_and_keeps_dim() {
        let spec = EmbedderSpec::toy_hash(8, 2);
        let m = embed_batch(&["a".into(), "b".into()], &spec).unwrap();
        let extra = toy_embed("c", 8, 2);
        let m2 = m.extended(&[extra.clone()]).unwrap();
        assert_eq!(m2.count(), 3);
        assert_eq!(m2.row(2), &extra[..]);
        assert_eq!(m2.row(0), m.row(0));
    }
}
