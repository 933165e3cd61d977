//! Kernel density estimators over embedding matrices.
//!
//! Three routes to the same quantity:
//!
//! * [`exact_kde`] -- the plain kernel mean over the whole corpus;
//! * [`random_kde`] -- the kernel mean over a uniform without-replacement
//!   sample, an unbiased estimator whose error shrinks as the sample grows;
//! * [`decomposed_kde`] -- the fully decomposed approximation: an exact
//!   local component over each query's k nearest neighbors plus a random
//!   component drawn hierarchically from one shared pre-sample, recombined
//!   by subset-size weights.
//!
//! The KDE is the unnormalized kernel mean, so values live in (0, 1] and a
//! bandwidth is comparable across corpus sizes. All accumulation is f64 in a
//! fixed traversal order; all randomness derives from an explicit seed, with
//! per-query sub-seeds `seed ^ query_id` so results do not depend on query
//! batching or scheduling.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, euclidean, squared_norm, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::knn::{self, NeighborList};

/// Kernel family for euclidean-distance kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    Exponential,
}

impl KernelFamily {
    /// The bandwidth selections used throughout the bundled analyses:
    /// {0.1, 0.2, 0.5, 1.0} for the gaussian kernel and
    /// {0.01, 0.05, 0.1, 1.0} for the exponential kernel.
    pub fn standard_bandwidths(self) -> &'static [f64] {
        match self {
            KernelFamily::Gaussian => &[0.1, 0.2, 0.5, 1.0],
            KernelFamily::Exponential => &[0.01, 0.05, 0.1, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::Exponential => "exponential",
        }
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "exponential" => Ok(KernelFamily::Exponential),
            other => Err(Error::InvalidParameter(format!(
                "unknown kernel family {other:?} (expected gaussian or exponential)"
            ))),
        }
    }
}

/// A kernel family plus bandwidth `h > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be a positive finite float, got {bandwidth}"
            )));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn exponential(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, bandwidth)
    }

    /// Kernel value at a nonnegative euclidean distance:
    /// gaussian `exp(-d^2 / (2 h^2))`, exponential `exp(-d / h)`.
    /// Strictly decreasing in distance, exactly 1 at distance 0.
    pub fn eval(&self, dist: f64) -> Result<f64> {
        if !(dist >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel distance must be nonnegative, got {dist}"
            )));
        }
        Ok(self.eval_at(dist))
    }

    #[inline]
    pub(crate) fn eval_at(&self, dist: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                (-(dist * dist) / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Exponential => (-dist / self.bandwidth).exp(),
        }
    }
}

/// Kernel value at a distance; see [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, dist: f64) -> Result<f64> {
    spec.eval(dist)
}

/// One query's density estimates and the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeResult {
    pub query_id: u64,
    pub z_local: f64,
    pub z_random: f64,
    pub z_combined: f64,
    pub k: usize,
    pub m1: usize,
    pub m2: usize,
    /// Corpus size the weights were computed against.
    pub n: usize,
    pub kernel: KernelSpec,
    pub seed: u64,
}

impl KdeResult {
    /// `m2 = 0` runs carry no random component; `z_random` is pinned to 0
    /// and only the local estimate is meaningful on its own.
    pub fn is_local_only(&self) -> bool {
        self.m2 == 0
    }
}

fn check_dim(corpus: &EmbeddingMatrix, query: &[f32]) -> Result<()> {
    if query.len() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: query.len(),
        });
    }
    Ok(())
}

/// Mean kernel value between `query` and every corpus row.
pub fn exact_kde(corpus: &EmbeddingMatrix, query: &[f32], spec: &KernelSpec) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_dim(corpus, query)?;
    let q_sq = squared_norm(query);
    let mut sum = 0.0f64;
    for (row, &row_sq) in corpus.rows().zip(corpus.sq_norms()) {
        let dist = euclidean(q_sq, row_sq, dot(query, row));
        sum += spec.eval_at(dist);
    }
    Ok(sum / corpus.count() as f64)
}

/// [`exact_kde`] for every row of `queries`, parallel over queries.
pub fn exact_kde_batch(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    Ok((0..queries.count())
        .into_par_iter()
        .map(|i| exact_kde(corpus, queries.row(i), spec).expect("preconditions checked"))
        .collect())
}

/// Mean kernel value over the given corpus rows (callers guarantee the ids
/// are valid and the traversal order is the order given).
fn kde_over_rows(
    corpus: &EmbeddingMatrix,
    query: &[f32],
    q_sq: f64,
    rows: &[usize],
    spec: &KernelSpec,
) -> f64 {
    let mut sum = 0.0f64;
    for &i in rows {
        let dist = euclidean(q_sq, corpus.sq_norm(i), dot(query, corpus.row(i)));
        sum += spec.eval_at(dist);
    }
    sum / rows.len() as f64
}

/// Density estimate over a uniform without-replacement sample of `m` corpus
/// rows. Returns the estimate and the sampled row ids (ascending). Unbiased
/// for [`exact_kde`]; the full sample `m = n` reproduces it exactly.
pub fn random_kde(
    corpus: &EmbeddingMatrix,
    query: &[f32],
    spec: &KernelSpec,
    m: usize,
    seed: u64,
) -> Result<(f64, Vec<usize>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_dim(corpus, query)?;
    if m == 0 || m > corpus.count() {
        return Err(Error::SampleOutOfRange {
            m,
            available: corpus.count(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = rand::seq::index::sample(&mut rng, corpus.count(), m).into_vec();
    sample.sort_unstable();
    let estimate = kde_over_rows(corpus, query, squared_norm(query), &sample, spec);
    Ok((estimate, sample))
}

/// Size-weighted recombination of density estimates over two disjoint
/// subsets: `(|A| z_A + |B| z_B) / (|A| + |B|)`. Exact when both inputs are
/// exact KDEs over a partition.
pub fn combine_split(z_a: f64, size_a: usize, z_b: f64, size_b: usize) -> Result<f64> {
    if size_a == 0 && size_b == 0 {
        return Err(Error::InvalidParameter(
            "combine_split requires at least one nonempty side".into(),
        ));
    }
    let a = size_a as f64;
    let b = size_b as f64;
    Ok((a * z_a + b * z_b) / (a + b))
}

/// Parameters for the decomposed estimator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecompParams {
    /// Exact nearest neighbors per query (local component).
    pub k: usize,
    /// Size of the shared random pre-sample.
    pub m1: usize,
    /// Per-query random complement size, drawn from the pre-sample minus the
    /// query's neighbors. 0 disables the random component.
    pub m2: usize,
    pub seed: u64,
}

/// Decomposed approximate KDE with hierarchical sampling.
///
/// One without-replacement pre-sample X1 of size `m1` is shared by all
/// queries. Per query: the exact k nearest neighbors X_nn; the pre-sample
/// minus those neighbors; a per-query without-replacement sample X2 of size
/// `m2` from that remainder; then
///
/// ```text
/// z_combined = (k/n) * z_local + ((n-k)/n) * z_random
/// ```
///
/// with `z_local` the exact KDE over X_nn and `z_random` the exact KDE over
/// X2. Per-query randomness is seeded with `seed ^ query_id`, so results are
/// independent of batching and iteration order.
pub fn decomposed_kde(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    spec: &KernelSpec,
    params: &DecompParams,
) -> Result<Vec<KdeResult>> {
    let n = corpus.count();
    if params.m1 > n {
        return Err(Error::SampleOutOfRange {
            m: params.m1,
            available: n,
        });
    }
    if params.m2 > params.m1 {
        return Err(Error::InvalidParameter(format!(
            "m2 = {} exceeds m1 = {}",
            params.m2, params.m1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut presample = rand::seq::index::sample(&mut rng, n, params.m1).into_vec();
    presample.sort_unstable();
    decomposed_kde_with_presample(corpus, queries, spec, params.k, &presample, params.m2, params.seed)
}

/// [`decomposed_kde`] with an explicitly supplied pre-sample (`m1` is its
/// length). Useful when the pre-sample is drawn elsewhere, and the seam that
/// lets tests pin X1 exactly.
pub fn decomposed_kde_with_presample(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    spec: &KernelSpec,
    k: usize,
    presample: &[usize],
    m2: usize,
    seed: u64,
) -> Result<Vec<KdeResult>> {
    let n = corpus.count();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    // k = n is disallowed: the local component must leave a remainder for
    // the weights to make sense.
    if k == 0 || k >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    let m1 = presample.len();
    if m1 > n {
        return Err(Error::SampleOutOfRange { m: m1, available: n });
    }
    if m2 > m1 {
        return Err(Error::InvalidParameter(format!(
            "m2 = {m2} exceeds pre-sample size {m1}"
        )));
    }
    if k + m2 > n {
        return Err(Error::InvalidParameter(format!(
            "k + m2 = {} exceeds corpus size {n}",
            k + m2
        )));
    }
    if let Some(&bad) = presample.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!(
            "pre-sample row {bad} out of bounds for corpus of {n}"
        )));
    }

    (0..queries.count())
        .into_par_iter()
        .map(|qi| {
            let query = queries.row(qi);
            let query_id = queries.id_of_row(qi);
            let neighbors = knn::query_knn(corpus, query, k)?;
            let neighbor_set: HashSet<usize> = neighbors.neighbor_ids.iter().copied().collect();

            // local component straight from the neighbor distances
            let z_local = neighbors
                .distances
                .iter()
                .map(|&d| spec.eval_at(d))
                .sum::<f64>()
                / k as f64;

            let z_random = if m2 == 0 {
                0.0
            } else {
                let remainder: Vec<usize> = presample
                    .iter()
                    .copied()
                    .filter(|i| !neighbor_set.contains(i))
                    .collect();
                if remainder.len() < m2 {
                    return Err(Error::ComplementExhausted {
                        query_id,
                        available: remainder.len(),
                        needed: m2,
                    });
                }
                let mut q_rng = ChaCha8Rng::seed_from_u64(seed ^ query_id);
                let mut picks =
                    rand::seq::index::sample(&mut q_rng, remainder.len(), m2).into_vec();
                picks.sort_unstable();
                let rows: Vec<usize> = picks.into_iter().map(|p| remainder[p]).collect();
                kde_over_rows(corpus, query, squared_norm(query), &rows, spec)
            };

            let nf = n as f64;
            let z_combined = (k as f64 / nf) * z_local + ((nf - k as f64) / nf) * z_random;
            Ok(KdeResult {
                query_id,
                z_local,
                z_random,
                z_combined,
                k,
                m1,
                m2,
                n,
                kernel: *spec,
                seed,
            })
        })
        .collect()
}

/// Mean distance over a neighbor list; a cheap density proxy.
pub fn avg_knn_distance(neighbors: &NeighborList) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput("neighbor list"));
    }
    Ok(neighbors.distances.iter().sum::<f64>() / neighbors.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct KdeRow {
    query_id: u64,
    z_local: f64,
    z_random: f64,
    z_combined: f64,
    k: usize,
    m1: usize,
    m2: usize,
    n: usize,
    kernel: String,
    bandwidth: f64,
    seed: u64,
}

impl From<&KdeResult> for KdeRow {
    fn from(r: &KdeResult) -> Self {
        KdeRow {
            query_id: r.query_id,
            z_local: r.z_local,
            z_random: r.z_random,
            z_combined: r.z_combined,
            k: r.k,
            m1: r.m1,
            m2: r.m2,
            n: r.n,
            kernel: r.kernel.family.name().to_string(),
            bandwidth: r.kernel.bandwidth,
            seed: r.seed,
        }
    }
}

impl TryFrom<KdeRow> for KdeResult {
    type Error = Error;

    fn try_from(row: KdeRow) -> Result<Self> {
        Ok(KdeResult {
            query_id: row.query_id,
            z_local: row.z_local,
            z_random: row.z_random,
            z_combined: row.z_combined,
            k: row.k,
            m1: row.m1,
            m2: row.m2,
            n: row.n,
            kernel: KernelSpec::new(row.kernel.parse()?, row.bandwidth)?,
            seed: row.seed,
        })
    }
}

/// Write results as CSV with columns
/// `query_id,z_local,z_random,z_combined,k,m1,m2,n,kernel,bandwidth,seed`.
pub fn write_kde_csv<W: Write>(w: W, results: &[KdeResult]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for r in results {
        writer.serialize(KdeRow::from(r))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_kde_csv<R: std::io::Read>(r: R) -> Result<Vec<KdeResult>> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in reader.deserialize::<KdeRow>() {
        out.push(KdeResult::try_from(row?)?);
    }
    Ok(out)
}

/// Write results as JSON-lines with the same fields as the CSV.
pub fn write_kde_jsonl<W: Write>(mut w: W, results: &[KdeResult]) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, &KdeRow::from(r))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_kde_jsonl<R: BufRead>(r: R) -> Result<Vec<KdeResult>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: KdeRow =
            serde_json::from_str(&line).map_err(|e| Error::Schema(format!("kde record: {e}")))?;
        out.push(KdeResult::try_from(row)?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Independent naive oracle: double loop, own distance math, sequential
    /// f64 accumulation.
    pub fn naive_exact_kde(corpus: &EmbeddingMatrix, query: &[f32], spec: &KernelSpec) -> f64 {
        let q_sq: f64 = query.iter().map(|&v| v as f64 * v as f64).sum();
        let mut sum = 0.0f64;
        for i in 0..corpus.count() {
            let row = corpus.row(i);
            let mut dot = 0.0f64;
            let mut r_sq = 0.0f64;
            for (a, b) in query.iter().zip(row) {
                dot += *a as f64 * *b as f64;
                r_sq += *b as f64 * *b as f64;
            }
            let dist = (q_sq + r_sq - 2.0 * dot).max(0.0).sqrt();
            let v = match spec.family {
                KernelFamily::Gaussian => {
                    (-(dist * dist) / (2.0 * spec.bandwidth * spec.bandwidth)).exp()
                }
                KernelFamily::Exponential => (-dist / spec.bandwidth).exp(),
            };
            sum += v;
        }
        sum / corpus.count() as f64
    }
}
