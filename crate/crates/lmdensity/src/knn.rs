//! Exact k-nearest-neighbor search over an [`EmbeddingMatrix`] under
//! euclidean distance. Search is a blocked linear scan: no index structure,
//! no approximation, bit-reproducible across thread counts because each
//! query scans the corpus in a fixed order and parallelism is only across
//! queries.

use std::collections::BinaryHeap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{dot, euclidean, squared_norm, EmbeddingMatrix};
use crate::error::{Error, Result};

/// Exact top-k neighbors of one query: distances ascending, ties broken by
/// ascending neighbor id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query_id: u64,
    pub neighbor_ids: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // max-heap keeps the worst candidate on top: larger distance is
        // worse, and at equal distance the larger id is worse
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn check_query(corpus: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<()> {
    if query.len() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: query.len(),
        });
    }
    if k == 0 || k > corpus.count() {
        return Err(Error::KOutOfRange {
            k,
            n: corpus.count(),
        });
    }
    Ok(())
}

fn scan(corpus: &EmbeddingMatrix, query: &[f32], query_id: u64, k: usize) -> NeighborList {
    let q_sq = squared_norm(query);
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (id, (row, &row_sq)) in corpus.rows().zip(corpus.sq_norms()).enumerate() {
        let dist = euclidean(q_sq, row_sq, dot(query, row));
        if heap.len() < k {
            heap.push(Candidate { dist, id });
        } else if (Candidate { dist, id }) < *heap.peek().expect("nonempty heap") {
            heap.pop();
            heap.push(Candidate { dist, id });
        }
    }
    let sorted = heap.into_sorted_vec();
    NeighborList {
        query_id,
        neighbor_ids: sorted.iter().map(|c| c.id).collect(),
        distances: sorted.iter().map(|c| c.dist).collect(),
    }
}

/// Exact k nearest neighbors of a single query vector.
///
/// `query_id` on the result is 0; use [`batch_query`] to carry real ids.
pub fn query_knn(corpus: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<NeighborList> {
    check_query(corpus, query, k)?;
    Ok(scan(corpus, query, 0, k))
}

/// Exact k nearest neighbors for every row of `queries`, in query order.
/// Queries are searched in parallel; each individual scan is sequential so
/// the output does not depend on the thread count.
pub fn batch_query(
    corpus: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<NeighborList>> {
    if queries.dim() != corpus.dim() {
        return Err(Error::DimMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    if k == 0 || k > corpus.count() {
        return Err(Error::KOutOfRange {
            k,
            n: corpus.count(),
        });
    }
    Ok((0..queries.count())
        .into_par_iter()
        .map(|i| scan(corpus, queries.row(i), queries.id_of_row(i), k))
        .collect())
}

/// Fraction of `relevant` ids found in the top `k` of `retrieved`.
pub fn recall_at_k(
    retrieved: &NeighborList,
    relevant: &std::collections::HashSet<usize>,
    k: usize,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyInput("relevant id set"));
    }
    if k > retrieved.len() {
        return Err(Error::InvalidParameter(format!(
            "recall@{k} requested but only {} neighbors retrieved",
            retrieved.len()
        )));
    }
    let hits = retrieved.neighbor_ids[..k]
        .iter()
        .filter(|id| relevant.contains(id))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct NeighborRecord {
    query_id: u64,
    neighbors: Vec<(u64, f64)>,
}

/// Serialize one neighbor list as a JSON line:
/// `{"query_id": ..., "neighbors": [[id, dist], ...]}`.
///
/// `ids` maps internal row indices to external ids when the corpus carries an
/// id table.
pub fn write_neighbors_jsonl<W: Write>(
    w: &mut W,
    list: &NeighborList,
    ids: Option<&[u64]>,
) -> Result<()> {
    let record = NeighborRecord {
        query_id: list.query_id,
        neighbors: list
            .neighbor_ids
            .iter()
            .zip(&list.distances)
            .map(|(&id, &d)| {
                let external = match ids {
                    Some(table) => table[id],
                    None => id as u64,
                };
                (external, d)
            })
            .collect(),
    };
    serde_json::to_writer(&mut *w, &record)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parse JSON-lines neighbor lists (ids land in `neighbor_ids` as written).
pub fn read_neighbors_jsonl<R: BufRead>(reader: R) -> impl Iterator<Item = Result<NeighborList>> {
    reader.lines().filter_map(|line| match line {
        Err(e) => Some(Err(Error::Io(e))),
        Ok(line) if line.trim().is_empty() => None,
        Ok(line) => Some(
            serde_json::from_str::<NeighborRecord>(&line)
                .map(|r| NeighborList {
                    query_id: r.query_id,
                    neighbor_ids: r.neighbors.iter().map(|&(id, _)| id as usize).collect(),
                    distances: r.neighbors.iter().map(|&(_, d)| d).collect(),
                })
                .map_err(|e| Error::Schema(format!("neighbor record: {e}"))),
        ),
    })
}


#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::test_support::{naive_knn, random_unit_matrix};
    use super::*;
    use crate::embed::EmbeddingMatrix;

    fn basis_matrix(dim: usize, n: usize) -> EmbeddingMatrix {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let mut v = vec![0.0f32; dim];
                v[i] = 1.0;
                v
            })
            .collect();
        EmbeddingMatrix::from_rows(dim, rows, None).unwrap()
    }

    #[test]
    fn identical_point_is_rank_one_at_distance_zero() {
        let corpus = basis_matrix(3, 3);
        let q = [1.0f32, 0.0, 0.0];
        let nn = query_knn(&corpus, &q, 1).unwrap();
        assert_eq!(nn.neighbor_ids, vec![0]);
        assert_eq!(nn.distances, vec![0.0]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let corpus = basis_matrix(4, 2);
        let inv = (0.5f32).sqrt();
        let q = [inv, inv, 0.0, 0.0];
        let nn = query_knn(&corpus, &q, 2).unwrap();
        assert_eq!(nn.neighbor_ids, vec![0, 1]);
        assert_eq!(nn.distances[0], nn.distances[1]);
    }

    #[test]
    fn duplicate_rows_tie_break_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_unit_matrix(6, 8, &mut rng);
        // rows 2 and 4 duplicate row 0
        let mut rows: Vec<Vec<f32>> = base.rows().map(|r| r.to_vec()).collect();
        rows[2] = rows[0].clone();
        rows[4] = rows[0].clone();
        let corpus = EmbeddingMatrix::from_rows(8, rows.clone(), None).unwrap();
        let nn = query_knn(&corpus, &rows[0], 3).unwrap();
        assert_eq!(nn.neighbor_ids, vec![0, 2, 4]);
        assert_eq!(nn.distances, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let corpus = random_unit_matrix(1000, 16, &mut rng);
        let queries = random_unit_matrix(50, 16, &mut rng);
        let results = batch_query(&corpus, &queries, 10).unwrap();
        for (qi, got) in results.iter().enumerate() {
            let want = naive_knn(&corpus, queries.row(qi), 10);
            assert_eq!(got.neighbor_ids, want.neighbor_ids, "query {qi}");
            for (a, b) in got.distances.iter().zip(&want.distances) {
                assert!((a - b).abs() < 1e-9, "query {qi}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_of_one_equals_single_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let corpus = random_unit_matrix(100, 8, &mut rng);
        let queries = random_unit_matrix(1, 8, &mut rng);
        let batch = batch_query(&corpus, &queries, 5).unwrap();
        let single = query_knn(&corpus, queries.row(0), 5).unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].neighbor_ids, single.neighbor_ids);
        assert_eq!(batch[0].distances, single.distances);
    }

    #[test]
    fn permuted_queries_permute_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus = random_unit_matrix(200, 8, &mut rng);
        let queries = random_unit_matrix(10, 8, &mut rng);
        let forward = batch_query(&corpus, &queries, 3).unwrap();
        let reversed_rows: Vec<Vec<f32>> = (0..queries.count())
            .rev()
            .map(|i| queries.row(i).to_vec())
            .collect();
        let reversed = EmbeddingMatrix::from_rows(8, reversed_rows, None).unwrap();
        let backward = batch_query(&corpus, &reversed, 3).unwrap();
        for (i, fwd) in forward.iter().enumerate() {
            let bwd = &backward[queries.count() - 1 - i];
            assert_eq!(fwd.neighbor_ids, bwd.neighbor_ids);
            assert_eq!(fwd.distances, bwd.distances);
        }
    }

    #[test]
    fn k_prefix_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let corpus = random_unit_matrix(300, 8, &mut rng);
        let q = random_unit_matrix(1, 8, &mut rng);
        for k in 1..20 {
            let a = query_knn(&corpus, q.row(0), k).unwrap();
            let b = query_knn(&corpus, q.row(0), k + 1).unwrap();
            assert_eq!(a.neighbor_ids, b.neighbor_ids[..k].to_vec());
        }
    }

    #[test]
    fn signed_permutation_isometry_preserves_neighbor_ids() {
        // a signed permutation is an orthogonal transform that is exact in f32
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 12;
        let corpus = random_unit_matrix(100, dim, &mut rng);
        let queries = random_unit_matrix(5, dim, &mut rng);

        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(&mut rng);
        let signs: Vec<f32> = (0..dim)
            .map(|_| if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 })
            .collect();
        let transform = |m: &EmbeddingMatrix| {
            let rows: Vec<Vec<f32>> = m
                .rows()
                .map(|r| (0..dim).map(|j| signs[j] * r[perm[j]]).collect())
                .collect();
            EmbeddingMatrix::from_rows(dim, rows, None).unwrap()
        };

        let before = batch_query(&corpus, &queries, 7).unwrap();
        let after = batch_query(&transform(&corpus), &transform(&queries), 7).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.neighbor_ids, a.neighbor_ids);
        }
    }

    #[test]
    fn parameter_errors() {
        let corpus = basis_matrix(3, 3);
        assert!(matches!(
            query_knn(&corpus, &[1.0, 0.0, 0.0], 4),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            query_knn(&corpus, &[1.0, 0.0, 0.0], 0),
            Err(Error::KOutOfRange { .. })
        ));
        assert!(matches!(
            query_knn(&corpus, &[1.0, 0.0], 1),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn recall_examples() {
        let list = NeighborList {
            query_id: 0,
            neighbor_ids: (0..10).collect(),
            distances: (0..10).map(|i| i as f64 / 10.0).collect(),
        };
        let relevant: std::collections::HashSet<usize> = [1, 2, 3].into_iter().collect();
        assert_eq!(recall_at_k(&list, &relevant, 10).unwrap(), 1.0);

        let disjoint: std::collections::HashSet<usize> = [100, 200].into_iter().collect();
        assert_eq!(recall_at_k(&list, &disjoint, 10).unwrap(), 0.0);

        // 4 relevant planted, 3 retrieved in the top 10
        let mixed: std::collections::HashSet<usize> = [0, 5, 9, 77].into_iter().collect();
        assert_eq!(recall_at_k(&list, &mixed, 10).unwrap(), 0.75);

        let empty = std::collections::HashSet::new();
        assert!(recall_at_k(&list, &empty, 10).is_err());
        assert!(recall_at_k(&list, &relevant, 11).is_err());
    }

    #[test]
    fn neighbors_jsonl_round_trip() {
        let list = NeighborList {
            query_id: 3,
            neighbor_ids: vec![5, 9],
            distances: vec![0.25, 0.5],
        };
        let mut buf = Vec::new();
        write_neighbors_jsonl(&mut buf, &list, None).unwrap();
        let parsed: Vec<NeighborList> = read_neighbors_jsonl(buf.as_slice())
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0], list);

        // id table translation
        let mut buf = Vec::new();
        let table: Vec<u64> = (0..10).map(|i| 100 + i).collect();
        write_neighbors_jsonl(&mut buf, &list, Some(&table)).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert!(line.contains("[105,0.25]"), "{line}");
    }
}
