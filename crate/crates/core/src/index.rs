//! Exact cosine top-N retrieval.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Dot product of two unit vectors in 64-bit arithmetic, clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

#[inline]
fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub row: usize,
    pub sim: f64,
}

/// Result order: similarity descending, then row ascending.
fn rank_order(a_sim: f64, a_row: usize, b_sim: f64, b_row: usize) -> Ordering {
    b_sim.total_cmp(&a_sim).then(a_row.cmp(&b_row))
}

/// Immutable index over the rows of an embedding matrix.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    matrix: Arc<EmbeddingMatrix>,
    ids: Vec<String>,
    rows_by_id: HashMap<String, usize>,
}

impl VectorIndex {
    /// `ids[i]` names row `i`; ids must be unique and cover every row.
    pub fn new(matrix: Arc<EmbeddingMatrix>, ids: Vec<String>) -> Result<Self> {
        if ids.len() != matrix.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                matrix.len()
            )));
        }
        let mut rows_by_id = HashMap::with_capacity(ids.len());
        for (row, id) in ids.iter().enumerate() {
            if let Some(first) = rows_by_id.insert(id.clone(), row) {
                return Err(Error::DuplicateId {
                    id: id.clone(),
                    first_line: first + 1,
                    second_line: row + 1,
                });
            }
        }
        Ok(VectorIndex {
            matrix,
            ids,
            rows_by_id,
        })
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.rows_by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `n` rows most similar to `query`, skipping the row named by
    /// `exclude`. Keeps a bounded heap of the current best `n` candidates.
    pub fn top_n(&self, query: &[f32], n: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
        self.check_dim(query)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        let skip = exclude.and_then(|id| self.row_of(id));

        // Max-heap on "worse than": the top is the weakest kept candidate.
        struct Candidate {
            sim: f64,
            row: usize,
        }
        impl PartialEq for Candidate {
            fn eq(&self, other: &Self) -> bool {
                self.cmp(other) == Ordering::Equal
            }
        }
        impl Eq for Candidate {}
        impl PartialOrd for Candidate {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }
        impl Ord for Candidate {
            fn cmp(&self, other: &Self) -> Ordering {
                rank_order(self.sim, self.row, other.sim, other.row)
            }
        }

        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(n + 1);
        for (row, stored) in self.matrix.rows().enumerate() {
            if Some(row) == skip {
                continue;
            }
            let candidate = Candidate {
                sim: dot(query, stored).clamp(-1.0, 1.0),
                row,
            };
            if heap.len() < n {
                heap.push(candidate);
            } else if let Some(worst) = heap.peek() {
                if candidate < *worst {
                    heap.pop();
                    heap.push(candidate);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: self.ids[c.row].clone(),
                row: c.row,
                sim: c.sim,
            })
            .collect())
    }

    fn check_dim(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.matrix.dim() {
            return Err(Error::Dimension {
                expected: self.matrix.dim(),
                found: query.len(),
            });
        }
        Ok(())
    }
}

/// Reference implementation of [`VectorIndex::top_n`]: scores every row,
/// sorts the whole list and truncates.
pub fn brute_force_top_n(
    index: &VectorIndex,
    query: &[f32],
    n: usize,
    exclude: Option<&str>,
) -> Result<Vec<Neighbor>> {
    index.check_dim(query)?;
    let matrix = index.matrix();
    let mut all: Vec<Neighbor> = (0..matrix.len())
        .filter(|&row| exclude != Some(index.id(row)))
        .map(|row| {
            Ok(Neighbor {
                id: index.id(row).to_owned(),
                row,
                sim: cosine(query, matrix.row(row))?,
            })
        })
        .collect::<Result<_>>()?;
    all.sort_by(|a, b| rank_order(a.sim, a.row, b.sim, b.row));
    all.truncate(n);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EmbeddingKind;

    fn index(rows: &[Vec<f32>]) -> VectorIndex {
        let m = EmbeddingMatrix::from_vecs(EmbeddingKind::Image, rows).unwrap();
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        VectorIndex::new(Arc::new(m), ids).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[0.6, 0.8], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-7);
        assert!(cosine(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn n_zero_is_empty() {
        let idx = index(&[vec![1.0, 0.0]]);
        assert!(idx.top_n(&[1.0, 0.0], 0, None).unwrap().is_empty());
    }

    #[test]
    fn stored_row_ranks_first() {
        let idx = index(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let hits = idx.top_n(idx.matrix().row(1), 3, None).unwrap();
        assert_eq!(hits[0].row, 1);
        assert!((hits[0].sim - 1.0).abs() < 1e-7);
    }

    #[test]
    fn singleton_excluded_is_empty() {
        let idx = index(&[vec![1.0, 0.0]]);
        assert!(idx.top_n(&[1.0, 0.0], 3, Some("r0")).unwrap().is_empty());
        assert!(brute_force_top_n(&idx, &[1.0, 0.0], 3, Some("r0"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ties_break_by_row() {
        let idx = index(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let hits = idx.top_n(&[1.0, 0.0], 10, Some("r2")).unwrap();
        let rows: Vec<usize> = hits.iter().map(|h| h.row).collect();
        assert_eq!(rows, vec![0, 3, 1]);
        assert_eq!(hits, brute_force_top_n(&idx, &[1.0, 0.0], 10, Some("r2")).unwrap());
    }

    #[test]
    fn rejects_wrong_query_dim() {
        let idx = index(&[vec![1.0, 0.0]]);
        assert!(idx.top_n(&[1.0, 0.0, 0.0], 1, None).is_err());
    }
}
