//! Exact k-nearest-neighbour search by blocked brute force.
//!
//! Queries are processed in parallel batches; within a batch the base matrix is
//! streamed in row blocks so each block is reused by every query of the batch
//! while it is still in cache. Results are gathered in query order, so output is
//! independent of the worker count.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const QUERY_BATCH: usize = 64;
const BASE_BLOCK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`.
    Cosine,
    /// `‖a − b‖₂`
    Euclidean,
}

#[inline]
pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x as f64 * *y as f64;
    }
    s
}

#[inline]
fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            let d = x[i] as f64 - y[i] as f64;
            acc[i] += d * d;
        }
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates seen.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, dist: f64, index: usize) {
        if self.heap.len() < self.k {
            self.heap.push(Candidate { dist, index });
        } else if let Some(top) = self.heap.peek() {
            if dist < top.dist {
                self.heap.pop();
                self.heap.push(Candidate { dist, index });
            }
        }
    }

    fn kth(&self) -> f64 {
        self.heap.peek().map(|c| c.dist).unwrap_or(f64::INFINITY)
    }

    fn into_sorted(self) -> Vec<(f64, usize)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.dist, c.index))
            .collect()
    }
}

/// Immutable search structure over a base matrix.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    metric: Metric,
    base: Matrix,
    /// Euclidean norms of the base rows (cosine only).
    norms: Vec<f64>,
}

impl KnnIndex {
    pub fn new(base: Matrix, metric: Metric) -> Result<Self> {
        if !base.all_finite() {
            return Err(Error::numerical("base matrix contains non-finite values"));
        }
        let norms = match metric {
            Metric::Cosine => {
                let norms: Vec<f64> = base
                    .iter_rows()
                    .map(|r| dot_f32(r, r).sqrt())
                    .collect();
                if let Some(i) = norms.iter().position(|&n| n == 0.0) {
                    return Err(Error::numerical(format!("base row {i} is a zero vector")));
                }
                norms
            }
            Metric::Euclidean => Vec::new(),
        };
        Ok(Self { metric, base, norms })
    }

    pub fn len(&self) -> usize {
        self.base.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.base.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.base.cols()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<f64> {
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        if k == 0 || k > self.len() {
            return Err(Error::validation(format!(
                "k={k} out of range for a base of {} rows",
                self.len()
            )));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("query contains non-finite values"));
        }
        match self.metric {
            Metric::Cosine => {
                let n = dot_f32(query, query).sqrt();
                if n == 0.0 {
                    return Err(Error::numerical("query is a zero vector"));
                }
                Ok(n)
            }
            Metric::Euclidean => Ok(1.0),
        }
    }

    #[inline]
    fn distance(&self, query: &[f32], query_norm: f64, j: usize) -> f64 {
        let row = self.base.row(j);
        match self.metric {
            Metric::Cosine => {
                let sim = dot_f32(query, row) / (query_norm * self.norms[j]);
                (1.0 - sim).clamp(0.0, 2.0)
            }
            Metric::Euclidean => sq_dist_f32(query, row).sqrt(),
        }
    }

    /// The `k` nearest base rows as `(distance, row index)`, nearest first.
    pub fn k_nearest(&self, query: &[f32], k: usize) -> Result<Vec<(f64, usize)>> {
        let qn = self.check_query(query, k)?;
        let mut top = TopK::new(k);
        for j in 0..self.len() {
            top.push(self.distance(query, qn, j), j);
        }
        Ok(top.into_sorted())
    }

    /// Distance from `query` to its `k`-th nearest base row (k is 1-based).
    pub fn kth_distance(&self, query: &[f32], k: usize) -> Result<f64> {
        let qn = self.check_query(query, k)?;
        let mut top = TopK::new(k);
        for j in 0..self.len() {
            top.push(self.distance(query, qn, j), j);
        }
        Ok(top.kth())
    }

    /// `kth_distance` for every row of `queries`, in row order.
    pub fn kth_distances(&self, queries: &Matrix, k: usize) -> Result<Vec<f64>> {
        if queries.rows() == 0 {
            return Ok(Vec::new());
        }
        let norms: Vec<f64> = queries
            .iter_rows()
            .map(|q| self.check_query(q, k))
            .collect::<Result<_>>()?;

        let batches: Vec<Vec<f64>> = (0..queries.rows())
            .collect::<Vec<_>>()
            .par_chunks(QUERY_BATCH)
            .map(|batch| {
                let mut tops: Vec<TopK> = batch.iter().map(|_| TopK::new(k)).collect();
                let mut start = 0;
                while start < self.len() {
                    let end = (start + BASE_BLOCK).min(self.len());
                    for (slot, &qi) in batch.iter().enumerate() {
                        let q = queries.row(qi);
                        let qn = norms[qi];
                        let top = &mut tops[slot];
                        for j in start..end {
                            top.push(self.distance(q, qn, j), j);
                        }
                    }
                    start = end;
                }
                tops.iter().map(TopK::kth).collect()
            })
            .collect();
        Ok(batches.into_iter().flatten().collect())
    }
}

/// Exact `k`-th smallest cosine distance from `query` to the rows of `base`.
pub fn kth_nn_distance(query: &[f32], base: &Matrix, k: usize) -> Result<f64> {
    KnnIndex::new(base.clone(), Metric::Cosine)?.kth_distance(query, k)
}
