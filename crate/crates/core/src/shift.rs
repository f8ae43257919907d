//! Semantic/covariate shift degrees and the shift-level grid.
//!
//! A test sample's shift degree on each axis is the cosine distance from its
//! decomposed half to the `k`-th nearest ID half. Degrees are binned into
//! `n_levels` half-open intervals per axis, giving an `n_levels × n_levels` grid
//! of subsets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::knn::{KnnIndex, Metric};
use crate::laid::DecompositionMatrix;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_LEVELS: usize = 8;
pub const DEFAULT_NA_THRESHOLD: usize = 100;

/// Lower bound of the cosine-distance range.
const DEGREE_MIN: f64 = 0.0;
/// Upper bound of the cosine-distance range.
const DEGREE_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftDegrees {
    pub ids: Vec<String>,
    pub d_sem: Vec<f64>,
    pub d_cov: Vec<f64>,
    pub k_used: usize,
    pub w_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DegreesHeader {
    k_used: usize,
    #[serde(rename = "W_fingerprint")]
    w_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DegreeLine {
    id: String,
    d_sem: f64,
    d_cov: f64,
}

impl ShiftDegrees {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// JSON-lines: a `{k_used, W_fingerprint}` header line, then one `{id, d_sem, d_cov}` per sample.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = DegreesHeader {
            k_used: self.k_used,
            w_fingerprint: self.w_fingerprint.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for i in 0..self.len() {
            let line = DegreeLine {
                id: self.ids[i].clone(),
                d_sem: self.d_sem[i],
                d_cov: self.d_cov[i],
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::validation(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: DegreesHeader = serde_json::from_str(&header_line).map_err(|e| Error::json(path, e))?;
        let mut out = ShiftDegrees {
            ids: Vec::new(),
            d_sem: Vec::new(),
            d_cov: Vec::new(),
            k_used: header.k_used,
            w_fingerprint: header.w_fingerprint,
        };
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DegreeLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            out.ids.push(d.id);
            out.d_sem.push(d.d_sem);
            out.d_cov.push(d.d_cov);
        }
        Ok(out)
    }
}

/// Decomposed ID feature caches, built once and queried per test sample.
pub struct ShiftMeasurer {
    sem: KnnIndex,
    cov: KnnIndex,
    w: DecompositionMatrix,
}

impl ShiftMeasurer {
    pub fn new(id_store: &EmbeddingStore, w: &DecompositionMatrix) -> Result<Self> {
        if id_store.is_empty() {
            return Err(Error::validation("ID store is empty"));
        }
        if id_store.dim() != w.l() {
            return Err(Error::DimensionMismatch {
                expected: w.l(),
                actual: id_store.dim(),
            });
        }
        let (sem, cov) = w.decompose_store(id_store)?;
        Ok(Self {
            sem: KnnIndex::new(sem, Metric::Cosine)?,
            cov: KnnIndex::new(cov, Metric::Cosine)?,
            w: w.clone(),
        })
    }

    pub fn measure(&self, test: &EmbeddingStore, k: usize) -> Result<ShiftDegrees> {
        if test.dim() != self.w.l() {
            return Err(Error::DimensionMismatch {
                expected: self.w.l(),
                actual: test.dim(),
            });
        }
        let (sem, cov) = self.w.decompose_store(test)?;
        Ok(ShiftDegrees {
            ids: test.ids(),
            d_sem: self.sem.kth_distances(&sem, k)?,
            d_cov: self.cov.kth_distances(&cov, k)?,
            k_used: k,
            w_fingerprint: Some(self.w.fingerprint()),
        })
    }
}

/// Semantic and covariate shift degrees of every test sample against the ID store.
pub fn measure_shifts(
    test: &EmbeddingStore,
    id_store: &EmbeddingStore,
    w: &DecompositionMatrix,
    k: usize,
) -> Result<ShiftDegrees> {
    if test.dim() != id_store.dim() {
        return Err(Error::DimensionMismatch {
            expected: id_store.dim(),
            actual: test.dim(),
        });
    }
    ShiftMeasurer::new(id_store, w)?.measure(test, k)
}

// ---------------------------------------------------------------------------
// Intervals
// ---------------------------------------------------------------------------

/// Half-open intervals `[edges[i], edges[i+1])` on one axis. The outer edges are the
/// cosine-distance bounds 0 and 2; membership treats the first interval as open to
/// −∞ and the last as open to +∞, so every finite degree has exactly one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisIntervals {
    pub edges: Vec<f64>,
}

impl AxisIntervals {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::validation("an axis needs at least two intervals"));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::validation("interval edges must be finite"));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::validation(format!("interval edges must increase strictly: {edges:?}")));
        }
        Ok(Self { edges })
    }

    pub fn n_levels(&self) -> usize {
        self.edges.len() - 1
    }

    /// 1-based level of `degree`.
    pub fn level_of(&self, degree: f64) -> Option<usize> {
        if !degree.is_finite() {
            return None;
        }
        let interior = &self.edges[1..self.edges.len() - 1];
        Some(1 + interior.partition_point(|&e| e <= degree))
    }

    /// `(start, end)` of level `level` (1-based) as stored.
    pub fn interval(&self, level: usize) -> (f64, f64) {
        (self.edges[level - 1], self.edges[level])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub sem: AxisIntervals,
    pub cov: AxisIntervals,
}

impl IntervalSet {
    pub fn new(sem: AxisIntervals, cov: AxisIntervals) -> Result<Self> {
        if sem.n_levels() != cov.n_levels() {
            return Err(Error::validation(format!(
                "semantic axis has {} levels, covariate axis {}",
                sem.n_levels(),
                cov.n_levels()
            )));
        }
        Ok(Self { sem, cov })
    }

    pub fn n_levels(&self) -> usize {
        self.sem.n_levels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalPolicy {
    /// Equal-width bins between the 1st and 99th percentile; outer bins stretched to [0, 2].
    UniformClipped,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn axis_intervals(values: &[f64], n_levels: usize, axis: &str) -> Result<AxisIntervals> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite {axis} degree")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, 0.01);
    let hi = percentile_sorted(&sorted, 0.99);
    let width = (hi - lo) / n_levels as f64;
    if !(width > 1e-12) {
        return Err(Error::validation(format!(
            "{axis} degrees are (almost) all equal ({lo}..{hi}); check the input features"
        )));
    }
    let mut edges: Vec<f64> = (0..=n_levels).map(|i| lo + width * i as f64).collect();
    edges[0] = DEGREE_MIN.min(edges[1] - width);
    edges[n_levels] = DEGREE_MAX.max(edges[n_levels - 1] + width);
    AxisIntervals::new(edges)
}

/// Interval sets for both axes from the observed degree distribution.
pub fn derive_intervals(degrees: &ShiftDegrees, n_levels: usize, policy: IntervalPolicy) -> Result<IntervalSet> {
    if n_levels < 2 {
        return Err(Error::validation("n_levels must be at least 2"));
    }
    if degrees.is_empty() {
        return Err(Error::validation("cannot derive intervals from zero degrees"));
    }
    match policy {
        IntervalPolicy::UniformClipped => IntervalSet::new(
            axis_intervals(&degrees.d_sem, n_levels, "semantic")?,
            axis_intervals(&degrees.d_cov, n_levels, "covariate")?,
        ),
    }
}

// ---------------------------------------------------------------------------
// Division
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetAssignment {
    pub id: String,
    pub level_sem: usize,
    pub level_cov: usize,
}

/// Test ids grouped by `(level_sem, level_cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetIndex {
    pub intervals: IntervalSet,
    pub na_threshold: usize,
    /// Row-major `n × n`: cell `(s, c)` (1-based) at `(s − 1)·n + (c − 1)`.
    cells: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct CellJson {
    level_sem: usize,
    level_cov: usize,
    count: usize,
    na: bool,
    ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SubsetIndexJson {
    n_levels: usize,
    intervals: IntervalSet,
    na_threshold: usize,
    cells: Vec<CellJson>,
}

impl SubsetIndex {
    pub fn from_cells(intervals: IntervalSet, na_threshold: usize, cells: Vec<Vec<String>>) -> Result<Self> {
        let n = intervals.n_levels();
        if cells.len() != n * n {
            return Err(Error::validation(format!("expected {} cells, got {}", n * n, cells.len())));
        }
        Ok(Self {
            intervals,
            na_threshold,
            cells,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.intervals.n_levels()
    }

    fn slot(&self, level_sem: usize, level_cov: usize) -> usize {
        let n = self.n_levels();
        assert!((1..=n).contains(&level_sem) && (1..=n).contains(&level_cov));
        (level_sem - 1) * n + (level_cov - 1)
    }

    pub fn cell(&self, level_sem: usize, level_cov: usize) -> &[String] {
        &self.cells[self.slot(level_sem, level_cov)]
    }

    pub fn cell_mut(&mut self, level_sem: usize, level_cov: usize) -> &mut Vec<String> {
        let s = self.slot(level_sem, level_cov);
        &mut self.cells[s]
    }

    pub fn is_na(&self, level_sem: usize, level_cov: usize) -> bool {
        self.cell(level_sem, level_cov).len() < self.na_threshold
    }

    /// `na_mask[s-1][c-1]`
    pub fn na_mask(&self) -> Vec<Vec<bool>> {
        let n = self.n_levels();
        (1..=n).map(|s| (1..=n).map(|c| self.is_na(s, c)).collect()).collect()
    }

    pub fn counts(&self) -> Vec<Vec<usize>> {
        let n = self.n_levels();
        (1..=n).map(|s| (1..=n).map(|c| self.cell(s, c).len()).collect()).collect()
    }

    /// `(level_sem, level_cov, ids)` for every cell, semantic-major.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &[String])> + '_ {
        let n = self.n_levels();
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, ids)| (i / n + 1, i % n + 1, ids.as_slice()))
    }

    pub fn assignments(&self) -> Vec<SubsetAssignment> {
        self.iter_cells()
            .flat_map(|(s, c, ids)| {
                ids.iter().map(move |id| SubsetAssignment {
                    id: id.clone(),
                    level_sem: s,
                    level_cov: c,
                })
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Errors unless every record of `store` is assigned exactly once and nothing else is.
    pub fn check_covers(&self, store: &EmbeddingStore) -> Result<()> {
        let mut assigned: Vec<&str> = self.cells.iter().flatten().map(String::as_str).collect();
        assigned.sort_unstable();
        let mut ids: Vec<&str> = store.records().iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if assigned != ids {
            return Err(Error::validation("subset index does not partition the test store ids"));
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let doc = SubsetIndexJson {
            n_levels: self.n_levels(),
            intervals: self.intervals.clone(),
            na_threshold: self.na_threshold,
            cells: self
                .iter_cells()
                .map(|(s, c, ids)| CellJson {
                    level_sem: s,
                    level_cov: c,
                    count: ids.len(),
                    na: ids.len() < self.na_threshold,
                    ids: ids.to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: SubsetIndexJson = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let intervals = IntervalSet::new(
            AxisIntervals::new(doc.intervals.sem.edges)?,
            AxisIntervals::new(doc.intervals.cov.edges)?,
        )?;
        let n = intervals.n_levels();
        if doc.n_levels != n {
            return Err(Error::validation("n_levels disagrees with the interval sets"));
        }
        let mut cells = vec![Vec::new(); n * n];
        let mut filled = vec![false; n * n];
        for c in doc.cells {
            if !(1..=n).contains(&c.level_sem) || !(1..=n).contains(&c.level_cov) {
                return Err(Error::validation(format!(
                    "cell ({}, {}) outside the {n}x{n} grid",
                    c.level_sem, c.level_cov
                )));
            }
            let slot = (c.level_sem - 1) * n + (c.level_cov - 1);
            if filled[slot] {
                return Err(Error::validation(format!("cell ({}, {}) listed twice", c.level_sem, c.level_cov)));
            }
            filled[slot] = true;
            cells[slot] = c.ids;
        }
        Self::from_cells(intervals, doc.na_threshold, cells)
    }
}

/// Assigns each sample to the cell whose intervals contain its degrees.
pub fn divide_dataset(degrees: &ShiftDegrees, intervals: &IntervalSet, na_threshold: usize) -> Result<SubsetIndex> {
    if degrees.d_sem.len() != degrees.len() || degrees.d_cov.len() != degrees.len() {
        return Err(Error::validation("shift degrees have ragged columns"));
    }
    let n = intervals.n_levels();
    let mut cells = vec![Vec::new(); n * n];
    for i in 0..degrees.len() {
        let (s, c) = match (
            intervals.sem.level_of(degrees.d_sem[i]),
            intervals.cov.level_of(degrees.d_cov[i]),
        ) {
            (Some(s), Some(c)) => (s, c),
            _ => {
                return Err(Error::validation(format!(
                    "internal consistency: degrees ({}, {}) of {:?} fall in no interval",
                    degrees.d_sem[i], degrees.d_cov[i], degrees.ids[i]
                )))
            }
        };
        cells[(s - 1) * n + (c - 1)].push(degrees.ids[i].clone());
    }
    SubsetIndex::from_cells(intervals.clone(), na_threshold, cells)
}
