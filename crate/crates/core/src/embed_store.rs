//! Embedding corpora, classifier outputs and their on-disk formats.
//!
//! An `.iseb` file is a 16-byte little-endian header followed by a row-major
//! `f32` payload:
//!
//! | offset | type    | value          |
//! |--------|---------|----------------|
//! | 0      | [u8; 4] | `b"ISEB"`      |
//! | 4      | u32     | format version |
//! | 8      | u32     | dim            |
//! | 12     | u32     | count          |
//! | 16     | f32 × dim·count | vectors |
//!
//! Per-record metadata lives in a JSON-lines sidecar at `<path>.meta.jsonl`
//! with one `{id, label_id, modality}` object per record in payload order.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot_f64, Matrix};

pub const STORE_MAGIC: [u8; 4] = *b"ISEB";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label_id: Option<u32>,
    pub modality: Modality,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label_id: Option<u32>, modality: Modality, vector: Vec<f32>) -> Self {
        Self {
            id: id.into(),
            label_id,
            modality,
            vector,
        }
    }
}

/// Ordered corpus of fixed-dimension embeddings with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    id: String,
    label_id: Option<u32>,
    modality: Modality,
}

impl EmbeddingStore {
    pub fn new(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let store = Self { dim, records };
        store.validate()?;
        Ok(store)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    /// Store of `modality` records whose ids are `ids` and vectors are the rows of `matrix`.
    pub fn from_matrix(
        ids: Vec<String>,
        labels: Option<Vec<Option<u32>>>,
        modality: Modality,
        matrix: &Matrix,
    ) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows(),
                actual: ids.len(),
            });
        }
        let labels = labels.unwrap_or_else(|| vec![None; ids.len()]);
        if labels.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: labels.len(),
            });
        }
        let records = ids
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (id, label_id))| EmbeddingRecord::new(id, label_id, modality, matrix.row(i).to_vec()))
            .collect();
        Self::new(matrix.cols(), records)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::validation("store dimension must be positive"));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if r.vector.len() != self.dim {
                return Err(Error::validation(format!(
                    "record {:?} has length {}, store dimension is {}",
                    r.id,
                    r.vector.len(),
                    self.dim
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord> {
        self.records
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<Option<u32>> {
        self.records.iter().map(|r| r.label_id).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.dim * self.records.len());
        for r in &self.records {
            data.extend_from_slice(&r.vector);
        }
        Matrix::new(self.records.len(), self.dim, data).expect("store invariants guarantee shape")
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Path of the metadata sidecar belonging to an `.iseb` file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    store.validate()?;
    let dim = u32::try_from(store.dim).map_err(|_| Error::validation("dimension exceeds u32"))?;
    let count = u32::try_from(store.count()).map_err(|_| Error::validation("record count exceeds u32"))?;

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(STORE_HEADER_LEN as usize);
    header.extend_from_slice(&STORE_MAGIC);
    header.extend_from_slice(&STORE_VERSION.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.extend_from_slice(&count.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for r in &store.records {
        for x in &r.vector {
            w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta_path = sidecar_path(path);
    let file = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut w = BufWriter::new(file);
    for r in &store.records {
        let line = MetaLine {
            id: r.id.clone(),
            label_id: r.label_id,
            modality: r.modality,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(&meta_path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Reads and validates the binary payload, returning `(dim, count, flat vectors)`.
fn read_payload(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: STORE_HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != STORE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: STORE_MAGIC,
            found: magic,
        });
    }
    if (bytes.len() as u64) < STORE_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            expected: STORE_HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != STORE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: STORE_VERSION,
            found: version,
        });
    }
    let dim = u32_at(8) as usize;
    let count = u32_at(12) as usize;
    let expected = STORE_HEADER_LEN + 4 * dim as u64 * count as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[STORE_HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, count, data))
}

fn read_sidecar(path: &Path) -> Result<Vec<MetaLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let (dim, count, data) = read_payload(path)?;
    let meta_path = sidecar_path(path);
    let meta = read_sidecar(&meta_path)?;
    if meta.len() != count {
        return Err(Error::MetadataMismatch {
            path: meta_path,
            expected: count,
            found: meta.len(),
        });
    }
    let records = meta
        .into_iter()
        .enumerate()
        .map(|(i, m)| EmbeddingRecord {
            id: m.id,
            label_id: m.label_id,
            modality: m.modality,
            vector: data[i * dim..(i + 1) * dim].to_vec(),
        })
        .collect();
    EmbeddingStore::new(dim, records)
}

/// Rescales every vector to unit Euclidean norm.
pub fn normalize_store(store: &EmbeddingStore) -> Result<EmbeddingStore> {
    let mut records = store.records.clone();
    for r in &mut records {
        normalize_in_place(&mut r.vector).map_err(|_| Error::ZeroVector { id: r.id.clone() })?;
    }
    Ok(EmbeddingStore {
        dim: store.dim,
        records,
    })
}

/// Normalizes `v` to unit length; errors on a zero or non-finite norm.
pub(crate) fn normalize_in_place(v: &mut [f32]) -> Result<()> {
    let norm = dot_f64(v, v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::numerical("vector has zero or non-finite norm"));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classifier outputs
// ---------------------------------------------------------------------------

/// Tolerance of the `logits ≈ fc_weights·features + fc_bias` check on load.
pub const LOGIT_CONSISTENCY_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub d: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub model_name: String,
}

/// Penultimate features, logits and (optionally) the final linear head of a classifier,
/// row-aligned by `ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutputs {
    pub ids: Vec<String>,
    /// Ground-truth labels when known (needed to fit class-conditional scorers).
    pub labels: Vec<Option<u32>>,
    pub features: Matrix,
    pub logits: Matrix,
    /// `C × d`
    pub fc_weights: Option<Matrix>,
    pub fc_bias: Option<Vec<f32>>,
    pub model_name: String,
}

impl ClassifierOutputs {
    pub fn new(
        ids: Vec<String>,
        labels: Vec<Option<u32>>,
        features: Matrix,
        logits: Matrix,
        fc_weights: Option<Matrix>,
        fc_bias: Option<Vec<f32>>,
        model_name: impl Into<String>,
    ) -> Result<Self> {
        let out = Self {
            ids,
            labels,
            features,
            logits,
            fc_weights,
            fc_bias,
            model_name: model_name.into(),
        };
        out.validate_shapes()?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }

    fn validate_shapes(&self) -> Result<()> {
        let n = self.ids.len();
        if self.labels.len() != n || self.features.rows() != n || self.logits.rows() != n {
            return Err(Error::validation(format!(
                "classifier outputs disagree on sample count: ids {}, labels {}, features {}, logits {}",
                n,
                self.labels.len(),
                self.features.rows(),
                self.logits.rows()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate id {id:?}")));
            }
        }
        if let Some(w) = &self.fc_weights {
            if w.rows() != self.num_classes() || w.cols() != self.feature_dim() {
                return Err(Error::validation(format!(
                    "fc_weights is {}x{}, expected {}x{}",
                    w.rows(),
                    w.cols(),
                    self.num_classes(),
                    self.feature_dim()
                )));
            }
        }
        if let Some(b) = &self.fc_bias {
            if b.len() != self.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: self.num_classes(),
                    actual: b.len(),
                });
            }
        }
        Ok(())
    }

    /// The final linear head, or an error naming the scorer that needed it.
    pub fn head(&self, needed_by: &str) -> Result<(&Matrix, &[f32])> {
        match (&self.fc_weights, &self.fc_bias) {
            (Some(w), Some(b)) => Ok((w, b.as_slice())),
            _ => Err(Error::validation(format!(
                "{needed_by} requires fc_weights and fc_bias in the classifier outputs"
            ))),
        }
    }

    /// Largest `|logit − (W·f + b)|` over all entries, scaled by `max(1, |logit|)`.
    pub fn consistency_error(&self) -> Option<f64> {
        let (w, b) = (self.fc_weights.as_ref()?, self.fc_bias.as_ref()?);
        let mut worst = 0.0f64;
        for (i, f) in self.features.iter_rows().enumerate() {
            for c in 0..w.rows() {
                let expect = dot_f64(w.row(c), f) + b[c] as f64;
                let got = self.logits.get(i, c) as f64;
                worst = worst.max((got - expect).abs() / got.abs().max(1.0));
            }
        }
        Some(worst)
    }

    pub fn check_consistency(&self) -> Result<()> {
        if let Some(err) = self.consistency_error() {
            if !(err <= LOGIT_CONSISTENCY_TOL) {
                return Err(Error::validation(format!(
                    "logits differ from fc_weights·features + fc_bias by {err:.3e} (tolerance {LOGIT_CONSISTENCY_TOL})"
                )));
            }
        }
        Ok(())
    }

    /// Rows at `indices`, in order; the head is shared.
    pub fn select(&self, indices: &[usize]) -> ClassifierOutputs {
        ClassifierOutputs {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            features: self.features.select_rows(indices),
            logits: self.logits.select_rows(indices),
            fc_weights: self.fc_weights.clone(),
            fc_bias: self.fc_bias.clone(),
            model_name: self.model_name.clone(),
        }
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let features = EmbeddingStore::from_matrix(
            self.ids.clone(),
            Some(self.labels.clone()),
            Modality::Image,
            &self.features,
        )?;
        write_store(&features, dir.join("features.iseb"))?;
        let logits = EmbeddingStore::from_matrix(
            self.ids.clone(),
            Some(self.labels.clone()),
            Modality::Image,
            &self.logits,
        )?;
        write_store(&logits, dir.join("logits.iseb"))?;
        if let Some(w) = &self.fc_weights {
            let ids = (0..w.rows()).map(|c| format!("class_{c}")).collect();
            let labels = (0..w.rows() as u32).map(Some).collect();
            let store = EmbeddingStore::from_matrix(ids, Some(labels), Modality::Image, w)?;
            write_store(&store, dir.join("fc_weights.iseb"))?;
        }
        if let Some(b) = &self.fc_bias {
            let m = Matrix::new(1, b.len(), b.clone())?;
            let store = EmbeddingStore::from_matrix(vec!["bias".into()], None, Modality::Image, &m)?;
            write_store(&store, dir.join("fc_bias.iseb"))?;
        }
        let manifest = ClassifierManifest {
            d: self.feature_dim(),
            num_classes: self.num_classes(),
            model_name: self.model_name.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads a classifier-outputs directory. The head files are optional; when present the
    /// logits are checked against it.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ClassifierManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;

        let features = read_store(dir.join("features.iseb"))?;
        let logits = read_store(dir.join("logits.iseb"))?;
        if features.dim() != manifest.d {
            return Err(Error::validation(format!(
                "features.iseb has dim {}, manifest declares d={}",
                features.dim(),
                manifest.d
            )));
        }
        if logits.dim() != manifest.num_classes {
            return Err(Error::validation(format!(
                "logits.iseb has dim {}, manifest declares C={}",
                logits.dim(),
                manifest.num_classes
            )));
        }
        if features.ids() != logits.ids() {
            return Err(Error::validation("features.iseb and logits.iseb ids differ"));
        }

        let weights_path = dir.join("fc_weights.iseb");
        let fc_weights = if weights_path.exists() {
            Some(read_store(&weights_path)?.to_matrix())
        } else {
            None
        };
        let bias_path = dir.join("fc_bias.iseb");
        let fc_bias = if bias_path.exists() {
            let store = read_store(&bias_path)?;
            if store.count() != 1 {
                return Err(Error::validation(format!(
                    "fc_bias.iseb must hold exactly one row, found {}",
                    store.count()
                )));
            }
            Some(store.into_records().remove(0).vector)
        } else {
            None
        };

        let out = Self::new(
            features.ids(),
            features.labels(),
            features.to_matrix(),
            logits.to_matrix(),
            fc_weights,
            fc_bias,
            manifest.model_name,
        )?;
        out.check_consistency()?;
        Ok(out)
    }
}
