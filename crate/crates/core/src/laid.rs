//! Language-aligned feature decomposition.
//!
//! An orthogonal `l × l` matrix `W` maps a feature `f` to `f·W`; the first half of
//! the result is the semantic part and the second half the covariate part. `W`
//! is trained on text triplets (standard text, semantic-shift text, covariate-shift
//! text) with a hinged triplet loss on each half plus a penalty on `‖WᵀW − I‖²_F`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed_store::{normalize_in_place, EmbeddingStore};
use crate::error::{Error, Result};
use crate::matrix::{dot_f64, Matrix};

pub const W_MAGIC: [u8; 4] = *b"ISW1";

/// Placeholder substituted by a label in prompt templates.
pub const OBJECT_PLACEHOLDER: &str = "{object}";

/// Orthogonality bound a trained matrix is expected to meet.
pub const ORTHOGONALITY_TOL: f64 = 1e-3;

const UNIT_NORM_TOL: f64 = 1e-5;

/// Triplets per parallel work unit when evaluating the objective. Fixed so the
/// reduction order does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 32;

/// `1 − a·b / (‖a‖‖b‖)`
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("cosine distance of a zero vector"));
    }
    Ok((1.0 - dot_f64(a, b) / (na * nb)).clamp(0.0, 2.0))
}

/// Substitutes `label` into a template holding exactly one `{object}` placeholder.
pub fn render_template(template: &str, label: &str) -> Result<String> {
    let n = template.matches(OBJECT_PLACEHOLDER).count();
    if n != 1 {
        return Err(Error::validation(format!(
            "template {template:?} must contain exactly one {OBJECT_PLACEHOLDER} placeholder, found {n}"
        )));
    }
    Ok(template.replacen(OBJECT_PLACEHOLDER, label, 1))
}

// ---------------------------------------------------------------------------
// Decomposition matrix
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sem: f64,
    pub cov: f64,
    pub orth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub orth_weight: f64,
    pub hinge: bool,
    pub num_triplets: usize,
    /// Mean triplet losses over the whole corpus and the orthogonality penalty, after training.
    pub final_losses: LossComponents,
    /// Total objective over the whole corpus at the end of each epoch.
    pub epoch_losses: Vec<f64>,
    /// `‖WᵀW − I‖_F` of the stored matrix.
    pub orthogonality_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionMatrix {
    l: usize,
    /// Row-major `l × l`.
    w: Vec<f32>,
    trained: bool,
    manifest: Option<TrainManifest>,
}

impl DecompositionMatrix {
    pub fn new(l: usize, w: Vec<f32>) -> Result<Self> {
        if l == 0 || l % 2 != 0 {
            return Err(Error::validation(format!("decomposition size l={l} must be even and positive")));
        }
        if w.len() != l * l {
            return Err(Error::DimensionMismatch {
                expected: l * l,
                actual: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("decomposition matrix has non-finite entries"));
        }
        Ok(Self {
            l,
            w,
            trained: false,
            manifest: None,
        })
    }

    pub fn identity(l: usize) -> Result<Self> {
        let mut w = vec![0.0; l * l];
        for i in 0..l {
            w[i * l + i] = 1.0;
        }
        Self::new(l, w)
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn half(&self) -> usize {
        self.l / 2
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.w[i * self.l + j]
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn manifest(&self) -> Option<&TrainManifest> {
        self.manifest.as_ref()
    }

    /// `‖WᵀW − I‖_F`
    pub fn orthogonality_error(&self) -> f64 {
        let w: Vec<f64> = self.w.iter().map(|&x| x as f64).collect();
        orth_residual(&w, self.l).1.sqrt()
    }

    /// `f·W` split into its semantic (first) and covariate (second) halves.
    pub fn decompose(&self, f: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        if f.len() != self.l {
            return Err(Error::DimensionMismatch {
                expected: self.l,
                actual: f.len(),
            });
        }
        let y = self.transform(f);
        let cov = y[self.half()..].to_vec();
        let mut sem = y;
        sem.truncate(self.half());
        Ok((sem, cov))
    }

    fn transform(&self, f: &[f32]) -> Vec<f32> {
        let l = self.l;
        let mut y = vec![0.0f64; l];
        for (i, &fi) in f.iter().enumerate() {
            let fi = fi as f64;
            let row = &self.w[i * l..(i + 1) * l];
            for (yj, &wij) in y.iter_mut().zip(row) {
                *yj += fi * wij as f64;
            }
        }
        y.into_iter().map(|v| v as f32).collect()
    }

    /// Decomposes every row of `m`, returning `(semantic, covariate)` matrices.
    pub fn decompose_matrix(&self, m: &Matrix) -> Result<(Matrix, Matrix)> {
        if m.cols() != self.l {
            return Err(Error::DimensionMismatch {
                expected: self.l,
                actual: m.cols(),
            });
        }
        let h = self.half();
        let rows: Vec<Vec<f32>> = (0..m.rows()).into_par_iter().map(|i| self.transform(m.row(i))).collect();
        let mut sem = Vec::with_capacity(m.rows() * h);
        let mut cov = Vec::with_capacity(m.rows() * h);
        for y in rows {
            sem.extend_from_slice(&y[..h]);
            cov.extend_from_slice(&y[h..]);
        }
        Ok((Matrix::new(m.rows(), h, sem)?, Matrix::new(m.rows(), h, cov)?))
    }

    pub fn decompose_store(&self, store: &EmbeddingStore) -> Result<(Matrix, Matrix)> {
        self.decompose_matrix(&store.to_matrix())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(8 + 4 * self.w.len());
        bytes.extend_from_slice(&W_MAGIC);
        bytes.extend_from_slice(&(self.l as u32).to_le_bytes());
        for x in &self.w {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        bytes
    }

    /// Short content hash of the stored matrix, used to tie shift degrees to the `W` they came from.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        hex::encode(&digest[..8])
    }

    /// Path of the training manifest written next to a `W` file.
    pub fn manifest_path(path: &Path) -> PathBuf {
        path.with_extension("train_manifest.json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        if let Some(m) = &self.manifest {
            let mpath = Self::manifest_path(path);
            let text = serde_json::to_string_pretty(m).map_err(|e| Error::json(&mpath, e))?;
            fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                path: path.into(),
                expected: 8,
                actual: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != W_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: W_MAGIC,
                found: magic,
            });
        }
        let l = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + 4 * (l as u64) * (l as u64);
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let w = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut out = Self::new(l, w)?;
        let mpath = Self::manifest_path(path);
        if mpath.exists() {
            let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            out.manifest = Some(serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?);
            out.trained = true;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Triplets and losses
// ---------------------------------------------------------------------------

/// Unit-norm features of a standard text, its semantic-shift contrast and its
/// covariate-shift contrast.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTriplet {
    pub st: Vec<f32>,
    pub ss: Vec<f32>,
    pub cs: Vec<f32>,
}

impl TextTriplet {
    pub fn new(st: Vec<f32>, ss: Vec<f32>, cs: Vec<f32>) -> Result<Self> {
        if ss.len() != st.len() || cs.len() != st.len() {
            return Err(Error::DimensionMismatch {
                expected: st.len(),
                actual: if ss.len() != st.len() { ss.len() } else { cs.len() },
            });
        }
        for v in [&st, &ss, &cs] {
            let n = dot_f64(v, v).sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::validation(format!("triplet feature has norm {n}, expected 1")));
            }
        }
        Ok(Self { st, ss, cs })
    }

    pub fn dim(&self) -> usize {
        self.st.len()
    }
}

/// Hinged triplet losses of one triplet under `W`, and `‖WᵀW − I‖²_F`.
pub fn triplet_and_orth_losses(t: &TextTriplet, w: &DecompositionMatrix, alpha: f64) -> Result<LossComponents> {
    if t.dim() != w.l() {
        return Err(Error::DimensionMismatch {
            expected: w.l(),
            actual: t.dim(),
        });
    }
    let wd: Vec<f64> = w.as_slice().iter().map(|&x| x as f64).collect();
    let obj = LaidObjective {
        alpha,
        orth_weight: 1.0,
        hinge: true,
    };
    let (sem, cov) = obj.triplet_terms(&wd, w.l(), t, None);
    Ok(LossComponents {
        sem,
        cov,
        orth: orth_residual(&wd, w.l()).1,
    })
}

/// `(WᵀW − I, ‖WᵀW − I‖²_F)` for row-major `w`.
fn orth_residual(w: &[f64], l: usize) -> (Vec<f64>, f64) {
    let mut m = vec![0.0; l * l];
    for k in 0..l {
        let row = &w[k * l..(k + 1) * l];
        for i in 0..l {
            let wki = row[i];
            if wki == 0.0 {
                continue;
            }
            let mi = &mut m[i * l..(i + 1) * l];
            for j in 0..l {
                mi[j] += wki * row[j];
            }
        }
    }
    for i in 0..l {
        m[i * l + i] -= 1.0;
    }
    let sq = m.iter().map(|x| x * x).sum();
    (m, sq)
}

/// Cosine distance and its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let na = aa.sqrt();
    let nb = bb.sqrt();
    let inv = 1.0 / (na * nb);
    let sim = ab * inv;
    // d(1 - sim)/da = -(b/(|a||b|) - sim * a/|a|^2)
    let ga = a.iter().zip(b).map(|(&x, &y)| -(y * inv - sim * x / aa)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| -(x * inv - sim * y / bb)).collect();
    (1.0 - sim, ga, gb)
}

fn project(w: &[f64], l: usize, x: &[f32]) -> Vec<f64> {
    let mut y = vec![0.0; l];
    for (i, &xi) in x.iter().enumerate() {
        let xi = xi as f64;
        for (yj, &wij) in y.iter_mut().zip(&w[i * l..(i + 1) * l]) {
            *yj += xi * wij;
        }
    }
    y
}

/// Training objective `mean(L_sem + L_cov) + orth_weight · L_orth` over a set of
/// triplets, as a function of a row-major `f64` matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaidObjective {
    pub alpha: f64,
    pub orth_weight: f64,
    /// Clamp each triplet term at zero.
    pub hinge: bool,
}

impl LaidObjective {
    /// Semantic and covariate terms of one triplet. With `grad = Some(..)` the
    /// gradient of `L_sem + L_cov` (scaled by `scale`) is accumulated into it.
    fn triplet_terms(&self, w: &[f64], l: usize, t: &TextTriplet, grad: Option<(&mut [f64], f64)>) -> (f64, f64) {
        let h = l / 2;
        let st = project(w, l, &t.st);
        let ss = project(w, l, &t.ss);
        let cs = project(w, l, &t.cs);

        // L_sem = d(st_sem, cs_sem) - d(st_sem, ss_sem) + alpha
        let (d_st_cs_s, g1a, g1b) = cosine_with_grad(&st[..h], &cs[..h]);
        let (d_st_ss_s, g2a, g2b) = cosine_with_grad(&st[..h], &ss[..h]);
        let raw_sem = d_st_cs_s - d_st_ss_s + self.alpha;
        // L_cov = d(st_cov, ss_cov) - d(st_cov, cs_cov) + alpha
        let (d_st_ss_c, g3a, g3b) = cosine_with_grad(&st[h..], &ss[h..]);
        let (d_st_cs_c, g4a, g4b) = cosine_with_grad(&st[h..], &cs[h..]);
        let raw_cov = d_st_ss_c - d_st_cs_c + self.alpha;

        let sem_active = !self.hinge || raw_sem > 0.0;
        let cov_active = !self.hinge || raw_cov > 0.0;
        let sem = if sem_active { raw_sem } else { 0.0 };
        let cov = if cov_active { raw_cov } else { 0.0 };

        if let Some((grad, scale)) = grad {
            let mut g_st = vec![0.0; l];
            let mut g_ss = vec![0.0; l];
            let mut g_cs = vec![0.0; l];
            if sem_active {
                for k in 0..h {
                    g_st[k] += g1a[k] - g2a[k];
                    g_cs[k] += g1b[k];
                    g_ss[k] -= g2b[k];
                }
            }
            if cov_active {
                for k in 0..h {
                    g_st[h + k] += g3a[k] - g4a[k];
                    g_ss[h + k] += g3b[k];
                    g_cs[h + k] -= g4b[k];
                }
            }
            // y = xᵀW  =>  dL/dW_ij += x_i · dL/dy_j
            for (x, gy) in [(&t.st, &g_st), (&t.ss, &g_ss), (&t.cs, &g_cs)] {
                for (i, &xi) in x.iter().enumerate() {
                    let xi = xi as f64 * scale;
                    if xi == 0.0 {
                        continue;
                    }
                    for (gij, &gj) in grad[i * l..(i + 1) * l].iter_mut().zip(gy.iter()) {
                        *gij += xi * gj;
                    }
                }
            }
        }
        (sem, cov)
    }

    fn accumulate(&self, w: &[f64], l: usize, triplets: &[TextTriplet], want_grad: bool) -> (f64, f64, Vec<f64>) {
        let n = triplets.len().max(1) as f64;
        let partials: Vec<(f64, f64, Vec<f64>)> = triplets
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = if want_grad { vec![0.0; l * l] } else { Vec::new() };
                let (mut s, mut c) = (0.0, 0.0);
                for t in chunk {
                    let grad = if want_grad { Some((g.as_mut_slice(), 1.0 / n)) } else { None };
                    let (ts, tc) = self.triplet_terms(w, l, t, grad);
                    s += ts;
                    c += tc;
                }
                (s, c, g)
            })
            .collect();
        let mut grad = if want_grad { vec![0.0; l * l] } else { Vec::new() };
        let (mut sem, mut cov) = (0.0, 0.0);
        for (s, c, g) in partials {
            sem += s;
            cov += c;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        (sem / n, cov / n, grad)
    }

    /// Mean loss components over `triplets`.
    pub fn losses(&self, w: &[f64], l: usize, triplets: &[TextTriplet]) -> LossComponents {
        let (sem, cov, _) = self.accumulate(w, l, triplets, false);
        LossComponents {
            sem,
            cov,
            orth: orth_residual(w, l).1,
        }
    }

    pub fn total(&self, c: &LossComponents) -> f64 {
        c.sem + c.cov + self.orth_weight * c.orth
    }

    pub fn value(&self, w: &[f64], l: usize, triplets: &[TextTriplet]) -> f64 {
        self.total(&self.losses(w, l, triplets))
    }

    /// Loss components and the analytic gradient of the total objective.
    pub fn value_and_gradient(&self, w: &[f64], l: usize, triplets: &[TextTriplet]) -> (LossComponents, Vec<f64>) {
        let (sem, cov, mut grad) = self.accumulate(w, l, triplets, true);
        let (m, orth) = orth_residual(w, l);
        // d‖WᵀW − I‖²/dW = 4·W·(WᵀW − I)
        if self.orth_weight != 0.0 {
            for i in 0..l {
                let wi = &w[i * l..(i + 1) * l];
                for j in 0..l {
                    let mut acc = 0.0;
                    for k in 0..l {
                        acc += wi[k] * m[k * l + j];
                    }
                    grad[i * l + j] += 4.0 * self.orth_weight * acc;
                }
            }
        }
        (LossComponents { sem, cov, orth }, grad)
    }
}

// ---------------------------------------------------------------------------
// Triplet corpus
// ---------------------------------------------------------------------------

fn default_triplets_per_text() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletCorpusSpec {
    pub semantic_labels: Vec<String>,
    /// Prompt templates, each with one `{object}` placeholder.
    pub covariate_prompts: Vec<String>,
    pub pairing_seed: u64,
    /// Triplets emitted per standard text.
    #[serde(default = "default_triplets_per_text")]
    pub triplets_per_text: usize,
}

impl TripletCorpusSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Rendered text for `(label index, prompt index)`.
    pub fn rendering(&self, label: usize, prompt: usize) -> Result<String> {
        render_template(&self.covariate_prompts[prompt], &self.semantic_labels[label])
    }

    /// All renderings, label-major.
    pub fn renderings(&self) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.semantic_labels.len() * self.covariate_prompts.len());
        for a in 0..self.semantic_labels.len() {
            for p in 0..self.covariate_prompts.len() {
                out.push(self.rendering(a, p)?);
            }
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.semantic_labels.is_empty() || self.covariate_prompts.is_empty() {
            return Err(Error::validation("triplet corpus needs at least one label and one prompt"));
        }
        for p in &self.covariate_prompts {
            render_template(p, "")?;
        }
        if self.semantic_labels.len() < 2 {
            return Err(Error::validation(
                "triplet corpus needs at least two semantic labels to form a semantic contrast",
            ));
        }
        if self.covariate_prompts.len() < 2 {
            return Err(Error::validation(
                "triplet corpus needs at least two covariate prompts to form a covariate contrast",
            ));
        }
        if self.triplets_per_text == 0 {
            return Err(Error::validation("triplets_per_text must be positive"));
        }
        Ok(())
    }
}

/// `(label index, prompt index)` pairs behind each text of a triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletSource {
    pub standard: (usize, usize),
    pub semantic_shift: (usize, usize),
    pub covariate_shift: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletCorpus {
    pub triplets: Vec<TextTriplet>,
    pub sources: Vec<TripletSource>,
}

/// Pairs every standard text with a random semantic contrast (other label, same prompt)
/// and a random covariate contrast (same label, other prompt). Text features are looked
/// up by rendered string id and unit-normalized.
pub fn build_triplet_corpus(spec: &TripletCorpusSpec, text_features: &EmbeddingStore) -> Result<TripletCorpus> {
    spec.validate()?;
    let index: HashMap<&str, usize> = text_features
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let n_labels = spec.semantic_labels.len();
    let n_prompts = spec.covariate_prompts.len();

    let mut features = Vec::with_capacity(n_labels * n_prompts);
    for (a, p) in (0..n_labels).flat_map(|a| (0..n_prompts).map(move |p| (a, p))) {
        let text = spec.rendering(a, p)?;
        let i = *index
            .get(text.as_str())
            .ok_or_else(|| Error::validation(format!("no text feature for rendering {text:?}")))?;
        let mut v = text_features.records()[i].vector.clone();
        normalize_in_place(&mut v).map_err(|_| Error::ZeroVector { id: text.clone() })?;
        features.push(v);
    }
    let feat = |(a, p): (usize, usize)| features[a * n_prompts + p].clone();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.pairing_seed);
    let mut order: Vec<(usize, usize)> = (0..spec.triplets_per_text)
        .flat_map(|_| (0..n_labels).flat_map(|a| (0..n_prompts).map(move |p| (a, p))))
        .collect();
    order.shuffle(&mut rng);

    let mut triplets = Vec::with_capacity(order.len());
    let mut sources = Vec::with_capacity(order.len());
    for (a, p) in order {
        let mut b = rng.gen_range(0..n_labels - 1);
        if b >= a {
            b += 1;
        }
        let mut q = rng.gen_range(0..n_prompts - 1);
        if q >= p {
            q += 1;
        }
        let source = TripletSource {
            standard: (a, p),
            semantic_shift: (b, p),
            covariate_shift: (a, q),
        };
        triplets.push(TextTriplet::new(feat(source.standard), feat(source.semantic_shift), feat(source.covariate_shift))?);
        sources.push(source);
    }
    Ok(TripletCorpus { triplets, sources })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub orth_weight: f64,
    pub hinge: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            orth_weight: 1.0,
            hinge: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::validation("alpha must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.orth_weight >= 0.0) {
            return Err(Error::validation("orth_weight must be non-negative"));
        }
        Ok(())
    }

    pub fn objective(&self) -> LaidObjective {
        LaidObjective {
            alpha: self.alpha,
            orth_weight: self.orth_weight,
            hinge: self.hinge,
        }
    }
}

/// Mini-batch gradient descent from `W = I`. Each epoch visits every triplet once in
/// a seeded shuffled order. Deterministic for fixed `(triplets, config)`.
pub fn train_decomposition(triplets: &[TextTriplet], config: &TrainConfig) -> Result<DecompositionMatrix> {
    config.validate()?;
    let l = triplets
        .first()
        .map(TextTriplet::dim)
        .ok_or_else(|| Error::validation("empty triplet corpus"))?;
    if l == 0 || l % 2 != 0 {
        return Err(Error::validation(format!("feature length {l} must be even")));
    }
    if let Some(t) = triplets.iter().find(|t| t.dim() != l) {
        return Err(Error::DimensionMismatch {
            expected: l,
            actual: t.dim(),
        });
    }

    let objective = config.objective();
    let mut w = vec![0.0f64; l * l];
    for i in 0..l {
        w[i * l + i] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<TextTriplet> = batch_idx.iter().map(|&i| triplets[i].clone()).collect();
            let (parts, grad) = objective.value_and_gradient(&w, l, &batch);
            let total = objective.total(&parts);
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}: sem={}, cov={}, orth={}",
                    parts.sem, parts.cov, parts.orth
                )));
            }
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= config.learning_rate * gi;
            }
            step += 1;
        }
        epoch_losses.push(objective.value(&w, l, triplets));
    }

    let final_losses = objective.losses(&w, l, triplets);
    let mut out = DecompositionMatrix::new(l, w.iter().map(|&x| x as f32).collect())?;
    let orthogonality_error = out.orthogonality_error();
    out.trained = true;
    out.manifest = Some(TrainManifest {
        alpha: config.alpha,
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
        orth_weight: config.orth_weight,
        hinge: config.hinge,
        num_triplets: triplets.len(),
        final_losses,
        epoch_losses,
        orthogonality_error,
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Zero-shot validation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeaturePart {
    Full,
    Semantic,
    Covariate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotAccuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Zero-shot classification of labelled images against one text feature per class
/// (class index = record position), using the chosen part of the decomposed features.
pub fn zero_shot_eval(
    images: &EmbeddingStore,
    class_texts: &EmbeddingStore,
    w: &DecompositionMatrix,
    part: FeaturePart,
) -> Result<ZeroShotAccuracy> {
    if images.dim() != class_texts.dim() {
        return Err(Error::DimensionMismatch {
            expected: class_texts.dim(),
            actual: images.dim(),
        });
    }
    let select = |m: &Matrix| -> Result<Matrix> {
        match part {
            FeaturePart::Full => Ok(m.clone()),
            FeaturePart::Semantic => Ok(w.decompose_matrix(m)?.0),
            FeaturePart::Covariate => Ok(w.decompose_matrix(m)?.1),
        }
    };
    let img = select(&images.to_matrix())?;
    let cls = select(&class_texts.to_matrix())?;
    zero_shot_on_parts(&img, &images.labels(), &cls)
}

/// Zero-shot accuracy on already-projected features.
pub fn zero_shot_on_parts(images: &Matrix, labels: &[Option<u32>], classes: &Matrix) -> Result<ZeroShotAccuracy> {
    let n_classes = classes.rows();
    if n_classes == 0 {
        return Err(Error::validation("no class texts"));
    }
    if images.rows() == 0 {
        return Err(Error::validation("no images to classify"));
    }
    let mut truth = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(c) if (*c as usize) < n_classes => truth.push(*c as usize),
            Some(c) => {
                return Err(Error::validation(format!(
                    "image {i} has label {c}, outside the {n_classes} classes"
                )))
            }
            None => return Err(Error::validation(format!("image {i} has no label"))),
        }
    }
    let class_norms: Vec<f64> = classes.iter_rows().map(|r| dot_f64(r, r).sqrt()).collect();
    let hits: Vec<(bool, bool)> = (0..images.rows())
        .into_par_iter()
        .map(|i| {
            let x = images.row(i);
            let nx = dot_f64(x, x).sqrt().max(f64::MIN_POSITIVE);
            let sims: Vec<f64> = classes
                .iter_rows()
                .zip(&class_norms)
                .map(|(c, &nc)| dot_f64(x, c) / (nx * nc.max(f64::MIN_POSITIVE)))
                .collect();
            let target = sims[truth[i]];
            // rank = classes strictly better, ties broken toward lower index
            let rank = sims
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < truth[i]))
                .count();
            (rank == 0, rank < 5)
        })
        .collect();
    let n = hits.len() as f64;
    Ok(ZeroShotAccuracy {
        top1: hits.iter().filter(|h| h.0).count() as f64 / n,
        top5: hits.iter().filter(|h| h.1).count() as f64 / n,
    })
}

// ---------------------------------------------------------------------------
// PCA baseline
// ---------------------------------------------------------------------------

/// Leading principal directions of a data set.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `k × l`, orthonormal rows, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each retained component.
    pub explained_variance: Vec<f64>,
    /// Fraction of the total variance the retained components explain.
    pub retained_fraction: f64,
}

impl PcaProjection {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Coordinates of `x` in the retained basis (not centred; zero-shot compares directions).
    pub fn project(&self, x: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).map(|(a, &b)| a * b as f64).sum())
            .collect()
    }

    pub fn project_matrix(&self, m: &Matrix) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = m.iter_rows().map(|r| self.project(r)).collect();
        Matrix::from_f64_rows(self.k(), &rows)
    }
}

/// PCA keeping the fewest leading components whose cumulative explained variance
/// reaches `variance_fraction`. Zero-variance directions are never retained.
pub fn pca_fit(rows: &[Vec<f64>], variance_fraction: f64) -> Result<PcaProjection> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "variance_fraction {variance_fraction} outside (0, 1]"
        )));
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::validation("PCA on an empty data set"));
    }
    let l = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != l) {
        return Err(Error::DimensionMismatch {
            expected: l,
            actual: r.len(),
        });
    }
    let mut mean = vec![0.0; l];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(l, l);
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..l {
            for j in i..l {
                cov[(i, j)] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..l {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let cutoff = top * 1e-10;
    let positive: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let total: f64 = positive.iter().map(|&i| eig.eigenvalues[i]).sum();

    let mut components = Vec::new();
    let mut explained = Vec::new();
    let mut cum = 0.0;
    for &i in &positive {
        components.push(eig.eigenvectors.column(i).iter().copied().collect());
        explained.push(eig.eigenvalues[i]);
        cum += eig.eigenvalues[i];
        if cum / total >= variance_fraction - 1e-12 {
            break;
        }
    }
    Ok(PcaProjection {
        mean,
        components,
        explained_variance: explained,
        retained_fraction: if total > 0.0 { cum / total } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBaseline {
    pub semantic: PcaProjection,
    pub covariate: PcaProjection,
}

/// Separate PCA fits for the semantic direction (variation across labels at a fixed
/// prompt) and the covariate direction (variation across prompts at a fixed label).
pub fn pca_baseline_decompose(
    spec: &TripletCorpusSpec,
    text_features: &EmbeddingStore,
    variance_fraction: f64,
) -> Result<PcaBaseline> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::validation(format!(
            "variance_fraction {variance_fraction} outside (0, 1]"
        )));
    }
    spec.validate()?;
    let n_labels = spec.semantic_labels.len();
    let n_prompts = spec.covariate_prompts.len();
    let l = text_features.dim();
    let mut grid = Vec::with_capacity(n_labels * n_prompts);
    for a in 0..n_labels {
        for p in 0..n_prompts {
            let text = spec.rendering(a, p)?;
            let rec = text_features
                .get(&text)
                .ok_or_else(|| Error::validation(format!("no text feature for rendering {text:?}")))?;
            grid.push(rec.vector.iter().map(|&x| x as f64).collect::<Vec<f64>>());
        }
    }
    let at = |a: usize, p: usize| &grid[a * n_prompts + p];

    let mut semantic_rows = Vec::with_capacity(grid.len());
    for p in 0..n_prompts {
        let mut mean = vec![0.0; l];
        for a in 0..n_labels {
            for (m, x) in mean.iter_mut().zip(at(a, p)) {
                *m += x / n_labels as f64;
            }
        }
        for a in 0..n_labels {
            semantic_rows.push(at(a, p).iter().zip(&mean).map(|(x, m)| x - m).collect());
        }
    }
    let mut covariate_rows = Vec::with_capacity(grid.len());
    for a in 0..n_labels {
        let mut mean = vec![0.0; l];
        for p in 0..n_prompts {
            for (m, x) in mean.iter_mut().zip(at(a, p)) {
                *m += x / n_prompts as f64;
            }
        }
        for p in 0..n_prompts {
            covariate_rows.push(at(a, p).iter().zip(&mean).map(|(x, m)| x - m).collect());
        }
    }
    Ok(PcaBaseline {
        semantic: pca_fit(&semantic_rows, variance_fraction)?,
        covariate: pca_fit(&covariate_rows, variance_fraction)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed_store::{EmbeddingRecord, Modality};

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = dot_f64(v, v).sqrt() as f32;
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cosine_distance_examples() {
        let v = [0.3f32, -1.2, 2.0];
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-12);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn decompose_examples() {
        let f = [1.0f32, 2.0, 3.0, 4.0];
        let (s, c) = DecompositionMatrix::identity(4).unwrap().decompose(&f).unwrap();
        assert_eq!((s, c), (vec![1.0, 2.0], vec![3.0, 4.0]));

        // swaps the two halves: (f·W)_j = f_{(j+2) mod 4}
        let mut w = vec![0.0f32; 16];
        for j in 0..4 {
            w[((j + 2) % 4) * 4 + j] = 1.0;
        }
        let swap = DecompositionMatrix::new(4, w).unwrap();
        let (s, c) = swap.decompose(&f).unwrap();
        assert_eq!((s, c), (vec![3.0, 4.0], vec![1.0, 2.0]));
        assert!(swap.decompose(&[1.0, 2.0]).is_err());
        assert!(DecompositionMatrix::identity(3).is_err());
    }

    #[test]
    fn orth_loss_closed_forms() {
        let t = TextTriplet::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let id = DecompositionMatrix::identity(2).unwrap();
        assert_eq!(triplet_and_orth_losses(&t, &id, 0.2).unwrap().orth, 0.0);
        let two = DecompositionMatrix::new(2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(triplet_and_orth_losses(&t, &two, 0.2).unwrap().orth, 18.0);
    }

    #[test]
    fn hinge_clamps_satisfied_margin() {
        // l = 4; halves are 2-d. st_sem = (1,0); cs_sem at cosine distance 0.1, ss_sem at 0.5.
        let ang = |d: f64| ((1.0 - d).acos()) as f32;
        let (a1, a2) = (ang(0.1), ang(0.5));
        let st = unit(&[1.0, 0.0, 1.0, 0.0]);
        let cs = unit(&[a1.cos(), a1.sin(), 0.0, 1.0]);
        let ss = unit(&[a2.cos(), a2.sin(), 1.0, 0.0]);
        let t = TextTriplet::new(st, ss, cs).unwrap();
        let id = DecompositionMatrix::identity(4).unwrap();
        let losses = triplet_and_orth_losses(&t, &id, 0.2).unwrap();
        assert_eq!(losses.sem, 0.0);
        // cov: d(st,ss) = 0, d(st,cs) = 1  ->  0 - 1 + 0.2 < 0
        assert_eq!(losses.cov, 0.0);

        let unhinged = LaidObjective {
            alpha: 0.2,
            orth_weight: 1.0,
            hinge: false,
        };
        let w: Vec<f64> = id.as_slice().iter().map(|&x| x as f64).collect();
        let c = unhinged.losses(&w, 4, &[t]);
        assert!((c.sem - (0.1 - 0.5 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn zero_margin_identical_contrasts_give_zero_loss() {
        let st = unit(&[1.0, 0.2, 0.3, -0.4]);
        let other = unit(&[0.1, 1.0, -0.3, 0.2]);
        let t = TextTriplet::new(st, other.clone(), other).unwrap();
        let obj = LaidObjective {
            alpha: 0.0,
            orth_weight: 1.0,
            hinge: true,
        };
        let w: Vec<f64> = DecompositionMatrix::identity(4).unwrap().as_slice().iter().map(|&x| x as f64).collect();
        let c = obj.losses(&w, 4, &[t]);
        assert_eq!((c.sem, c.cov), (0.0, 0.0));
    }

    #[test]
    fn triplet_requires_unit_vectors() {
        assert!(TextTriplet::new(vec![2.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn render_template_placeholder_count() {
        assert_eq!(render_template("a photo of a {object}.", "cat").unwrap(), "a photo of a cat.");
        assert!(render_template("no placeholder", "cat").is_err());
        assert!(render_template("{object} and {object}", "cat").is_err());
    }

    fn toy_store(spec: &TripletCorpusSpec) -> EmbeddingStore {
        let mut recs = Vec::new();
        for (k, text) in spec.renderings().unwrap().into_iter().enumerate() {
            let mut v = vec![0.1f32; 4];
            v[k % 4] += 1.0;
            v[(k / 4) % 4] += 0.5;
            recs.push(EmbeddingRecord::new(text, None, Modality::Text, v));
        }
        EmbeddingStore::new(4, recs).unwrap()
    }

    #[test]
    fn triplet_corpus_construction_rule() {
        let spec = TripletCorpusSpec {
            semantic_labels: vec!["cat".into(), "dog".into()],
            covariate_prompts: vec!["a photo of a {object}.".into(), "a sketch of a {object}.".into()],
            pairing_seed: 11,
            triplets_per_text: 1,
        };
        let store = toy_store(&spec);
        let corpus = build_triplet_corpus(&spec, &store).unwrap();
        assert_eq!(corpus.triplets.len(), 4);
        let mut standards: Vec<_> = corpus.sources.iter().map(|s| s.standard).collect();
        standards.sort();
        assert_eq!(standards, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        for s in &corpus.sources {
            assert_eq!(s.semantic_shift.1, s.standard.1);
            assert_ne!(s.semantic_shift.0, s.standard.0);
            assert_eq!(s.covariate_shift.0, s.standard.0);
            assert_ne!(s.covariate_shift.1, s.standard.1);
        }
        assert_eq!(build_triplet_corpus(&spec, &store).unwrap(), corpus);

        let one_label = TripletCorpusSpec {
            semantic_labels: vec!["cat".into()],
            ..spec.clone()
        };
        assert!(build_triplet_corpus(&one_label, &store).is_err());

        let missing = EmbeddingStore::new(4, store.records()[..3].to_vec()).unwrap();
        let err = build_triplet_corpus(&spec, &missing).unwrap_err().to_string();
        assert!(err.contains("a sketch of a dog."), "{err}");
    }

    #[test]
    fn w_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.isw");
        let w = DecompositionMatrix::new(2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        w.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"ISW1");
        assert_eq!(bytes.len(), 8 + 16);
        let back = DecompositionMatrix::load(&path).unwrap();
        assert_eq!(back.as_slice(), w.as_slice());
        assert_eq!(back.fingerprint(), w.fingerprint());
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(DecompositionMatrix::load(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn zero_shot_exact_match_and_label_range() {
        let classes = EmbeddingStore::new(
            2,
            vec![
                EmbeddingRecord::new("c0", Some(0), Modality::Text, vec![1.0, 0.0]),
                EmbeddingRecord::new("c1", Some(1), Modality::Text, vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let images = EmbeddingStore::new(
            2,
            vec![
                EmbeddingRecord::new("i0", Some(0), Modality::Image, vec![1.0, 0.0]),
                EmbeddingRecord::new("i1", Some(1), Modality::Image, vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        let w = DecompositionMatrix::identity(2).unwrap();
        let acc = zero_shot_eval(&images, &classes, &w, FeaturePart::Full).unwrap();
        assert_eq!(acc.top1, 1.0);
        assert_eq!(acc.top5, 1.0);

        let bad = EmbeddingStore::new(
            2,
            vec![EmbeddingRecord::new("i", Some(2), Modality::Image, vec![1.0, 0.0])],
        )
        .unwrap();
        assert!(zero_shot_eval(&bad, &classes, &w, FeaturePart::Full).is_err());
    }

    #[test]
    fn pca_rank_bound_and_fraction_bounds() {
        // points in span{e1, e2} of R^5
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                vec![t.sin() * 3.0, t.cos(), 0.0, 0.0, 0.0]
            })
            .collect();
        let p = pca_fit(&rows, 0.9).unwrap();
        assert!(p.k() <= 2);
        let all = pca_fit(&rows, 1.0).unwrap();
        assert_eq!(all.k(), 2);
        assert!(pca_fit(&rows, 0.0).is_err());
        assert!(pca_fit(&rows, 1.5).is_err());
    }
}
