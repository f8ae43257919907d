//! Post-hoc OOD scores computed from classifier outputs.
//!
//! Every score is oriented so that a higher value means "more in-distribution".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed_store::ClassifierOutputs;
use crate::error::{Error, Result};
use crate::knn::{KnnIndex, Metric};
use crate::matrix::{dot_f64, Matrix};
use crate::shift::percentile_sorted;

pub const DEFAULT_ODIN_TEMPERATURE: f64 = 1000.0;
pub const DEFAULT_KNN_K: usize = 50;
pub const DEFAULT_DICE_SPARSITY: f64 = 0.7;
pub const DEFAULT_ASH_PERCENTILE: f64 = 0.9;
pub const DEFAULT_RANKFEAT_BATCH: usize = 256;

pub const POWER_ITERATION_TOL: f64 = 1e-6;
pub const POWER_ITERATION_MAX_ITERS: usize = 500;
const POWER_ITERATION_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub scorer_name: String,
    pub params: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ScoreHeader {
    scorer_name: String,
    params: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    id: String,
    score: f64,
}

impl ScoreVector {
    fn build(ids: Vec<String>, scores: Vec<f64>, scorer_name: &str, params: BTreeMap<String, Value>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::numerical(format!(
                "{scorer_name} produced a non-finite score for {:?}",
                ids[i]
            )));
        }
        Ok(Self {
            ids,
            scores,
            scorer_name: scorer_name.to_string(),
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = ScoreHeader {
            scorer_name: self.scorer_name.clone(),
            params: self.params.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for (id, &score) in self.ids.iter().zip(&self.scores) {
            serde_json::to_writer(&mut w, &ScoreLine { id: id.clone(), score }).map_err(|e| Error::json(path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::validation(format!("{} is empty", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ScoreHeader = serde_json::from_str(&first).map_err(|e| Error::json(path, e))?;
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: ScoreLine = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
            ids.push(l.id);
            scores.push(l.score);
        }
        Ok(Self {
            ids,
            scores,
            scorer_name: header.scorer_name,
            params: header.params,
        })
    }
}

// ---------------------------------------------------------------------------
// Row statistics
// ---------------------------------------------------------------------------

fn check_logits(logits: &Matrix) -> Result<()> {
    if logits.cols() < 2 {
        return Err(Error::validation("logit-based scores need at least two classes"));
    }
    if !logits.all_finite() {
        return Err(Error::numerical("non-finite logits"));
    }
    Ok(())
}

/// Largest softmax probability of `z / temperature`.
pub fn max_softmax(z: &[f64], temperature: f64) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = z.iter().map(|&v| ((v - m) / temperature).exp()).sum();
    1.0 / denom
}

/// `T · log Σ exp(z / T)`
pub fn energy(z: &[f64], temperature: f64) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| ((v - m) / temperature).exp()).sum();
    m + temperature * s.ln()
}

fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn widen(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&x| x as f64).collect()
}

/// `W·f + b` for one feature row.
pub fn head_logits(feature: &[f32], weights: &Matrix, bias: &[f32]) -> Vec<f64> {
    weights
        .iter_rows()
        .zip(bias)
        .map(|(w, &b)| dot_f64(w, feature) + b as f64)
        .collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::validation(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn param_map<const N: usize>(entries: [(&str, Value); N]) -> BTreeMap<String, Value> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

// ---------------------------------------------------------------------------
// Logit scores
// ---------------------------------------------------------------------------

pub fn msp_score(ids: &[String], logits: &Matrix) -> Result<ScoreVector> {
    check_logits(logits)?;
    let scores = logits.iter_rows().map(|r| max_softmax(&widen(r), 1.0)).collect();
    ScoreVector::build(ids.to_vec(), scores, "msp", BTreeMap::new())
}

/// MSP on temperature-scaled logits. Input perturbation is not applied.
pub fn odin_t_score(ids: &[String], logits: &Matrix, temperature: f64) -> Result<ScoreVector> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    let scores = logits.iter_rows().map(|r| max_softmax(&widen(r), temperature)).collect();
    ScoreVector::build(
        ids.to_vec(),
        scores,
        "odin",
        param_map([("temperature", temperature.into()), ("input_perturbation", false.into())]),
    )
}

pub fn energy_score(ids: &[String], logits: &Matrix, temperature: f64) -> Result<ScoreVector> {
    check_temperature(temperature)?;
    if !logits.all_finite() {
        return Err(Error::numerical("non-finite logits"));
    }
    let scores = logits.iter_rows().map(|r| energy(&widen(r), temperature)).collect();
    ScoreVector::build(ids.to_vec(), scores, "energy", param_map([("temperature", temperature.into())]))
}

// ---------------------------------------------------------------------------
// Mahalanobis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MdsModel {
    /// `C × d`
    pub class_means: Vec<Vec<f64>>,
    /// Inverse of the regularized pooled covariance, `d × d`.
    pub shared_precision: DMatrix<f64>,
    pub reg_epsilon: f64,
}

impl MdsModel {
    pub fn new(class_means: Vec<Vec<f64>>, shared_precision: DMatrix<f64>, reg_epsilon: f64) -> Result<Self> {
        let d = shared_precision.nrows();
        if shared_precision.ncols() != d {
            return Err(Error::validation("precision matrix must be square"));
        }
        if class_means.is_empty() || class_means.iter().any(|m| m.len() != d) {
            return Err(Error::validation("class means must be non-empty and match the precision size"));
        }
        Ok(Self {
            class_means,
            shared_precision,
            reg_epsilon,
        })
    }

    /// Smallest squared Mahalanobis distance to a class mean.
    pub fn min_distance(&self, x: &[f32]) -> f64 {
        let d = x.len();
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; d];
        for mu in &self.class_means {
            for ((t, &xi), &mi) in diff.iter_mut().zip(x).zip(mu) {
                *t = xi as f64 - mi;
            }
            let mut q = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += self.shared_precision[(i, j)] * diff[j];
                }
                q += diff[i] * row;
            }
            best = best.min(q);
        }
        best
    }
}

/// Class means and the shared (pooled, `1/N`-normalized) covariance, regularized by
/// `reg_epsilon · I`. With `reg_epsilon = None` the default `1e-6 · trace(Σ) / d` is used.
pub fn mds_fit(features: &Matrix, labels: &[Option<u32>], reg_epsilon: Option<f64>) -> Result<MdsModel> {
    if labels.len() != features.rows() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            actual: labels.len(),
        });
    }
    let d = features.cols();
    let labels: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.map(|c| c as usize).ok_or_else(|| Error::validation(format!("training sample {i} has no label"))))
        .collect::<Result<_>>()?;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![vec![0.0f64; d]; n_classes];
    for (row, &c) in features.iter_rows().zip(&labels) {
        counts[c] += 1;
        for (m, &x) in means[c].iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::validation(format!(
            "class {c} has {} training samples; Mahalanobis fitting needs at least 2",
            counts[c]
        )));
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        for v in m.iter_mut() {
            *v /= n as f64;
        }
    }
    let n = features.rows() as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (row, &c) in features.iter_rows().zip(&labels) {
        for ((t, &x), &m) in diff.iter_mut().zip(row).zip(&means[c]) {
            *t = x as f64 - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += diff[i] * diff[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eps = reg_epsilon.unwrap_or_else(|| 1e-6 * cov.trace() / d as f64);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numerical("pooled covariance is singular even after regularization"))?;
    let precision = chol.inverse();
    MdsModel::new(means, precision, eps)
}

/// `−min_c (x − μ_c)ᵀ Σ⁻¹ (x − μ_c)`
pub fn mds_score(ids: &[String], model: &MdsModel, features: &Matrix) -> Result<ScoreVector> {
    if features.cols() != model.shared_precision.nrows() {
        return Err(Error::DimensionMismatch {
            expected: model.shared_precision.nrows(),
            actual: features.cols(),
        });
    }
    let scores = (0..features.rows())
        .into_par_iter()
        .map(|i| -model.min_distance(features.row(i)))
        .collect();
    ScoreVector::build(ids.to_vec(), scores, "mds", param_map([("reg_epsilon", model.reg_epsilon.into())]))
}

// ---------------------------------------------------------------------------
// KNN
// ---------------------------------------------------------------------------

fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        crate::embed_store::normalize_in_place(out.row_mut(i))
            .map_err(|_| Error::numerical(format!("feature row {i} has zero norm")))?;
    }
    Ok(out)
}

/// Normalized training features for the KNN score.
#[derive(Clone, Debug)]
pub struct KnnModel {
    index: KnnIndex,
}

impl KnnModel {
    pub fn fit(train_features: &Matrix) -> Result<Self> {
        Ok(Self {
            index: KnnIndex::new(normalize_rows(train_features)?, Metric::Euclidean)?,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// `−‖x̂ − ẑ_(k)‖` with `ẑ_(k)` the k-th nearest normalized training feature.
pub fn knn_score(ids: &[String], model: &KnnModel, test_features: &Matrix, k: usize) -> Result<ScoreVector> {
    if k == 0 || k > model.len() {
        return Err(Error::validation(format!(
            "k={k} out of range for {} training features",
            model.len()
        )));
    }
    let test = normalize_rows(test_features)?;
    let dists = model.index.kth_distances(&test, k)?;
    let scores = dists.into_iter().map(|d| -d).collect();
    ScoreVector::build(ids.to_vec(), scores, "knn", param_map([("k", k.into())]))
}

// ---------------------------------------------------------------------------
// GradNorm
// ---------------------------------------------------------------------------

/// L1 norm of `∂ KL(u ‖ softmax(z/T)) / ∂W` for one sample, in closed form:
/// the gradient is `(p − 1/C) fᵀ / T`, whose entrywise L1 norm factorizes.
pub fn gradnorm_single(feature: &[f32], weights: &Matrix, bias: &[f32], temperature: f64) -> f64 {
    let z = head_logits(feature, weights, bias);
    let p = softmax(&z, temperature);
    let c = p.len() as f64;
    let p_term: f64 = p.iter().map(|&pi| (pi - 1.0 / c).abs()).sum();
    let f_term: f64 = feature.iter().map(|&x| (x as f64).abs()).sum();
    p_term * f_term / temperature
}

pub fn gradnorm_score(
    ids: &[String],
    features: &Matrix,
    weights: &Matrix,
    bias: &[f32],
    temperature: f64,
) -> Result<ScoreVector> {
    check_temperature(temperature)?;
    check_head(features, weights, bias)?;
    let scores = features
        .iter_rows()
        .map(|f| gradnorm_single(f, weights, bias, temperature))
        .collect();
    ScoreVector::build(
        ids.to_vec(),
        scores,
        "gradnorm",
        param_map([("temperature", temperature.into()), ("target_loss", "kl_to_uniform".into())]),
    )
}

fn check_head(features: &Matrix, weights: &Matrix, bias: &[f32]) -> Result<()> {
    if weights.cols() != features.cols() {
        return Err(Error::DimensionMismatch {
            expected: weights.cols(),
            actual: features.cols(),
        });
    }
    if bias.len() != weights.rows() {
        return Err(Error::DimensionMismatch {
            expected: weights.rows(),
            actual: bias.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// DICE
// ---------------------------------------------------------------------------

/// Mean ID training feature, the reference for weight contributions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceModel {
    pub feature_mean: Vec<f64>,
}

impl DiceModel {
    pub fn fit(train_features: &Matrix) -> Result<Self> {
        if train_features.rows() == 0 {
            return Err(Error::validation("DICE needs at least one training feature"));
        }
        let n = train_features.rows() as f64;
        let mut mean = vec![0.0; train_features.cols()];
        for r in train_features.iter_rows() {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64 / n;
            }
        }
        Ok(Self { feature_mean: mean })
    }

    /// Copy of `weights` with the `floor(p · C · d)` lowest-contribution entries zeroed,
    /// where the contribution of `w_cj` is `w_cj · mean_j`. Ties break by flat index.
    pub fn masked_weights(&self, weights: &Matrix, sparsity: f64) -> Result<Matrix> {
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::validation(format!("DICE sparsity {sparsity} outside [0, 1)")));
        }
        if self.feature_mean.len() != weights.cols() {
            return Err(Error::DimensionMismatch {
                expected: weights.cols(),
                actual: self.feature_mean.len(),
            });
        }
        let total = weights.rows() * weights.cols();
        let n_masked = (sparsity * total as f64).floor() as usize;
        let mut out = weights.clone();
        if n_masked == 0 {
            return Ok(out);
        }
        let d = weights.cols();
        let mut order: Vec<(f64, usize)> = weights
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &w)| (w as f64 * self.feature_mean[i % d], i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..n_masked] {
            out.set(i / d, i % d, 0.0);
        }
        Ok(out)
    }
}

pub fn dice_score(
    ids: &[String],
    model: Option<&DiceModel>,
    features: &Matrix,
    weights: &Matrix,
    bias: &[f32],
    sparsity: f64,
) -> Result<ScoreVector> {
    let model = model.ok_or_else(|| Error::validation("DICE needs the mean ID training feature (fit first)"))?;
    check_head(features, weights, bias)?;
    let masked = model.masked_weights(weights, sparsity)?;
    let scores = features
        .iter_rows()
        .map(|f| energy(&head_logits(f, &masked, bias), 1.0))
        .collect();
    ScoreVector::build(ids.to_vec(), scores, "dice", param_map([("sparsity", sparsity.into())]))
}

// ---------------------------------------------------------------------------
// ASH
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AshVariant {
    Prune,
    Scale,
}

/// Zeroes activations below the sample's `percentile` quantile (linear interpolation);
/// `Scale` then rescales the survivors to restore the original L1 sum.
pub fn ash_activation(feature: &[f32], percentile: f64, variant: AshVariant) -> Result<Vec<f32>> {
    if !(0.0..1.0).contains(&percentile) {
        return Err(Error::validation(format!("ASH percentile {percentile} outside [0, 1)")));
    }
    if variant == AshVariant::Scale && feature.iter().any(|&x| x < 0.0) {
        return Err(Error::validation("ASH scaling needs non-negative (post-ReLU) activations"));
    }
    let mut sorted: Vec<f64> = feature.iter().map(|&x| x as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = percentile_sorted(&sorted, percentile);
    let before: f64 = feature.iter().map(|&x| (x as f64).abs()).sum();
    let mut out: Vec<f32> = feature
        .iter()
        .map(|&x| if (x as f64) < threshold { 0.0 } else { x })
        .collect();
    if variant == AshVariant::Scale {
        let after: f64 = out.iter().map(|&x| (x as f64).abs()).sum();
        if after > 0.0 && after != before {
            let s = before / after;
            for x in &mut out {
                *x = (*x as f64 * s) as f32;
            }
        }
    }
    Ok(out)
}

pub fn ash_score(
    ids: &[String],
    features: &Matrix,
    weights: &Matrix,
    bias: &[f32],
    percentile: f64,
    variant: AshVariant,
) -> Result<ScoreVector> {
    check_head(features, weights, bias)?;
    let scores = features
        .iter_rows()
        .map(|f| Ok(energy(&head_logits(&ash_activation(f, percentile, variant)?, weights, bias), 1.0)))
        .collect::<Result<Vec<f64>>>()?;
    let variant_name = match variant {
        AshVariant::Prune => "prune",
        AshVariant::Scale => "scale",
    };
    ScoreVector::build(
        ids.to_vec(),
        scores,
        "ash",
        param_map([("percentile", percentile.into()), ("variant", variant_name.into())]),
    )
}

// ---------------------------------------------------------------------------
// RankFeat
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    /// Left singular vector, length = rows.
    pub u: Vec<f64>,
    /// Right singular vector, length = cols.
    pub v: Vec<f64>,
    pub iterations: usize,
}

/// Top singular triplet by power iteration on `XᵀX`, from a fixed pseudo-random start.
/// Converged when the eigen-residual `‖XᵀX v − σ² v‖ ≤ tol · σ²`.
pub fn top_singular_triplet(x: &Matrix, tol: f64, max_iters: usize) -> Result<SingularTriplet> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return Err(Error::validation("power iteration on an empty matrix"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize_f64(&mut v);

    let xv = |v: &[f64]| -> Vec<f64> {
        x.iter_rows()
            .map(|r| r.iter().zip(v).map(|(&a, b)| a as f64 * b).sum())
            .collect()
    };
    let xtu = |u: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (r, &ui) in x.iter_rows().zip(u) {
            for (o, &a) in out.iter_mut().zip(r) {
                *o += a as f64 * ui;
            }
        }
        out
    };

    let mut last_residual = f64::NAN;
    for it in 1..=max_iters {
        let u = xv(&v);
        let w = xtu(&u);
        let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda <= 0.0 {
            if w.iter().all(|&a| a == 0.0) {
                return Err(Error::numerical("power iteration on a zero matrix"));
            }
        }
        let residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        last_residual = residual / lambda.abs().max(f64::MIN_POSITIVE);
        if last_residual <= tol {
            let sigma = lambda.sqrt();
            let mut u = u;
            normalize_f64(&mut u);
            return Ok(SingularTriplet {
                sigma,
                u,
                v,
                iterations: it,
            });
        }
        v = w;
        normalize_f64(&mut v);
    }
    Err(Error::numerical(format!(
        "power iteration did not converge in {max_iters} iterations (relative residual {last_residual:.3e}, tolerance {tol:.1e})"
    )))
}

fn normalize_f64(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// `X − σ₁ u₁ v₁ᵀ`
pub fn remove_rank1(x: &Matrix, top: &SingularTriplet) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let su = top.sigma * top.u[i];
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (*o as f64 - su * top.v[j]) as f32;
        }
    }
    out
}

/// Max logit after removing the batch's dominant rank-1 component from the features.
/// The batch is coupled: rows are processed in consecutive chunks of `batch_size`.
pub fn rankfeat_score(
    ids: &[String],
    features: &Matrix,
    weights: &Matrix,
    bias: &[f32],
    batch_size: usize,
) -> Result<ScoreVector> {
    check_head(features, weights, bias)?;
    if batch_size < 2 {
        return Err(Error::validation("RankFeat batch size must be at least 2"));
    }
    if features.rows() < 2 {
        return Err(Error::validation("RankFeat needs a batch of at least two samples"));
    }
    let n = features.rows();
    // fold a trailing single row into the previous batch
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end == 1 {
            end = n;
        }
        bounds.push((start, end));
        start = end;
    }
    let per_batch: Vec<Vec<f64>> = bounds
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let batch = features.select_rows(&idx);
            let top = top_singular_triplet(&batch, POWER_ITERATION_TOL, POWER_ITERATION_MAX_ITERS)?;
            let residual = remove_rank1(&batch, &top);
            Ok(residual
                .iter_rows()
                .map(|f| {
                    head_logits(f, weights, bias)
                        .into_iter()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    ScoreVector::build(
        ids.to_vec(),
        per_batch.into_iter().flatten().collect(),
        "rankfeat",
        param_map([
            ("batch_size", batch_size.into()),
            ("tol", POWER_ITERATION_TOL.into()),
            ("max_iters", POWER_ITERATION_MAX_ITERS.into()),
            ("head", "max_logit".into()),
        ]),
    )
}

// ---------------------------------------------------------------------------
// Configured scorers
// ---------------------------------------------------------------------------

/// A scorer and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ScorerSpec {
    Msp,
    Odin {
        #[serde(default = "d_odin_t")]
        temperature: f64,
    },
    Energy {
        #[serde(default = "d_one")]
        temperature: f64,
    },
    Mds {
        #[serde(default)]
        reg_epsilon: Option<f64>,
    },
    Knn {
        #[serde(default = "d_knn_k")]
        k: usize,
    },
    Gradnorm {
        #[serde(default = "d_one")]
        temperature: f64,
    },
    Dice {
        #[serde(default = "d_dice_p")]
        sparsity: f64,
    },
    Ash {
        #[serde(default = "d_ash_p")]
        percentile: f64,
        #[serde(default = "d_ash_variant")]
        variant: AshVariant,
    },
    Rankfeat {
        #[serde(default = "d_rank_batch")]
        batch_size: usize,
    },
}

fn d_odin_t() -> f64 {
    DEFAULT_ODIN_TEMPERATURE
}
fn d_one() -> f64 {
    1.0
}
fn d_knn_k() -> usize {
    DEFAULT_KNN_K
}
fn d_dice_p() -> f64 {
    DEFAULT_DICE_SPARSITY
}
fn d_ash_p() -> f64 {
    DEFAULT_ASH_PERCENTILE
}
fn d_ash_variant() -> AshVariant {
    AshVariant::Scale
}
fn d_rank_batch() -> usize {
    DEFAULT_RANKFEAT_BATCH
}

impl ScorerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ScorerSpec::Msp => "msp",
            ScorerSpec::Odin { .. } => "odin",
            ScorerSpec::Energy { .. } => "energy",
            ScorerSpec::Mds { .. } => "mds",
            ScorerSpec::Knn { .. } => "knn",
            ScorerSpec::Gradnorm { .. } => "gradnorm",
            ScorerSpec::Dice { .. } => "dice",
            ScorerSpec::Ash { .. } => "ash",
            ScorerSpec::Rankfeat { .. } => "rankfeat",
        }
    }

    /// Default-parameter spec for a method name.
    pub fn from_name(method: &str) -> Result<Self> {
        Self::from_name_and_params(method, &[])
    }

    /// Spec from a method name and `key=value` overrides.
    pub fn from_name_and_params(method: &str, params: &[(String, String)]) -> Result<Self> {
        let mut obj = serde_json::Map::new();
        obj.insert("method".into(), Value::String(method.to_ascii_lowercase()));
        for (k, v) in params {
            let value = serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.clone()));
            obj.insert(k.clone(), value);
        }
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| Error::validation(format!("bad scorer spec {method:?} {params:?}: {e}")))
    }

    pub fn needs_fit(&self) -> bool {
        matches!(self, ScorerSpec::Mds { .. } | ScorerSpec::Knn { .. } | ScorerSpec::Dice { .. })
    }

    /// Fits any ID-training statistics the scorer needs.
    pub fn fit(&self, train: Option<&ClassifierOutputs>) -> Result<FittedScorer> {
        let need_train = || {
            train.ok_or_else(|| {
                Error::validation(format!("{} needs ID training outputs to fit", self.name()))
            })
        };
        let state = match self {
            ScorerSpec::Mds { reg_epsilon } => {
                let t = need_train()?;
                FitState::Mds(mds_fit(&t.features, &t.labels, *reg_epsilon)?)
            }
            ScorerSpec::Knn { .. } => FitState::Knn(KnnModel::fit(&need_train()?.features)?),
            ScorerSpec::Dice { .. } => FitState::Dice(DiceModel::fit(&need_train()?.features)?),
            _ => FitState::None,
        };
        Ok(FittedScorer {
            spec: self.clone(),
            state,
        })
    }
}

#[derive(Clone, Debug)]
enum FitState {
    None,
    Mds(MdsModel),
    Knn(KnnModel),
    Dice(DiceModel),
}

/// A scorer ready to score classifier outputs.
#[derive(Clone, Debug)]
pub struct FittedScorer {
    spec: ScorerSpec,
    state: FitState,
}

impl FittedScorer {
    pub fn spec(&self) -> &ScorerSpec {
        &self.spec
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    pub fn score(&self, out: &ClassifierOutputs) -> Result<ScoreVector> {
        let ids = &out.ids;
        match (&self.spec, &self.state) {
            (ScorerSpec::Msp, _) => msp_score(ids, &out.logits),
            (ScorerSpec::Odin { temperature }, _) => odin_t_score(ids, &out.logits, *temperature),
            (ScorerSpec::Energy { temperature }, _) => energy_score(ids, &out.logits, *temperature),
            (ScorerSpec::Mds { .. }, FitState::Mds(m)) => mds_score(ids, m, &out.features),
            (ScorerSpec::Knn { k }, FitState::Knn(m)) => knn_score(ids, m, &out.features, *k),
            (ScorerSpec::Gradnorm { temperature }, _) => {
                let (w, b) = out.head("gradnorm")?;
                gradnorm_score(ids, &out.features, w, b, *temperature)
            }
            (ScorerSpec::Dice { sparsity }, FitState::Dice(m)) => {
                let (w, b) = out.head("dice")?;
                dice_score(ids, Some(m), &out.features, w, b, *sparsity)
            }
            (ScorerSpec::Ash { percentile, variant }, _) => {
                let (w, b) = out.head("ash")?;
                ash_score(ids, &out.features, w, b, *percentile, *variant)
            }
            (ScorerSpec::Rankfeat { batch_size }, _) => {
                let (w, b) = out.head("rankfeat")?;
                rankfeat_score(ids, &out.features, w, b, *batch_size)
            }
            (spec, _) => Err(Error::validation(format!("{} was not fitted", spec.name()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn logits(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows[0].len(), rows).unwrap()
    }

    #[test]
    fn msp_examples() {
        let s = msp_score(&ids(3), &logits(&[&[0.0, 0.0, 0.0, 0.0], &[100.0, 0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, f32::MIN / 1e30]]))
            .unwrap();
        assert!((s.scores[0] - 0.25).abs() < 1e-15);
        assert!((s.scores[1] - 1.0).abs() < 1e-12);
        let e = std::f64::consts::E;
        let expect = e.powi(3) / (e + e * e + e.powi(3));
        assert!((s.scores[2] - expect).abs() < 1e-12);
        assert!((expect - 0.66524).abs() < 1e-5);
        assert!(msp_score(&ids(1), &logits(&[&[1.0]])).is_err());
        assert!(msp_score(&ids(1), &logits(&[&[f32::NAN, 1.0]])).is_err());
    }

    #[test]
    fn odin_examples() {
        let l = logits(&[&[2.0, 0.0], &[1.0, -3.0]]);
        let msp = msp_score(&ids(2), &l).unwrap();
        assert_eq!(odin_t_score(&ids(2), &l, 1.0).unwrap().scores, msp.scores);
        let two = odin_t_score(&ids(2), &l, 2.0).unwrap();
        assert!((two.scores[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let hot = odin_t_score(&ids(2), &l, 1e9).unwrap();
        assert!((hot.scores[0] - 0.5).abs() < 1e-8);
        assert!(odin_t_score(&ids(2), &l, 0.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let l = logits(&[&[0.0, 0.0], &[1.0, 2.0]]);
        let s = energy_score(&ids(2), &l, 1.0).unwrap();
        assert!((s.scores[0] - 2f64.ln()).abs() < 1e-15);
        let l3 = logits(&[&[1.0, 2.0, 3.0]]);
        let e = std::f64::consts::E;
        let s3 = energy_score(&ids(1), &l3, 1.0).unwrap();
        assert!((s3.scores[0] - (e + e * e + e.powi(3)).ln()).abs() < 1e-12);
        assert!((s3.scores[0] - 3.40761).abs() < 1e-5);
    }

    #[test]
    fn mds_closed_forms() {
        let means = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let model = MdsModel::new(means, DMatrix::identity(2, 2), 0.0).unwrap();
        let f = Matrix::from_rows(2, &[[0.0f32, 0.0], [1.0, 0.0]]).unwrap();
        let s = mds_score(&ids(2), &model, &f).unwrap();
        assert_eq!(s.scores, vec![-1.0, 0.0]);
    }

    #[test]
    fn mds_fit_errors() {
        let f = Matrix::from_rows(2, &[[0.0f32, 1.0], [1.0, 0.0], [2.0, 2.0]]).unwrap();
        assert!(mds_fit(&f, &[Some(0), Some(0), Some(1)], None).is_err());
        assert!(mds_fit(&f, &[Some(0), None, Some(0)], None).is_err());
        let zero = Matrix::zeros(4, 2);
        assert!(matches!(
            mds_fit(&zero, &[Some(0), Some(0), Some(1), Some(1)], None),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn knn_examples() {
        let train = Matrix::from_rows(3, &[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let model = KnnModel::fit(&train).unwrap();
        let test = Matrix::from_rows(3, &[[2.0f32, 0.0, 0.0]]).unwrap();
        assert_eq!(knn_score(&ids(1), &model, &test, 1).unwrap().scores[0], 0.0);
        let s2 = knn_score(&ids(1), &model, &test, 2).unwrap().scores[0];
        assert!((s2 + 2f64.sqrt()).abs() < 1e-7);
        assert!(knn_score(&ids(1), &model, &test, 3).is_err());
    }

    #[test]
    fn gradnorm_uniform_logits_give_zero() {
        let f = Matrix::from_rows(2, &[[1.0f32, 2.0]]).unwrap();
        let w = Matrix::from_rows(2, &[[0.0f32, 0.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        let s = gradnorm_score(&ids(1), &f, &w, &[0.5, 0.5, 0.5], 1.0).unwrap();
        assert_eq!(s.scores[0], 0.0);
    }

    #[test]
    fn gradnorm_linear_in_feature_l1_at_fixed_p() {
        // zero weights fix p = softmax(b) independent of f
        let w = Matrix::zeros(3, 4);
        let b = [1.0f32, 0.0, -1.0];
        let f1 = [0.5f32, 0.0, 1.0, 0.25];
        let f2: Vec<f32> = f1.iter().map(|x| x * 2.0).collect();
        let s1 = gradnorm_single(&f1, &w, &b, 1.0);
        let s2 = gradnorm_single(&f2, &w, &b, 1.0);
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
    }

    #[test]
    fn dice_one_hot_contribution_masks_known_half() {
        // mean feature = (1, 0): column 0 weights carry all contribution.
        let model = DiceModel {
            feature_mean: vec![1.0, 0.0],
        };
        let w = Matrix::from_rows(2, &[[3.0f32, 5.0], [4.0, 6.0]]).unwrap();
        let masked = model.masked_weights(&w, 0.5).unwrap();
        // contributions: 3, 0, 4, 0 -> the two zeros (column 1) are masked
        assert_eq!(masked.as_slice(), &[3.0, 0.0, 4.0, 0.0]);
        assert!(model.masked_weights(&w, 1.0).is_err());
        assert!(dice_score(&ids(1), None, &Matrix::zeros(1, 2), &w, &[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn ash_examples() {
        assert_eq!(ash_activation(&[1.0, 0.0, 0.0, 0.0], 0.5, AshVariant::Prune).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ash_activation(&[1.0, 0.0, 0.0, 0.0], 0.5, AshVariant::Scale).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        let s = ash_activation(&[1.0, 2.0, 3.0, 4.0], 0.5, AshVariant::Scale).unwrap();
        // threshold 2.5; survivors 3, 4 rescaled by 10/7
        assert!((s[2] - 30.0 / 7.0).abs() < 1e-6 && s[0] == 0.0 && s[1] == 0.0);
        assert!(ash_activation(&[-1.0, 2.0], 0.5, AshVariant::Scale).is_err());
        assert!(ash_activation(&[-1.0, 2.0], 0.5, AshVariant::Prune).is_ok());
        assert!(ash_activation(&[1.0], 1.0, AshVariant::Prune).is_err());
    }

    #[test]
    fn rankfeat_rank1_batch_leaves_bias() {
        let u = [1.0f32, 2.0, -1.0, 0.5];
        let v = [0.3f32, -0.7, 1.1];
        let rows: Vec<Vec<f32>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let x = Matrix::from_rows(3, &rows).unwrap();
        let w = Matrix::from_rows(3, &[[1.0f32, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let b = [0.25f32, -0.75];
        let s = rankfeat_score(&ids(4), &x, &w, &b, 256).unwrap();
        for score in s.scores {
            assert!((score - 0.25).abs() < 1e-5, "{score}");
        }
        assert!(rankfeat_score(&ids(1), &Matrix::zeros(1, 3), &w, &b, 256).is_err());
        assert!(top_singular_triplet(&Matrix::zeros(3, 3), 1e-6, 10).is_err());
    }

    #[test]
    fn scorer_spec_parsing() {
        assert_eq!(ScorerSpec::from_name("msp").unwrap(), ScorerSpec::Msp);
        assert_eq!(
            ScorerSpec::from_name("odin").unwrap(),
            ScorerSpec::Odin { temperature: 1000.0 }
        );
        assert_eq!(
            ScorerSpec::from_name_and_params("ash", &[("percentile".into(), "0.5".into()), ("variant".into(), "prune".into())])
                .unwrap(),
            ScorerSpec::Ash {
                percentile: 0.5,
                variant: AshVariant::Prune
            }
        );
        assert!(ScorerSpec::from_name("nope").is_err());
        assert!(ScorerSpec::from_name_and_params("knn", &[("bogus".into(), "1".into())]).is_ok());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = msp_score(&ids(2), &logits(&[&[0.0, 1.0], &[2.0, -1.0]])).unwrap();
        let p = dir.path().join("s.jsonl");
        s.write_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(r#"{"scorer_name":"msp","params":{}}"#));
        assert_eq!(ScoreVector::read_jsonl(&p).unwrap(), s);
    }
}
