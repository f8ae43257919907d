//! Synthetic workloads with planted structure, shared by the criterion benches and
//! the acceptance suite.

use isood_core::embed_store::{ClassifierOutputs, EmbeddingRecord, EmbeddingStore, Modality};
use isood_core::laid::TextTriplet;
use isood_core::scorers::head_logits;
use isood_core::shift::{AxisIntervals, IntervalSet, SubsetIndex};
use isood_core::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Rows of a uniformly random orthogonal `n × n` matrix (Gram-Schmidt on Gaussians).
pub fn random_orthogonal(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = gaussian_vec(rng, n);
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// `x · R` for a row vector `x`.
pub fn rotate(x: &[f64], r: &[Vec<f64>]) -> Vec<f64> {
    let mut y = vec![0.0; r[0].len()];
    for (xi, row) in x.iter().zip(r) {
        for (yj, rij) in y.iter_mut().zip(row) {
            *yj += xi * rij;
        }
    }
    y
}

/// Uniform random matrix with entries in `[-1, 1)`.
pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Matrix::new(rows, cols, data).expect("shape")
}

/// Unit vectors whose pairwise cosine similarity stays below `max_similarity`.
fn spread_unit_vectors(rng: &mut impl Rng, count: usize, dim: usize, max_similarity: f64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        assert!(attempts < 1_000_000, "cannot place {count} vectors in {dim} dims");
        let v = normalized(gaussian_vec(rng, dim));
        let ok = out
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < max_similarity);
        if ok {
            out.push(v);
        }
    }
    out
}

/// Text features whose semantic content (label) lives in one `l/2`-dimensional
/// subspace and covariate content (prompt) in its orthogonal complement, both hidden
/// behind a random rotation.
pub struct PlantedText {
    pub l: usize,
    pub labels: Vec<Vec<f64>>,
    pub prompts: Vec<Vec<f64>>,
    pub rotation: Vec<Vec<f64>>,
}

impl PlantedText {
    pub fn new(l: usize, n_labels: usize, n_prompts: usize, seed: u64) -> Self {
        assert!(l % 2 == 0);
        let mut r = rng(seed);
        let h = l / 2;
        Self {
            l,
            labels: spread_unit_vectors(&mut r, n_labels, h, 0.5),
            prompts: spread_unit_vectors(&mut r, n_prompts, h, 0.5),
            rotation: random_orthogonal(&mut r, l),
        }
    }

    /// Unit feature from semantic and covariate halves.
    pub fn embed(&self, sem: &[f64], cov: &[f64]) -> Vec<f32> {
        let x: Vec<f64> = sem.iter().chain(cov).copied().collect();
        to_f32(&normalized(rotate(&normalized(x), &self.rotation)))
    }

    pub fn text(&self, label: usize, prompt: usize) -> Vec<f32> {
        self.embed(&self.labels[label], &self.prompts[prompt])
    }

    /// Triplets `(label a, prompt p)`, `(a', p)`, `(a, p')` with `a' ≠ a`, `p' ≠ p`.
    pub fn triplets(&self, n: usize, seed: u64) -> Vec<TextTriplet> {
        let mut r = rng(seed);
        let (nl, np) = (self.labels.len(), self.prompts.len());
        (0..n)
            .map(|_| {
                let a = r.gen_range(0..nl);
                let a2 = (a + r.gen_range(1..nl)) % nl;
                let p = r.gen_range(0..np);
                let p2 = (p + r.gen_range(1..np)) % np;
                TextTriplet::new(self.text(a, p), self.text(a2, p), self.text(a, p2)).expect("unit features")
            })
            .collect()
    }

    /// Labelled "images": label vector plus Gaussian noise of per-coordinate scale
    /// `noise` in the semantic half, a fresh random covariate direction in the other.
    pub fn images(&self, per_label: usize, noise: f64, seed: u64) -> EmbeddingStore {
        let mut r = rng(seed);
        let h = self.l / 2;
        let mut records = Vec::new();
        for (c, a) in self.labels.iter().enumerate() {
            for k in 0..per_label {
                let sem: Vec<f64> = a.iter().zip(gaussian_vec(&mut r, h)).map(|(x, e)| x + noise * e).collect();
                let cov = normalized(gaussian_vec(&mut r, h));
                records.push(EmbeddingRecord::new(
                    format!("img{c}_{k}"),
                    Some(c as u32),
                    Modality::Image,
                    self.embed(&normalized(sem), &cov),
                ));
            }
        }
        EmbeddingStore::new(self.l, records).expect("valid store")
    }

    /// One class text per label, all rendered with prompt `prompt`.
    pub fn class_texts(&self, prompt: usize) -> EmbeddingStore {
        let records = (0..self.labels.len())
            .map(|c| EmbeddingRecord::new(format!("class{c}"), Some(c as u32), Modality::Text, self.text(c, prompt)))
            .collect();
        EmbeddingStore::new(self.l, records).expect("valid store")
    }
}

/// Classifier outputs of a linear head on Gaussian class clusters, with OOD cells
/// rotated away from the class means by a per-level angle (semantic axis) and
/// widened along a rotated nuisance subspace the head ignores (covariate axis).
pub struct PlantedBenchmark {
    pub train: ClassifierOutputs,
    pub id_test: ClassifierOutputs,
    pub test: ClassifierOutputs,
    pub index: SubsetIndex,
}

#[derive(Clone, Debug)]
pub struct PlantedBenchmarkConfig {
    pub dim: usize,
    pub classes: usize,
    pub levels: usize,
    pub per_cell: usize,
    pub per_class: usize,
    pub radius: f64,
    /// Rotation angle (radians) per semantic level.
    pub angle_step: f64,
    /// Nuisance standard deviation per covariate level.
    pub nuisance_step: f64,
    /// Clamp features at zero, as after a ReLU penultimate layer.
    pub relu: bool,
    pub seed: u64,
}

impl Default for PlantedBenchmarkConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 10,
            levels: 8,
            per_cell: 2000,
            per_class: 200,
            radius: 4.0,
            angle_step: 9f64.to_radians(),
            nuisance_step: 0.1,
            relu: false,
            seed: 7,
        }
    }
}

fn outputs_from_features(ids: Vec<String>, labels: Vec<Option<u32>>, rows: Vec<Vec<f32>>, w: &Matrix, b: &[f32]) -> ClassifierOutputs {
    let d = w.cols();
    let logits: Vec<Vec<f32>> = rows.iter().map(|f| to_f32(&head_logits(f, w, b))).collect();
    let features = Matrix::from_rows(d, &rows).expect("features");
    let logits = Matrix::from_rows(w.rows(), &logits).expect("logits");
    ClassifierOutputs::new(ids, labels, features, logits, Some(w.clone()), Some(b.to_vec()), "planted-linear")
        .expect("consistent outputs")
}

impl PlantedBenchmark {
    pub fn generate(cfg: &PlantedBenchmarkConfig) -> Self {
        let (d, c) = (cfg.dim, cfg.classes);
        let novel = c;
        let nuisance_start = c + 1;
        let nuisance_dim = d - nuisance_start;
        assert!(nuisance_dim >= 1);
        let mut r = rng(cfg.seed);
        let q = random_orthogonal(&mut r, nuisance_dim);

        let mut w = Matrix::zeros(c, d);
        for k in 0..c {
            w.set(k, k, 1.0);
        }
        let b = vec![0.0f32; c];

        let mean = |class: usize, angle: f64| {
            let mut m = vec![0.0; d];
            m[class] = cfg.radius * angle.cos();
            m[novel] = cfg.radius * angle.sin();
            m
        };
        let sample = |r: &mut ChaCha8Rng, m: &[f64], nuisance: f64| -> Vec<f32> {
            let mut x: Vec<f64> = m.iter().zip(gaussian_vec(r, d)).map(|(a, e)| a + e).collect();
            if nuisance > 0.0 {
                let extra = rotate(&gaussian_vec(r, nuisance_dim), &q);
                for (xi, e) in x[nuisance_start..].iter_mut().zip(extra) {
                    *xi += nuisance * e;
                }
            }
            if cfg.relu {
                for xi in &mut x {
                    *xi = xi.max(0.0);
                }
            }
            to_f32(&x)
        };

        let id_set = |r: &mut ChaCha8Rng, prefix: &str| {
            let (mut ids, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
            for k in 0..c {
                for i in 0..cfg.per_class {
                    ids.push(format!("{prefix}{k}_{i}"));
                    labels.push(Some(k as u32));
                    rows.push(sample(r, &mean(k, 0.0), 0.0));
                }
            }
            outputs_from_features(ids, labels, rows, &w, &b)
        };
        let train = id_set(&mut r, "train");
        let id_test = id_set(&mut r, "id");

        let n = cfg.levels;
        let (mut ids, mut rows) = (Vec::new(), Vec::new());
        let mut cells = vec![Vec::new(); n * n];
        for s in 1..=n {
            for v in 1..=n {
                for i in 0..cfg.per_cell {
                    let class = r.gen_range(0..c);
                    let id = format!("s{s}c{v}_{i}");
                    rows.push(sample(&mut r, &mean(class, s as f64 * cfg.angle_step), v as f64 * cfg.nuisance_step));
                    cells[(s - 1) * n + (v - 1)].push(id.clone());
                    ids.push(id);
                }
            }
        }
        let labels = vec![None; ids.len()];
        let test = outputs_from_features(ids, labels, rows, &w, &b);
        let edges: Vec<f64> = (0..=n).map(|i| 2.0 * i as f64 / n as f64).collect();
        let axis = AxisIntervals::new(edges).expect("edges");
        let index = SubsetIndex::from_cells(IntervalSet::new(axis.clone(), axis).expect("axes"), 100, cells)
            .expect("cells");
        Self {
            train,
            id_test,
            test,
            index,
        }
    }
}

/// Random unit-norm store.
pub fn random_store(rows: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut r = rng(seed);
    let records = (0..rows)
        .map(|i| {
            let v = to_f32(&normalized(gaussian_vec(&mut r, dim)));
            EmbeddingRecord::new(format!("r{i}"), None, Modality::Image, v)
        })
        .collect();
    EmbeddingStore::new(dim, records).expect("valid store")
}

/// Scores with a controllable share of ties.
pub fn score_sets(rng: &mut impl Rng, m: usize, n: usize, tie_levels: Option<u32>) -> (Vec<f64>, Vec<f64>) {
    let mut draw = |shift: f64| -> f64 {
        match tie_levels {
            Some(k) => (rng.gen_range(0..k) as f64 + shift).floor(),
            None => rng.gen::<f64>() + shift,
        }
    };
    let id: Vec<f64> = (0..m).map(|_| draw(0.3)).collect();
    let ood: Vec<f64> = (0..n).map(|_| draw(0.0)).collect();
    (id, ood)
}

/// Shuffled copy, for order-invariance checks.
pub fn shuffled<T: Clone>(rng: &mut impl Rng, v: &[T]) -> Vec<T> {
    let mut out = v.to_vec();
    out.shuffle(rng);
    out
}
