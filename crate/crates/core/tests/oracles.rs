//! Library results against straightforward recomputations.

use isood_core::embed_store::{EmbeddingRecord, EmbeddingStore, Modality};
use isood_core::laid::{pca_fit, DecompositionMatrix};
use isood_core::metrics::{aupr, auroc};
use isood_core::scorers::{
    ash_score, dice_score, energy_score, head_logits, knn_score, mds_fit, mds_score, msp_score, odin_t_score,
    AshVariant, DiceModel, KnnModel,
};
use isood_core::shift::{derive_intervals, measure_shifts, IntervalPolicy};
use isood_core::Matrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| scale * r.sample::<f32, _>(StandardNormal)).collect())
        .collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn logsumexp(z: &[f64]) -> f64 {
    z.iter().map(|x| x.exp()).sum::<f64>().ln()
}

#[test]
fn softmax_family_on_hand_values() {
    let logits = Matrix::from_rows(3, &[vec![1.0f32, 2.0, 3.0]]).unwrap();
    let e = std::f64::consts::E;
    let msp = msp_score(&ids(1), &logits).unwrap().scores[0];
    assert!((msp - e.powi(3) / (e + e * e + e.powi(3))).abs() < 1e-12);
    assert!((msp - 0.66524).abs() < 1e-5);

    let energy = energy_score(&ids(1), &logits, 1.0).unwrap().scores[0];
    assert!((energy - 3.40761).abs() < 1e-5);

    let two = Matrix::from_rows(2, &[vec![2.0f32, 0.0]]).unwrap();
    let odin = odin_t_score(&ids(1), &two, 2.0).unwrap().scores[0];
    assert!((odin - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    assert!((odin - 0.73106).abs() < 1e-5);
}

#[test]
fn mds_matches_textbook_mahalanobis_on_two_classes() {
    let mut r = rng(1);
    let mut rows = gaussian(&mut r, 100, 4, 1.0);
    let labels: Vec<Option<u32>> = (0..100).map(|i| Some((i % 2) as u32)).collect();
    for (row, l) in rows.iter_mut().zip(&labels) {
        if *l == Some(1) {
            row[0] += 3.0;
        }
    }
    let train = Matrix::from_rows(4, &rows).unwrap();
    let model = mds_fit(&train, &labels, None).unwrap();
    let probe = gaussian(&mut r, 30, 4, 2.0);
    let got = mds_score(&ids(30), &model, &Matrix::from_rows(4, &probe).unwrap()).unwrap().scores;

    let x = DMatrix::from_fn(100, 4, |i, j| rows[i][j] as f64);
    let mut means = vec![DVector::zeros(4); 2];
    for (i, l) in labels.iter().enumerate() {
        means[l.unwrap() as usize] += x.row(i).transpose() / 50.0;
    }
    let mut cov = DMatrix::zeros(4, 4);
    for (i, l) in labels.iter().enumerate() {
        let c = x.row(i).transpose() - &means[l.unwrap() as usize];
        cov += &c * c.transpose() / 100.0;
    }
    let eps = 1e-6 * cov.trace() / 4.0;
    let precision = (cov + DMatrix::identity(4, 4) * eps).try_inverse().unwrap();
    for (p, g) in probe.iter().zip(&got) {
        let v = DVector::from_iterator(4, p.iter().map(|&x| x as f64));
        let best = means
            .iter()
            .map(|m| ((&v - m).transpose() * &precision * (&v - m))[(0, 0)])
            .fold(f64::INFINITY, f64::min);
        assert!((g + best).abs() <= 1e-8 * best.max(1.0), "{g} vs {}", -best);
    }
}

#[test]
fn knn_score_matches_full_sort() {
    let mut r = rng(2);
    let train = gaussian(&mut r, 5000, 16, 1.0);
    let test = gaussian(&mut r, 500, 16, 1.0);
    let model = KnnModel::fit(&Matrix::from_rows(16, &train).unwrap()).unwrap();
    let k = 50;
    let got = knn_score(&ids(500), &model, &Matrix::from_rows(16, &test).unwrap(), k).unwrap().scores;
    let unit = |v: &[f32]| {
        let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        v.iter().map(|&x| x as f64 / n).collect::<Vec<f64>>()
    };
    let train_u: Vec<Vec<f64>> = train.iter().map(|v| unit(v)).collect();
    for (q, g) in test.iter().zip(&got) {
        let q = unit(q);
        let mut d: Vec<f64> = train_u
            .iter()
            .map(|t| t.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(f64::total_cmp);
        assert!((g + d[k - 1]).abs() < 1e-6);
    }
}

#[test]
fn dice_equals_energy_with_explicit_mask() {
    let mut r = rng(3);
    let (d, c) = (20, 6);
    let w_rows = gaussian(&mut r, c, d, 1.0);
    let w = Matrix::from_rows(d, &w_rows).unwrap();
    let b: Vec<f32> = gaussian(&mut r, 1, c, 1.0).remove(0);
    let train: Vec<Vec<f32>> = gaussian(&mut r, 50, d, 1.0).into_iter().map(|v| v.iter().map(|x| x.abs()).collect()).collect();
    let test: Vec<Vec<f32>> = gaussian(&mut r, 40, d, 1.0).into_iter().map(|v| v.iter().map(|x| x.abs()).collect()).collect();
    let model = DiceModel::fit(&Matrix::from_rows(d, &train).unwrap()).unwrap();
    let p = 0.7;
    let got = dice_score(&ids(40), Some(&model), &Matrix::from_rows(d, &test).unwrap(), &w, &b, p).unwrap().scores;

    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|v| v[j] as f64).sum::<f64>() / 50.0).collect();
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..c {
        for j in 0..d {
            entries.push((w_rows[k][j] as f64 * mean[j], k, j));
        }
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let n_masked = (p * (c * d) as f64).floor() as usize;
    let mut keep = vec![vec![true; d]; c];
    for &(_, k, j) in &entries[..n_masked] {
        keep[k][j] = false;
    }
    for (f, g) in test.iter().zip(&got) {
        let z: Vec<f64> = (0..c)
            .map(|k| (0..d).filter(|&j| keep[k][j]).map(|j| w_rows[k][j] as f64 * f[j] as f64).sum::<f64>() + b[k] as f64)
            .collect();
        assert!((g - logsumexp(&z)).abs() < 1e-9);
    }
}

#[test]
fn ash_prune_matches_threshold_scan() {
    let mut r = rng(4);
    let (d, c) = (32, 5);
    let w_rows = gaussian(&mut r, c, d, 0.5);
    let w = Matrix::from_rows(d, &w_rows).unwrap();
    let b = vec![0.1f32; c];
    let feats: Vec<Vec<f32>> = gaussian(&mut r, 100, d, 1.0).into_iter().map(|v| v.iter().map(|x| x.max(0.0)).collect()).collect();
    let q = 0.65;
    let pruned = ash_score(&ids(100), &Matrix::from_rows(d, &feats).unwrap(), &w, &b, q, AshVariant::Prune).unwrap().scores;
    let scaled = ash_score(&ids(100), &Matrix::from_rows(d, &feats).unwrap(), &w, &b, q, AshVariant::Scale).unwrap().scores;
    for (i, f) in feats.iter().enumerate() {
        let mut s: Vec<f64> = f.iter().map(|&x| x as f64).collect();
        s.sort_by(f64::total_cmp);
        let pos = q * (d - 1) as f64;
        let (lo, frac) = (pos.floor() as usize, pos.fract());
        let t = s[lo] + frac * (s[(lo + 1).min(d - 1)] - s[lo]);
        let kept: Vec<f64> = f.iter().map(|&x| if (x as f64) < t { 0.0 } else { x as f64 }).collect();
        let z = |v: &[f64]| -> Vec<f64> {
            (0..c).map(|k| (0..d).map(|j| w_rows[k][j] as f64 * v[j]).sum::<f64>() + b[k] as f64).collect()
        };
        assert!((pruned[i] - logsumexp(&z(&kept))).abs() < 1e-9);
        let total: f64 = f.iter().map(|&x| x as f64).sum();
        let after: f64 = kept.iter().sum();
        let rescaled: Vec<f64> = kept.iter().map(|x| x * total / after).collect();
        assert!((scaled[i] - logsumexp(&z(&rescaled))).abs() < 1e-5);
    }
}

#[test]
fn energy_of_head_equals_energy_of_recomputed_logits() {
    let mut r = rng(5);
    let w = Matrix::from_rows(8, &gaussian(&mut r, 4, 8, 1.0)).unwrap();
    let b = vec![0.0f32; 4];
    let f = gaussian(&mut r, 1, 8, 1.0).remove(0);
    let z = head_logits(&f, &w, &b);
    let direct: Vec<f64> = (0..4).map(|k| (0..8).map(|j| w.get(k, j) as f64 * f[j] as f64).sum()).collect();
    for (a, e) in z.iter().zip(&direct) {
        assert!((a - e).abs() < 1e-12);
    }
}

fn store(rows: &[Vec<f32>], prefix: &str) -> EmbeddingStore {
    let recs = rows
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            EmbeddingRecord::new(format!("{prefix}{i}"), None, Modality::Image, v.iter().map(|x| x / n).collect())
        })
        .collect();
    EmbeddingStore::new(rows[0].len(), recs).unwrap()
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

#[test]
fn measure_shifts_matches_double_loop() {
    let mut r = rng(6);
    let l = 8;
    let test = store(&gaussian(&mut r, 200, l, 1.0), "t");
    let id = store(&gaussian(&mut r, 2000, l, 1.0), "i");
    let w = DecompositionMatrix::new(l, gaussian(&mut r, 1, l * l, 0.4).remove(0)).unwrap();
    let k = 10;
    let got = measure_shifts(&test, &id, &w, k).unwrap();
    assert_eq!(got.k_used, k);
    assert_eq!(got.w_fingerprint.as_deref(), Some(w.fingerprint().as_str()));

    let split = |v: &[f32]| -> (Vec<f64>, Vec<f64>) {
        let y: Vec<f64> = (0..l).map(|j| (0..l).map(|i| v[i] as f64 * w.get(i, j) as f64).sum()).collect();
        (y[..l / 2].to_vec(), y[l / 2..].to_vec())
    };
    let id_parts: Vec<_> = id.records().iter().map(|r| split(&r.vector)).collect();
    for (t, rec) in test.records().iter().enumerate() {
        let (s, c) = split(&rec.vector);
        let mut ds: Vec<f64> = id_parts.iter().map(|p| cos_dist(&s, &p.0)).collect();
        let mut dc: Vec<f64> = id_parts.iter().map(|p| cos_dist(&c, &p.1)).collect();
        ds.sort_by(f64::total_cmp);
        dc.sort_by(f64::total_cmp);
        assert!((got.d_sem[t] - ds[k - 1]).abs() < 1e-5, "sem {t}");
        assert!((got.d_cov[t] - dc[k - 1]).abs() < 1e-5, "cov {t}");
        assert_eq!(got.ids[t], rec.id);
    }
}

#[test]
fn uniform_clipped_intervals_on_uniform_degrees() {
    let n = 100_001;
    let d: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 / (n - 1) as f64).collect();
    let degrees = isood_core::ShiftDegrees {
        ids: ids(n),
        d_sem: d.clone(),
        d_cov: d.iter().map(|x| x * 0.5).collect(),
        k_used: 10,
        w_fingerprint: None,
    };
    let iv = derive_intervals(&degrees, 8, IntervalPolicy::UniformClipped).unwrap();
    let e = &iv.sem.edges;
    assert_eq!(e.len(), 9);
    assert_eq!((e[0], e[8]), (0.0, 2.0));
    let (lo, hi) = (0.5 + 0.01, 0.5 + 0.99);
    for (i, edge) in e.iter().enumerate().take(8).skip(1) {
        assert!((edge - (lo + (hi - lo) * i as f64 / 8.0)).abs() < 1e-9);
    }
    assert!((iv.cov.edges[4] - 0.5).abs() < 1e-9);
}

#[test]
fn aupr_hand_cases_and_size_bias() {
    assert_eq!(aupr(&[1.0], &[2.0]).unwrap(), 0.5);
    assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.25);
    let id: Vec<f64> = (0..100).map(|i| i as f64 / 50.0).collect();
    let ood: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    let doubled: Vec<f64> = ood.iter().chain(&ood).copied().collect();
    assert!(aupr(&id, &doubled).unwrap() < aupr(&id, &ood).unwrap());
    assert_eq!(auroc(&id, &doubled).unwrap(), auroc(&id, &ood).unwrap());
}

#[test]
fn pca_reconstruction_beats_random_bases() {
    let mut r = rng(7);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let base: Vec<f64> = (0..6).map(|j| r.sample::<f64, _>(StandardNormal) * (6 - j) as f64).collect();
                base
            })
            .collect();
        let p = pca_fit(&rows, 0.6).unwrap();
        let k = p.k();
        let err = |basis: &[Vec<f64>]| -> f64 {
            rows.iter()
                .map(|x| {
                    let c: Vec<f64> = x.iter().zip(&p.mean).map(|(a, m)| a - m).collect();
                    let mut rec = vec![0.0; 6];
                    for b in basis {
                        let coef: f64 = b.iter().zip(&c).map(|(u, v)| u * v).sum();
                        for (ri, bi) in rec.iter_mut().zip(b) {
                            *ri += coef * bi;
                        }
                    }
                    c.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let pca_err = err(&p.components);
        for _ in 0..10 {
            let g = DMatrix::from_fn(6, k, |_, _| r.sample::<f64, _>(StandardNormal));
            let q = g.qr().q();
            let basis: Vec<Vec<f64>> = (0..k).map(|j| q.column(j).iter().copied().collect()).collect();
            assert!(pca_err <= err(&basis) + 1e-9);
        }
    }
}
