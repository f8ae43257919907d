use isood_bench::{PlantedBenchmark, PlantedBenchmarkConfig};
use isood_core::scorers::{AshVariant, ScorerSpec};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn every_scorer_ranks_id_above_far_ood() {
    let planted = PlantedBenchmark::generate(&PlantedBenchmarkConfig {
        per_cell: 60,
        per_class: 40,
        relu: true,
        ..PlantedBenchmarkConfig::default()
    });
    let far: Vec<usize> = planted
        .test
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| id.starts_with("s8"))
        .map(|(i, _)| i)
        .collect();
    let ood = planted.test.select(&far);
    let specs = [
        ScorerSpec::Msp,
        ScorerSpec::Odin { temperature: 1000.0 },
        ScorerSpec::Energy { temperature: 1.0 },
        ScorerSpec::Mds { reg_epsilon: None },
        ScorerSpec::Knn { k: 10 },
        ScorerSpec::Gradnorm { temperature: 1.0 },
        ScorerSpec::Dice { sparsity: 0.7 },
        ScorerSpec::Ash {
            percentile: 0.9,
            variant: AshVariant::Scale,
        },
        ScorerSpec::Rankfeat { batch_size: 64 },
    ];
    for spec in specs {
        let fitted = spec.fit(Some(&planted.train)).unwrap();
        let id = fitted.score(&planted.id_test).unwrap().scores;
        let out = fitted.score(&ood).unwrap().scores;
        assert!(mean(&id) > mean(&out), "{}: id {} vs ood {}", spec.name(), mean(&id), mean(&out));
    }
}

#[test]
fn planted_benchmark_is_reproducible() {
    let cfg = PlantedBenchmarkConfig {
        per_cell: 5,
        per_class: 5,
        ..PlantedBenchmarkConfig::default()
    };
    let a = PlantedBenchmark::generate(&cfg);
    let b = PlantedBenchmark::generate(&cfg);
    assert_eq!(a.test, b.test);
    assert_eq!(a.index, b.index);
    assert_eq!(a.index.total(), 64 * 5);
    a.test.check_consistency().unwrap();
}
