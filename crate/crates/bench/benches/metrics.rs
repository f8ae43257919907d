use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use isood_bench::{rng, score_sets, PlantedBenchmark, PlantedBenchmarkConfig};
use isood_core::metrics::{aupr, auroc, fpr_at_tpr};
use isood_core::scorers::ScorerSpec;

fn detection_metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("detection_metrics");
    for n in [1_000usize, 50_000] {
        let (id, ood) = score_sets(&mut rng(3), n, n, None);
        group.bench_with_input(BenchmarkId::new("auroc", n), &n, |b, _| b.iter(|| auroc(black_box(&id), &ood).unwrap()));
        group.bench_with_input(BenchmarkId::new("aupr", n), &n, |b, _| b.iter(|| aupr(black_box(&id), &ood).unwrap()));
        group.bench_with_input(BenchmarkId::new("fpr95", n), &n, |b, _| {
            b.iter(|| fpr_at_tpr(black_box(&id), &ood, 0.95).unwrap())
        });
    }
    group.finish();
}

fn scorers(c: &mut Criterion) {
    let planted = PlantedBenchmark::generate(&PlantedBenchmarkConfig {
        per_cell: 40,
        per_class: 100,
        relu: true,
        ..PlantedBenchmarkConfig::default()
    });
    let mut group = c.benchmark_group("scorers_2560_samples");
    group.sample_size(10);
    for name in ["msp", "energy", "mds", "knn", "gradnorm", "dice", "ash", "rankfeat"] {
        let fitted = ScorerSpec::from_name(name).unwrap().fit(Some(&planted.train)).unwrap();
        group.bench_function(name, |b| b.iter(|| fitted.score(black_box(&planted.test)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, detection_metrics, scorers);
criterion_main!(benches);
