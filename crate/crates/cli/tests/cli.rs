use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use isood_bench::{PlantedBenchmark, PlantedBenchmarkConfig, PlantedText};
use isood_core::embed_store::{EmbeddingRecord, EmbeddingStore, Modality};
use isood_core::laid::{DecompositionMatrix, TripletCorpusSpec};
use isood_core::shift::{ShiftDegrees, SubsetIndex};
use isood_core::synis::{read_prompts_jsonl, GenerationManifest};
use isood_core::{write_store, ClassifierOutputs, EvaluationReport, Matrix, ScoreVector};

fn isood(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isood"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(isood(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(isood(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(isood(&["score", "--method", "msp"], dir.path()).status.code(), Some(1));
}

#[test]
fn shift_pipeline_from_text_features_to_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let planted = PlantedText::new(16, 10, 10, 5);
    let labels: Vec<String> = (0..10).map(|i| format!("thing{i}")).collect();
    let prompts: Vec<String> = (0..10).map(|i| format!("style{i} picture of a {{object}}")).collect();
    let spec = TripletCorpusSpec {
        semantic_labels: labels.clone(),
        covariate_prompts: prompts.clone(),
        pairing_seed: 1,
        triplets_per_text: 5,
    };
    fs::write(p.join("spec.json"), serde_json::to_string(&spec).unwrap()).unwrap();
    let mut records = Vec::new();
    for a in 0..10 {
        for q in 0..10 {
            let id = spec.rendering(a, q).unwrap();
            records.push(EmbeddingRecord::new(id, Some(a as u32), Modality::Text, planted.text(a, q)));
        }
    }
    write_store(&EmbeddingStore::new(16, records).unwrap(), p.join("text.iseb")).unwrap();

    let train = ok(&isood(
        &[
            "train-laid", "--spec", "spec.json", "--text-features", "text.iseb", "--out", "w.bin", "--lr", "0.05",
            "--batch-size", "32", "--epochs", "100",
        ],
        p,
    ));
    assert_eq!(train["triplets"], 500);
    assert!(train["orthogonality_error"].as_f64().unwrap() < 1e-2);
    let w = DecompositionMatrix::load(p.join("w.bin")).unwrap();
    assert_eq!(train["fingerprint"], w.fingerprint());
    assert!(w.manifest().is_some());

    write_store(&planted.images(30, 0.1, 6), p.join("id.iseb")).unwrap();
    write_store(&planted.images(40, 0.6, 7), p.join("test.iseb")).unwrap();
    ok(&isood(
        &["measure", "--test", "test.iseb", "--id", "id.iseb", "--w", "w.bin", "--k", "5", "--out", "deg.jsonl"],
        p,
    ));
    let degrees = ShiftDegrees::read_jsonl(p.join("deg.jsonl")).unwrap();
    assert_eq!((degrees.len(), degrees.k_used), (400, 5));
    assert_eq!(degrees.w_fingerprint.as_deref(), Some(w.fingerprint().as_str()));

    let div = ok(&isood(
        &["divide", "--degrees", "deg.jsonl", "--levels", "4", "--na-threshold", "10", "--out", "index.json"],
        p,
    ));
    assert_eq!(div["assigned"], 400);
    let index = SubsetIndex::read_json(p.join("index.json")).unwrap();
    assert_eq!(index.n_levels(), 4);
    assert_eq!(index.total(), 400);

    fs::write(p.join("bad_intervals.json"), r#"{"sem":{"edges":[0.0,1.0,0.5,2.0]},"cov":{"edges":[0.0,1.0,2.0]}}"#).unwrap();
    let bad = isood(&["divide", "--degrees", "deg.jsonl", "--intervals", "bad_intervals.json", "--out", "x.json"], p);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(isood(&["measure", "--test", "nope.iseb", "--id", "id.iseb", "--w", "w.bin", "--out", "d"], p).status.code(), Some(2));
}

fn planted_dirs(p: &Path) -> PlantedBenchmark {
    let planted = PlantedBenchmark::generate(&PlantedBenchmarkConfig {
        per_cell: 30,
        per_class: 20,
        relu: true,
        seed: 3,
        ..PlantedBenchmarkConfig::default()
    });
    planted.train.write_dir(p.join("train")).unwrap();
    planted.id_test.write_dir(p.join("id")).unwrap();
    planted.test.write_dir(p.join("test")).unwrap();
    planted.index.write_json(p.join("index.json")).unwrap();
    planted
}

#[test]
fn score_command_writes_score_files_and_maps_errors_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let planted = planted_dirs(p);

    let out = ok(&isood(&["score", "--method", "energy", "--outputs", "test", "--param", "temperature=2", "--out", "e.jsonl"], p));
    assert_eq!(out["count"], planted.test.len());
    let scores = ScoreVector::read_jsonl(p.join("e.jsonl")).unwrap();
    assert_eq!(scores.ids, planted.test.ids);
    assert_eq!(scores.params["temperature"], 2.0);

    ok(&isood(&["score", "--method", "knn", "--outputs", "id", "--fit", "train", "--param", "k=5", "--out", "k.jsonl"], p));
    assert_eq!(isood(&["score", "--method", "mds", "--outputs", "id", "--out", "m.jsonl"], p).status.code(), Some(1));
    assert_eq!(isood(&["score", "--method", "nope", "--outputs", "id", "--out", "m.jsonl"], p).status.code(), Some(1));
    assert_eq!(isood(&["score", "--method", "msp", "--outputs", "missing", "--out", "m.jsonl"], p).status.code(), Some(2));

    let bad = ClassifierOutputs::new(
        vec!["a".into(), "b".into()],
        vec![None, None],
        Matrix::new(2, 1, vec![1.0, 1.0]).unwrap(),
        Matrix::new(2, 2, vec![f32::INFINITY, 0.0, 1.0, 0.0]).unwrap(),
        None,
        None,
        "broken",
    )
    .unwrap();
    bad.write_dir(p.join("broken")).unwrap();
    assert_eq!(isood(&["score", "--method", "msp", "--outputs", "broken", "--out", "b.jsonl"], p).status.code(), Some(3));
}

#[test]
fn eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    planted_dirs(p);
    let config = serde_json::json!({
        "id_outputs": "id",
        "test_outputs": "test",
        "id_train_outputs": "train",
        "subset_index": "index.json",
        "output_dir": "out",
        "na_threshold": 20,
        "scorers": [{"method": "msp"}, {"method": "knn", "k": 5, "label": "knn5"}, {"method": "energy"}]
    });
    fs::write(p.join("bench.json"), config.to_string()).unwrap();
    ok(&isood(&["eval", "--config", "bench.json"], p));

    let report = EvaluationReport::read_summary(p.join("out").join("summary.json")).unwrap();
    assert_eq!(report.scorers.len(), 3);
    assert!(report.scorer("knn5").is_some());
    assert_eq!(report.settings.na_threshold, 20);
    for f in ["counts.csv", "table.csv", "grid_msp_auroc.csv", "curve_semantic_auroc.csv", "curve_covariate_fpr95.csv"] {
        assert!(p.join("out").join(f).exists(), "{f}");
    }
    let grid = fs::read_to_string(p.join("out").join("grid_msp_auroc.csv")).unwrap();
    assert_eq!(grid.lines().count(), 9);

    let table = isood(&["report", "--summary", "out/summary.json"], p);
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(2).unwrap().starts_with("knn5"));
    assert_eq!(isood(&["report", "--summary", "out/summary.json", "--metric", "f1"], p).status.code(), Some(1));

    fs::write(p.join("dup.json"), config.to_string().replace("\"knn5\"", "\"msp\"")).unwrap();
    assert_eq!(isood(&["eval", "--config", "dup.json"], p).status.code(), Some(1));
}

#[test]
fn synis_prompt_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("labels.txt"), "corn\nlighthouse\n\nviolin\n").unwrap();
    let out = ok(&isood(&["synis-prompts", "render", "--labels", "labels.txt", "--out", "prompts.jsonl"], p));
    assert_eq!(out["prompts"], 51 * 3);
    let prompts = read_prompts_jsonl(p.join("prompts.jsonl")).unwrap();
    assert!(prompts.iter().any(|r| r.rendered_prompt
        == "art nouveau style corn. elegant, decorative, curvilinear forms, nature-inspired, ornate, detailed"));

    let text = PlantedText::new(32, 3, 51, 1);
    let records: Vec<EmbeddingRecord> = prompts
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddingRecord::new(r.id(), None, Modality::Text, text.text(i % 3, i / 3)))
        .collect();
    write_store(&EmbeddingStore::new(32, records).unwrap(), p.join("pf.iseb")).unwrap();
    write_store(&text.images(20, 0.1, 2), p.join("id.iseb")).unwrap();
    DecompositionMatrix::identity(32).unwrap().save(p.join("w.bin")).unwrap();
    ok(&isood(
        &[
            "synis-prompts", "measure", "--prompts", "prompts.jsonl", "--features", "pf.iseb", "--id", "id.iseb", "--w",
            "w.bin", "--out", "pdeg.jsonl",
        ],
        p,
    ));
    ok(&isood(&["divide", "--degrees", "pdeg.jsonl", "--levels", "2", "--na-threshold", "1", "--out", "pindex.json"], p));
    fs::write(p.join("banned.txt"), "# local list\nviolin\n").unwrap();
    let out = ok(&isood(
        &[
            "synis-prompts", "manifest", "--index", "pindex.json", "--prompts", "prompts.jsonl", "--target", "100",
            "--banned-terms", "banned.txt", "--out", "manifest.json",
        ],
        p,
    ));
    assert_eq!(out["filtered"], 51);
    let manifest = GenerationManifest::read_json(p.join("manifest.json")).unwrap();
    for cell in manifest.cells.iter().filter(|c| !c.na) {
        assert_eq!(cell.prompts.iter().map(|x| x.images).sum::<usize>(), 100);
    }
}
