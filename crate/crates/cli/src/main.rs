use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isood_core::bench::{run_eval_config, EvaluationReport};
use isood_core::laid::{build_triplet_corpus, train_decomposition, DecompositionMatrix, TrainConfig, TripletCorpusSpec};
use isood_core::metrics::DetectionMetric;
use isood_core::scorers::ScorerSpec;
use isood_core::shift::{
    derive_intervals, divide_dataset, measure_shifts, AxisIntervals, IntervalPolicy, IntervalSet, ShiftDegrees, SubsetIndex,
    DEFAULT_K, DEFAULT_LEVELS, DEFAULT_NA_THRESHOLD,
};
use isood_core::synis::{
    builtin_styles, export_generation_manifest, load_styles, measure_prompt_shift, read_prompts_jsonl,
    render_prompts, suspicious_prompts, write_prompts_jsonl, BannedTermFilter, DEFAULT_IMAGES_PER_SUBSET,
};
use isood_core::{read_store, ClassifierOutputs, Error, Result};

#[derive(Parser)]
#[command(name = "isood", version, about = "Incremental-shift OOD benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the semantic/covariate decomposition matrix on text triplets.
    TrainLaid(TrainLaidArgs),
    /// Measure semantic and covariate shift degrees of test features.
    Measure(MeasureArgs),
    /// Divide measured samples into the level grid.
    Divide(DivideArgs),
    /// Score classifier outputs with one OOD detector.
    Score(ScoreArgs),
    /// Run a benchmark config and write the report.
    Eval(EvalArgs),
    /// Syn-IS prompt rendering, shift measurement and generation manifest.
    #[command(subcommand)]
    SynisPrompts(SynisCommand),
    /// Print the correlation/sensitivity table of a summary.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainLaidArgs {
    /// Triplet corpus spec (labels, prompt templates, pairing seed).
    #[arg(long)]
    spec: PathBuf,
    /// Text features of every rendering, ids = rendered strings.
    #[arg(long)]
    text_features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    orth_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the raw (unclamped) triplet terms.
    #[arg(long)]
    no_hinge: bool,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    w: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DivideArgs {
    #[arg(long)]
    degrees: PathBuf,
    /// Interval set JSON; derived from the degrees when omitted.
    #[arg(long)]
    intervals: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    #[arg(long, default_value_t = DEFAULT_NA_THRESHOLD)]
    na_threshold: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    outputs: PathBuf,
    /// ID training outputs for scorers that fit statistics (mds, knn, dice).
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Scorer parameter override, `key=value`; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, String)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum SynisCommand {
    /// Render style templates × labels into a prompt file.
    Render {
        /// One label per line.
        #[arg(long)]
        labels: PathBuf,
        /// Style file; the bundled SDXL styles when omitted.
        #[arg(long)]
        styles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shift degrees of prompt text features against ID image features.
    Measure {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        w: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cell generation manifest for an external image generator.
    Manifest {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IMAGES_PER_SUBSET)]
        target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Banned-term list, one term per line; built-in list when omitted.
        #[arg(long)]
        banned_terms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, default_value = "auroc")]
    metric: String,
}

fn parse_param(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn print_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
}

fn train_laid(a: TrainLaidArgs) -> Result<()> {
    let spec = TripletCorpusSpec::load(&a.spec)?;
    let features = read_store(&a.text_features)?;
    let corpus = build_triplet_corpus(&spec, &features)?;
    let config = TrainConfig {
        alpha: a.alpha,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        orth_weight: a.orth_weight,
        hinge: !a.no_hinge,
    };
    let w = train_decomposition(&corpus.triplets, &config)?;
    w.save(&a.out)?;
    let final_losses = w.manifest().map(|m| m.final_losses);
    print_json(serde_json::json!({
        "out": a.out,
        "l": w.l(),
        "triplets": corpus.triplets.len(),
        "fingerprint": w.fingerprint(),
        "orthogonality_error": w.orthogonality_error(),
        "final_losses": final_losses,
    }));
    Ok(())
}

fn measure(a: MeasureArgs) -> Result<()> {
    let test = read_store(&a.test)?;
    let id = read_store(&a.id)?;
    let w = DecompositionMatrix::load(&a.w)?;
    let degrees = measure_shifts(&test, &id, &w, a.k)?;
    degrees.write_jsonl(&a.out)?;
    print_json(serde_json::json!({ "out": a.out, "count": degrees.len(), "k_used": degrees.k_used }));
    Ok(())
}

fn read_intervals(path: &Path) -> Result<IntervalSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let raw: IntervalSet = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    IntervalSet::new(AxisIntervals::new(raw.sem.edges)?, AxisIntervals::new(raw.cov.edges)?)
}

fn divide(a: DivideArgs) -> Result<()> {
    let degrees = ShiftDegrees::read_jsonl(&a.degrees)?;
    let intervals: IntervalSet = match &a.intervals {
        Some(p) => read_intervals(p)?,
        None => derive_intervals(&degrees, a.levels, IntervalPolicy::UniformClipped)?,
    };
    let index = divide_dataset(&degrees, &intervals, a.na_threshold)?;
    index.write_json(&a.out)?;
    let na_cells = index.na_mask().iter().flatten().filter(|&&m| m).count();
    print_json(serde_json::json!({
        "out": a.out,
        "n_levels": index.n_levels(),
        "assigned": index.total(),
        "na_cells": na_cells,
    }));
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let spec = ScorerSpec::from_name_and_params(&a.method, &a.params)?;
    let outputs = ClassifierOutputs::read_dir(&a.outputs)?;
    let train = a.fit.as_ref().map(ClassifierOutputs::read_dir).transpose()?;
    let scores = spec.fit(train.as_ref())?.score(&outputs)?;
    scores.write_jsonl(&a.out)?;
    print_json(serde_json::json!({ "out": a.out, "scorer": scores.scorer_name, "count": scores.len() }));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (report, out_dir) = run_eval_config(&a.config)?;
    print_json(serde_json::json!({
        "out_dir": out_dir,
        "scorers": report.scorers.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn synis(cmd: SynisCommand) -> Result<()> {
    match cmd {
        SynisCommand::Render { labels, styles, out } => {
            let text = fs::read_to_string(&labels).map_err(|e| Error::Io {
                path: labels.clone(),
                source: e,
            })?;
            let labels: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            let styles = match styles {
                Some(p) => load_styles(p)?,
                None => builtin_styles(),
            };
            let prompts = render_prompts(&styles, &labels)?;
            for w in suspicious_prompts(&prompts) {
                eprintln!("warning: {w}");
            }
            write_prompts_jsonl(&prompts, &out)?;
            print_json(serde_json::json!({ "out": out, "prompts": prompts.len(), "styles": styles.len() }));
        }
        SynisCommand::Measure {
            prompts,
            features,
            id,
            w,
            k,
            out,
        } => {
            let prompts = read_prompts_jsonl(&prompts)?;
            let features = read_store(&features)?;
            let id = read_store(&id)?;
            let w = DecompositionMatrix::load(&w)?;
            let degrees = measure_prompt_shift(&prompts, &features, &id, &w, k)?;
            degrees.write_jsonl(&out)?;
            print_json(serde_json::json!({ "out": out, "count": degrees.len() }));
        }
        SynisCommand::Manifest {
            index,
            prompts,
            target,
            seed,
            banned_terms,
            out,
        } => {
            let index = SubsetIndex::read_json(&index)?;
            let prompts = read_prompts_jsonl(&prompts)?;
            let filter = match banned_terms {
                Some(p) => BannedTermFilter::from_file(p)?,
                None => BannedTermFilter::default(),
            };
            let manifest = export_generation_manifest(&index, &prompts, target, &filter, seed)?;
            manifest.write_json(&out)?;
            print_json(serde_json::json!({
                "out": out,
                "cells": manifest.cells.len(),
                "filtered": manifest.filter_report.len(),
            }));
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let metric: DetectionMetric = a.metric.parse()?;
    let report = EvaluationReport::read_summary(&a.summary)?;
    println!(
        "{:<12} {:>10} {:>10} {:>10} {:>10}",
        "scorer", "sem corr", "sem sens", "cov corr", "cov sens"
    );
    for row in report.table.iter().filter(|r| r.metric == metric) {
        println!(
            "{:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            row.scorer,
            row.semantic_correlation,
            row.semantic_sensitivity,
            row.covariate_correlation,
            row.covariate_sensitivity
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::TrainLaid(a) => train_laid(a),
        Command::Measure(a) => measure(a),
        Command::Divide(a) => divide(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::SynisPrompts(c) => synis(c),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
