//! End-to-end evaluation: score ID and every subset cell, compute detection metrics
//! per cell, average into per-axis curves and summarise trends across levels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed_store::ClassifierOutputs;
use crate::error::{Error, Result};
use crate::metrics::{level_correlation, level_sensitivity, Axis, DetectionMetric, LevelSeries, DEFAULT_TPR};
use crate::scorers::{FittedScorer, ScoreVector, ScorerSpec};
use crate::shift::{SubsetIndex, DEFAULT_K, DEFAULT_NA_THRESHOLD};

pub const SUMMARY_FILE: &str = "summary.json";
pub const COUNTS_FILE: &str = "counts.csv";
pub const NA: &str = "N/A";

/// A scorer with an optional display label (defaults to the method name).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub spec: ScorerSpec,
}

impl ScorerEntry {
    pub fn new(spec: ScorerSpec) -> Self {
        Self { label: None, spec }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.spec.name().to_string())
    }
}

impl From<ScorerSpec> for ScorerEntry {
    fn from(spec: ScorerSpec) -> Self {
        Self::new(spec)
    }
}

fn default_metrics() -> Vec<DetectionMetric> {
    DetectionMetric::ALL.to_vec()
}
fn default_na() -> usize {
    DEFAULT_NA_THRESHOLD
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_out() -> PathBuf {
    PathBuf::from("report")
}

/// Benchmark configuration file. Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// ID test-set classifier outputs.
    pub id_outputs: PathBuf,
    /// Classifier outputs covering every id in the subset index.
    pub test_outputs: PathBuf,
    pub subset_index: PathBuf,
    /// ID training outputs, required by scorers that fit statistics (mds, knn, dice).
    #[serde(default)]
    pub id_train_outputs: Option<PathBuf>,
    pub scorers: Vec<ScorerEntry>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<DetectionMetric>,
    #[serde(default = "default_na")]
    pub na_threshold: usize,
    /// k used when the shift degrees behind the index were measured; recorded only.
    #[serde(default = "default_k")]
    pub shift_k: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.id_outputs);
        fix(&mut self.test_outputs);
        fix(&mut self.subset_index);
        if let Some(p) = self.id_train_outputs.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.scorers.is_empty() {
            return Err(Error::validation("config lists no scorers"));
        }
        if self.metrics.is_empty() {
            return Err(Error::validation("config lists no metrics"));
        }
        let mut seen = HashSet::new();
        for s in &self.scorers {
            let label = s.label();
            if label.is_empty() || label.contains(['/', '\\']) {
                return Err(Error::validation(format!("scorer label {label:?} is not a valid file name part")));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::validation(format!(
                    "scorer {label:?} appears twice; give one of them a distinct \"label\""
                )));
            }
        }
        Ok(())
    }
}

/// Everything a benchmark run needs, already in memory.
#[derive(Clone, Debug)]
pub struct BenchmarkInputs {
    pub id_outputs: ClassifierOutputs,
    pub test_outputs: ClassifierOutputs,
    pub index: SubsetIndex,
    pub id_train_outputs: Option<ClassifierOutputs>,
    pub scorers: Vec<ScorerEntry>,
    pub metrics: Vec<DetectionMetric>,
    pub settings: RunSettings,
}

/// Run parameters echoed into the summary so a report is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub na_threshold: usize,
    pub shift_k: usize,
    pub seed: u64,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            na_threshold: DEFAULT_NA_THRESHOLD,
            shift_k: DEFAULT_K,
            seed: 0,
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub correlation: f64,
    pub degenerate: bool,
    pub sensitivity: f64,
    /// Levels with a defined curve value that entered the fit.
    pub levels_used: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `grid[s-1][c-1]`, percent; `None` for N/A cells.
    pub grid: Vec<Vec<Option<f64>>>,
    /// Mean over covariate levels at each semantic level.
    pub semantic_curve: Vec<Option<f64>>,
    /// Mean over semantic levels at each covariate level.
    pub covariate_curve: Vec<Option<f64>>,
    pub semantic: Trend,
    pub covariate: Trend,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCalls {
    pub id: usize,
    pub subsets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub label: String,
    pub spec: ScorerSpec,
    pub metrics: BTreeMap<DetectionMetric, MetricReport>,
    pub score_calls: ScoreCalls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scorer: String,
    pub metric: DetectionMetric,
    pub semantic_correlation: f64,
    pub semantic_sensitivity: f64,
    pub covariate_correlation: f64,
    pub covariate_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConventions {
    pub metric_scale: String,
    pub tpr_target: f64,
    pub aupr_positive: String,
    pub curve_weighting: String,
    pub auroc_ties: String,
    pub fpr_ties: String,
}

impl Default for ReportConventions {
    fn default() -> Self {
        Self {
            metric_scale: "percent".into(),
            tpr_target: DEFAULT_TPR,
            aupr_positive: "id".into(),
            curve_weighting: "unweighted mean over non-N/A cells".into(),
            auroc_ties: "half credit".into(),
            fpr_ties: "counted as positive".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_levels: usize,
    pub conventions: ReportConventions,
    pub settings: RunSettings,
    pub id_count: usize,
    pub counts: Vec<Vec<usize>>,
    pub na_mask: Vec<Vec<bool>>,
    pub scorers: Vec<ScorerReport>,
    pub table: Vec<TableRow>,
}

impl EvaluationReport {
    pub fn scorer(&self, label: &str) -> Option<&ScorerReport> {
        self.scorers.iter().find(|s| s.label == label)
    }

    pub fn read_summary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn trend(curve: &[Option<f64>], axis: Axis) -> Trend {
    let (levels, x): (Vec<usize>, Vec<f64>) = curve
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i + 1, v)))
        .unzip();
    match LevelSeries::with_levels(levels.clone(), x, axis) {
        Ok(series) => {
            let c = level_correlation(&series);
            Trend {
                correlation: c.value,
                degenerate: c.degenerate,
                sensitivity: level_sensitivity(&series),
                levels_used: levels,
            }
        }
        Err(_) => Trend {
            correlation: 0.0,
            degenerate: true,
            sensitivity: 0.0,
            levels_used: levels,
        },
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn metric_report(grid: Vec<Vec<Option<f64>>>) -> MetricReport {
    let n = grid.len();
    let semantic_curve: Vec<Option<f64>> = (0..n).map(|s| mean_defined(grid[s].iter().copied())).collect();
    let covariate_curve: Vec<Option<f64>> = (0..n).map(|c| mean_defined(grid.iter().map(|row| row[c]))).collect();
    MetricReport {
        semantic: trend(&semantic_curve, Axis::Semantic),
        covariate: trend(&covariate_curve, Axis::Covariate),
        grid,
        semantic_curve,
        covariate_curve,
    }
}

/// Scores ID once per scorer and every non-N/A cell once, then assembles the report
/// in fixed (scorer, cell) order.
pub fn run_benchmark_inputs(inputs: &BenchmarkInputs) -> Result<EvaluationReport> {
    let mut index = inputs.index.clone();
    index.na_threshold = inputs.settings.na_threshold;
    let n = index.n_levels();

    let row_of: HashMap<&str, usize> = inputs
        .test_outputs
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut cells: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (s, c, ids) in index.iter_cells() {
        if index.is_na(s, c) {
            continue;
        }
        let rows = ids
            .iter()
            .map(|id| {
                row_of.get(id.as_str()).copied().ok_or_else(|| {
                    Error::validation(format!("cell ({s},{c}): test outputs have no scores for id {id:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push((s, c, rows));
    }
    let subsets: Vec<ClassifierOutputs> = cells.iter().map(|(_, _, rows)| inputs.test_outputs.select(rows)).collect();

    let mut reports = Vec::with_capacity(inputs.scorers.len());
    for entry in &inputs.scorers {
        let fitted: FittedScorer = entry.spec.fit(inputs.id_train_outputs.as_ref())?;
        let mut calls = ScoreCalls::default();
        let id_scores = fitted.score(&inputs.id_outputs)?;
        calls.id += 1;
        let cell_scores: Vec<ScoreVector> = subsets
            .par_iter()
            .zip(&cells)
            .map(|(sub, (s, c, _))| {
                fitted.score(sub).map_err(|e| match e {
                    Error::Validation(m) => Error::Validation(format!("cell ({s},{c}): {m}")),
                    Error::Numerical(m) => Error::Numerical(format!("cell ({s},{c}): {m}")),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        calls.subsets += cell_scores.len();

        let mut metrics = BTreeMap::new();
        for &metric in &inputs.metrics {
            let mut grid = vec![vec![None; n]; n];
            let values: Vec<f64> = cell_scores
                .par_iter()
                .map(|sv| metric.compute(&id_scores.scores, &sv.scores).map(|v| 100.0 * v))
                .collect::<Result<_>>()?;
            for ((s, c, _), v) in cells.iter().zip(values) {
                grid[s - 1][c - 1] = Some(v);
            }
            metrics.insert(metric, metric_report(grid));
        }
        reports.push(ScorerReport {
            label: entry.label(),
            spec: entry.spec.clone(),
            metrics,
            score_calls: calls,
        });
    }

    let table = reports
        .iter()
        .flat_map(|r| {
            r.metrics.iter().map(move |(&metric, m)| TableRow {
                scorer: r.label.clone(),
                metric,
                semantic_correlation: m.semantic.correlation,
                semantic_sensitivity: m.semantic.sensitivity,
                covariate_correlation: m.covariate.correlation,
                covariate_sensitivity: m.covariate.sensitivity,
            })
        })
        .collect();

    Ok(EvaluationReport {
        n_levels: n,
        conventions: ReportConventions::default(),
        settings: inputs.settings.clone(),
        id_count: inputs.id_outputs.len(),
        counts: index.counts(),
        na_mask: index.na_mask(),
        scorers: reports,
        table,
    })
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Loads all inputs named by `config` and runs the benchmark.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let id_outputs = ClassifierOutputs::read_dir(&config.id_outputs)?;
    let test_outputs = ClassifierOutputs::read_dir(&config.test_outputs)?;
    let index = SubsetIndex::read_json(&config.subset_index)?;
    let id_train_outputs = config
        .id_train_outputs
        .as_ref()
        .map(ClassifierOutputs::read_dir)
        .transpose()?;
    let mut inputs_meta = BTreeMap::new();
    inputs_meta.insert("id_outputs".into(), id_outputs.model_name.clone());
    inputs_meta.insert("test_outputs".into(), test_outputs.model_name.clone());
    inputs_meta.insert(
        "subset_index".into(),
        config.subset_index.file_name().map(|f| path_string(Path::new(f))).unwrap_or_default(),
    );
    let settings = RunSettings {
        na_threshold: config.na_threshold,
        shift_k: config.shift_k,
        seed: config.seed,
        inputs: inputs_meta,
    };
    run_benchmark_inputs(&BenchmarkInputs {
        id_outputs,
        test_outputs,
        index,
        id_train_outputs,
        scorers: config.scorers.clone(),
        metrics: config.metrics.clone(),
        settings,
    })
}

/// Runs the benchmark described by a config file and writes its report.
pub fn run_eval_config(path: impl AsRef<Path>) -> Result<(EvaluationReport, PathBuf)> {
    let cfg = BenchmarkConfig::load(path)?;
    let report = run_benchmark(&cfg)?;
    emit_report(&report, &cfg.output_dir)?;
    Ok((report, cfg.output_dir))
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => NA.to_string(),
    }
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn grid_header(n: usize) -> Vec<String> {
    std::iter::once("semantic\\covariate".to_string())
        .chain((1..=n).map(|c| c.to_string()))
        .collect()
}

/// Writes `counts.csv`, `grid_<scorer>_<metric>.csv`, `curve_<axis>_<metric>.csv`,
/// `table.csv` and `summary.json` into `out_dir`.
pub fn emit_report(report: &EvaluationReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = report.n_levels;
    let mut written = Vec::new();

    let p = out.join(COUNTS_FILE);
    let rows = report
        .counts
        .iter()
        .enumerate()
        .map(|(s, row)| std::iter::once((s + 1).to_string()).chain(row.iter().map(usize::to_string)).collect())
        .collect();
    write_csv(&p, grid_header(n), rows)?;
    written.push(p);

    let mut metrics: Vec<DetectionMetric> = Vec::new();
    for sr in &report.scorers {
        for (&metric, m) in &sr.metrics {
            if !metrics.contains(&metric) {
                metrics.push(metric);
            }
            let p = out.join(format!("grid_{}_{}.csv", sr.label, metric.name()));
            let rows = m
                .grid
                .iter()
                .enumerate()
                .map(|(s, row)| std::iter::once((s + 1).to_string()).chain(row.iter().map(|v| fmt_value(*v))).collect())
                .collect();
            write_csv(&p, grid_header(n), rows)?;
            written.push(p);
        }
    }
    metrics.sort();

    for axis in [Axis::Semantic, Axis::Covariate] {
        for &metric in &metrics {
            let p = out.join(format!("curve_{}_{}.csv", axis.name(), metric.name()));
            let header = std::iter::once("level".to_string())
                .chain(report.scorers.iter().map(|s| s.label.clone()))
                .collect();
            let rows = (0..n)
                .map(|i| {
                    std::iter::once((i + 1).to_string())
                        .chain(report.scorers.iter().map(|s| {
                            let v = s.metrics.get(&metric).and_then(|m| match axis {
                                Axis::Semantic => m.semantic_curve[i],
                                Axis::Covariate => m.covariate_curve[i],
                            });
                            fmt_value(v)
                        }))
                        .collect()
                })
                .collect();
            write_csv(&p, header, rows)?;
            written.push(p);
        }
    }

    let p = out.join("table.csv");
    let header = [
        "scorer",
        "metric",
        "semantic_correlation",
        "semantic_sensitivity",
        "covariate_correlation",
        "covariate_sensitivity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = report
        .table
        .iter()
        .map(|r| {
            vec![
                r.scorer.clone(),
                r.metric.name().to_string(),
                format!("{:.4}", r.semantic_correlation),
                format!("{:.4}", r.semantic_sensitivity),
                format!("{:.4}", r.covariate_correlation),
                format!("{:.4}", r.covariate_sensitivity),
            ]
        })
        .collect();
    write_csv(&p, header, rows)?;
    written.push(p);

    let p = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(&p, e))?;
    fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}
