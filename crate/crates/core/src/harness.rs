//! Experiment plumbing: data preparation, cross-validated tuning, training
//! of every method, evaluation and report artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{train_one_vs_one, train_one_vs_rest, OneVsOneModel, OneVsRestModel};
use crate::data::{
    read_libsvm, split_train_test, stratified_folds, LabelMap, ParseOptions, ScalingRecord,
    SparseDataset, SparseVector,
};
use crate::error::{Error, Result};
use crate::kernel::{KernelKind, KernelSpec};
use crate::msm::SplitOptions;
use crate::par;
use crate::svm::{BinarySvmModel, SolverOptions};
use crate::tree::{build_tree, BuildOptions, ClassTree, NodeTrace, Splitter};

/// The regularization and kernel-width grid used for tuning.
pub const DEFAULT_GRID: [f64; 7] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "msm")]
    Msm,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "random-tree")]
    RandomTree,
    #[serde(rename = "1vs1")]
    OneVsOne,
    #[serde(rename = "1vsr")]
    OneVsRest,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Msm,
        Method::Oracle,
        Method::RandomTree,
        Method::OneVsOne,
        Method::OneVsRest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msm => "msm",
            Method::Oracle => "oracle",
            Method::RandomTree => "random-tree",
            Method::OneVsOne => "1vs1",
            Method::OneVsRest => "1vsr",
        }
    }

    pub fn is_tree(self) -> bool {
        matches!(self, Method::Msm | Method::Oracle | Method::RandomTree)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown method '{s}' (expected msm, oracle, random-tree, 1vs1 or 1vsr)"
                ))
            })
    }
}

/// Anything that maps an instance to a class in `1..=c` and reports how
/// many binary classifiers it evaluated.
pub trait Predictor: Sync {
    fn class_count(&self) -> usize;
    fn predict(&self, x: &SparseVector) -> (usize, usize);
}

impl Predictor for ClassTree {
    fn class_count(&self) -> usize {
        ClassTree::class_count(self)
    }

    fn predict(&self, x: &SparseVector) -> (usize, usize) {
        ClassTree::predict(self, x)
    }
}

impl Predictor for OneVsOneModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, x: &SparseVector) -> (usize, usize) {
        OneVsOneModel::predict(self, x)
    }
}

impl Predictor for OneVsRestModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, x: &SparseVector) -> (usize, usize) {
        OneVsRestModel::predict(self, x)
    }
}

/// A trained model of any scheme, tagged by `scheme` in JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "scheme")]
pub enum TrainedModel {
    #[serde(rename = "tree")]
    Tree(ClassTree),
    #[serde(rename = "1vs1")]
    OneVsOne(OneVsOneModel),
    #[serde(rename = "1vsr")]
    OneVsRest(OneVsRestModel),
}

impl TrainedModel {
    pub fn binary_models(&self) -> &[BinarySvmModel] {
        match self {
            TrainedModel::Tree(t) => &t.models,
            TrainedModel::OneVsOne(m) => &m.classifiers,
            TrainedModel::OneVsRest(m) => &m.classifiers,
        }
    }

    pub fn nonconverged(&self) -> usize {
        self.binary_models().iter().filter(|m| !m.converged).count()
    }

    pub fn as_tree(&self) -> Option<&ClassTree> {
        match self {
            TrainedModel::Tree(t) => Some(t),
            _ => None,
        }
    }
}

impl Predictor for TrainedModel {
    fn class_count(&self) -> usize {
        match self {
            TrainedModel::Tree(t) => Predictor::class_count(t),
            TrainedModel::OneVsOne(m) => m.class_count,
            TrainedModel::OneVsRest(m) => m.class_count,
        }
    }

    fn predict(&self, x: &SparseVector) -> (usize, usize) {
        match self {
            TrainedModel::Tree(t) => t.predict(x),
            TrainedModel::OneVsOne(m) => m.predict(x),
            TrainedModel::OneVsRest(m) => m.predict(x),
        }
    }
}

/// Everything needed to predict on raw (unscaled) data: the model plus the
/// label names and feature scaling of its training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub method: Method,
    pub label_map: LabelMap,
    pub scaling: Option<ScalingRecord>,
    pub kernel: KernelSpec,
    #[serde(rename = "C")]
    pub c: f64,
    pub model: TrainedModel,
}

impl SavedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads a LIBSVM file with this model's labels and scaling.
    pub fn read_dataset(&self, path: impl AsRef<Path>) -> Result<SparseDataset> {
        let opts = ParseOptions {
            dim: None,
            label_map: Some(&self.label_map),
        };
        let d = read_libsvm(path, &opts)?;
        Ok(match &self.scaling {
            Some(s) => s.apply_dataset(&d),
            None => d,
        })
    }

    pub fn scale(&self, x: &SparseVector) -> SparseVector {
        match &self.scaling {
            Some(s) => s.apply(x),
            None => x.clone(),
        }
    }
}

/// Method-independent training knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub split: SplitOptions,
    pub solver: SolverOptions,
    /// Seed of the random-tree splitter.
    pub seed: u64,
}

pub fn train_method(
    method: Method,
    train: &SparseDataset,
    kernel: &KernelSpec,
    c: f64,
    opts: &TrainOptions,
) -> Result<(TrainedModel, Vec<NodeTrace>)> {
    let tree = |splitter: Splitter| -> Result<(TrainedModel, Vec<NodeTrace>)> {
        let built = build_tree(
            train,
            kernel,
            c,
            &BuildOptions {
                splitter,
                solver: opts.solver.clone(),
            },
        )?;
        Ok((TrainedModel::Tree(built.tree), built.traces))
    };
    match method {
        Method::Msm => tree(Splitter::Msm(opts.split.clone())),
        Method::Oracle => tree(Splitter::Oracle),
        Method::RandomTree => tree(Splitter::Random { seed: opts.seed }),
        Method::OneVsOne => Ok((
            TrainedModel::OneVsOne(train_one_vs_one(train, kernel, c, &opts.solver)?),
            Vec::new(),
        )),
        Method::OneVsRest => Ok((
            TrainedModel::OneVsRest(train_one_vs_rest(train, kernel, c, &opts.solver)?),
            Vec::new(),
        )),
    }
}

/// `c x c` counts, row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(class_count: usize) -> Self {
        Self {
            counts: vec![vec![0; class_count]; class_count],
        }
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth - 1][predicted - 1] += 1;
    }

    /// Row-normalized diagonal; `None` for classes absent from the test set.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[k] as f64 / total as f64)
            })
            .collect()
    }

    /// Mean of the per-class accuracies over classes that occur.
    pub fn mean_per_class_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn to_csv(&self, names: &LabelMap) -> String {
        let mut out = String::from("true\\predicted");
        for name in names.names() {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            out.push_str(names.name(k + 1));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_per_class_accuracy: f64,
    /// Classes without test instances, excluded from the mean.
    pub empty_classes: Vec<usize>,
    pub evals_mean: f64,
    pub evals_max: usize,
    pub predictions: Vec<usize>,
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, test: &SparseDataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = model.class_count();
    if test.class_count() > c {
        return Err(Error::InvalidParameter(format!(
            "test data has {} classes, model {c}",
            test.class_count()
        )));
    }
    let results = par::map_slice(test.instances(), |x| model.predict(x));
    let mut confusion = Confusion::new(c);
    for (i, &(pred, _)) in results.iter().enumerate() {
        confusion.add(test.label(i), pred);
    }
    let per_class_accuracy = confusion.per_class_accuracy();
    let empty_classes = (1..=c)
        .filter(|&k| per_class_accuracy[k - 1].is_none())
        .collect();
    let evals_total: usize = results.iter().map(|r| r.1).sum();
    Ok(Evaluation {
        mean_per_class_accuracy: confusion.mean_per_class_accuracy(),
        per_class_accuracy,
        confusion,
        empty_classes,
        evals_mean: evals_total as f64 / results.len() as f64,
        evals_max: results.iter().map(|r| r.1).max().unwrap_or(0),
        predictions: results.into_iter().map(|r| r.0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    #[serde(rename = "C")]
    pub c: f64,
    pub eta: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    #[serde(rename = "C")]
    pub c: f64,
    pub eta: Option<f64>,
    pub score: f64,
    pub table: Vec<CvCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub c: Vec<f64>,
    /// Ignored for the linear kernel.
    pub eta: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            c: DEFAULT_GRID.to_vec(),
            eta: DEFAULT_GRID.to_vec(),
            folds: 5,
            seed: 0,
        }
    }
}

/// Stratified k-fold search over the grid, scored by mean per-class
/// accuracy. Ties go to the smaller `C`, then the smaller `eta`.
pub fn cross_validate(
    train: &SparseDataset,
    method: Method,
    kernel: KernelKind,
    grid: &TuningGrid,
    opts: &TrainOptions,
) -> Result<CvResult> {
    if grid.c.is_empty() || (kernel == KernelKind::Gaussian && grid.eta.is_empty()) {
        return Err(Error::InvalidParameter("tuning grid is empty".into()));
    }
    let folds = stratified_folds(train, grid.folds, grid.seed)?;
    let splits: Vec<(SparseDataset, SparseDataset)> = folds
        .iter()
        .map(|held| {
            let fit: Vec<usize> = (0..train.len()).filter(|i| held.binary_search(i).is_err()).collect();
            Ok((train.subset(&fit)?, train.subset(held)?))
        })
        .collect::<Result<_>>()?;
    for (fit, _) in &splits {
        fit.require_all_classes()?;
    }

    let etas: Vec<Option<f64>> = match kernel {
        KernelKind::Linear => vec![None],
        KernelKind::Gaussian => grid.eta.iter().map(|&e| Some(e)).collect(),
    };
    let mut cells: Vec<(f64, Option<f64>)> = grid
        .c
        .iter()
        .flat_map(|&c| etas.iter().map(move |&e| (c, e)))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.unwrap_or(0.0).total_cmp(&b.1.unwrap_or(0.0))));

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|i| (0..splits.len()).map(move |f| (i, f)))
        .collect();
    let scores = par::map_slice(&jobs, |&(i, f)| -> Result<f64> {
        let (c, eta) = cells[i];
        let spec = match eta {
            Some(e) => KernelSpec::gaussian(e)?,
            None => KernelSpec::linear(),
        };
        let (fit, held) = &splits[f];
        let (model, _) = train_method(method, fit, &spec, c, opts)?;
        Ok(evaluate(&model, held)?.mean_per_class_accuracy)
    });

    let mut table = Vec::with_capacity(cells.len());
    let mut scores = scores.into_iter();
    for &(c, eta) in &cells {
        let mut total = 0.0;
        for _ in 0..splits.len() {
            total += scores.next().expect("one score per job")?;
        }
        table.push(CvCell {
            c,
            eta,
            score: total / splits.len() as f64,
        });
    }
    let best = table
        .iter()
        .fold(None::<&CvCell>, |acc, cell| match acc {
            Some(b) if b.score >= cell.score => Some(b),
            _ => Some(cell),
        })
        .expect("grid is nonempty");
    Ok(CvResult {
        c: best.c,
        eta: best.eta,
        score: best.score,
        table,
    })
}

/// Where the data comes from and how it is split and scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: PathBuf,
    /// Separate test file; when absent `train` is split.
    pub test: Option<PathBuf>,
    pub train_fraction: f64,
    pub scale: bool,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: SparseDataset,
    pub test: SparseDataset,
    pub scaling: Option<ScalingRecord>,
}

pub fn prepare_data(cfg: &DataConfig, seed: u64) -> Result<PreparedData> {
    let full = read_libsvm(&cfg.train, &ParseOptions::default())?;
    let (train, test) = match &cfg.test {
        Some(path) => {
            let opts = ParseOptions {
                dim: None,
                label_map: Some(full.label_map()),
            };
            (full.clone(), read_libsvm(path, &opts)?)
        }
        None => split_train_test(&full, cfg.train_fraction, seed)?,
    };
    train.require_all_classes()?;
    if cfg.scale {
        let record = ScalingRecord::fit(&train);
        Ok(PreparedData {
            train: record.apply_dataset(&train),
            test: record.apply_dataset(&test),
            scaling: Some(record),
        })
    } else {
        Ok(PreparedData {
            train,
            test,
            scaling: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub method: Method,
    pub kernel: KernelKind,
    /// Fixed hyperparameters skip tuning; with the Gaussian kernel both
    /// must be given.
    #[serde(rename = "C")]
    pub c: Option<f64>,
    pub eta: Option<f64>,
    pub grid: TuningGrid,
    pub seed: u64,
    pub train: TrainOptions,
}

impl ExperimentConfig {
    pub fn new(data: DataConfig, method: Method, kernel: KernelKind) -> Self {
        Self {
            data,
            method,
            kernel,
            c: None,
            eta: None,
            grid: TuningGrid::default(),
            seed: 0,
            train: TrainOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.folds < 2 {
            return Err(Error::InvalidParameter("need at least 2 folds".into()));
        }
        if self.grid.c.is_empty() || self.grid.eta.is_empty() {
            return Err(Error::InvalidParameter("tuning grid is empty".into()));
        }
        if self.kernel == KernelKind::Linear && self.eta.is_some() {
            return Err(Error::InvalidParameter(
                "eta only applies to the gaussian kernel".into(),
            ));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction {} outside (0, 1)",
                self.data.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub kernel: KernelKind,
    #[serde(rename = "C")]
    pub c: f64,
    pub eta: Option<f64>,
    pub seed: Option<u64>,
    /// Unknown when evaluating a saved model.
    pub train_size: Option<usize>,
    pub test_size: usize,
    pub class_names: Vec<String>,
    pub confusion: Confusion,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_per_class_accuracy: f64,
    pub empty_classes: Vec<usize>,
    pub evals_mean: f64,
    pub evals_max: usize,
    pub cv: Option<CvResult>,
    pub nonconverged_models: usize,
    /// Nested class grouping for tree methods.
    pub tree: Option<String>,
    /// Informational only; excluded from reproducibility comparisons.
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub model: SavedModel,
    pub traces: Vec<NodeTrace>,
    pub predictions: Vec<usize>,
}

/// Load, scale, tune (unless fixed), train, evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(&cfg.data, cfg.seed)?;
    run_prepared(cfg, &data, started)
}

/// Like [`run_experiment`] on already prepared data.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    started: Instant,
) -> Result<ExperimentOutput> {
    let mut train_opts = cfg.train.clone();
    train_opts.seed = cfg.seed;
    let fixed = match (cfg.kernel, cfg.c, cfg.eta) {
        (KernelKind::Linear, Some(c), _) => Some((c, None)),
        (KernelKind::Gaussian, Some(c), Some(e)) => Some((c, Some(e))),
        _ => None,
    };
    let cv = match fixed {
        Some(_) => None,
        None => {
            let mut grid = cfg.grid.clone();
            grid.seed = cfg.seed;
            if let Some(c) = cfg.c {
                grid.c = vec![c];
            }
            if let Some(e) = cfg.eta {
                grid.eta = vec![e];
            }
            Some(cross_validate(&data.train, cfg.method, cfg.kernel, &grid, &train_opts)?)
        }
    };
    let (c, eta) = fixed.unwrap_or_else(|| {
        let cv = cv.as_ref().expect("tuned");
        (cv.c, cv.eta)
    });
    let spec = match eta {
        Some(e) => KernelSpec::gaussian(e)?,
        None => KernelSpec::linear(),
    };
    let (model, traces) = train_method(cfg.method, &data.train, &spec, c, &train_opts)?;
    let eval = evaluate(&model, &data.test)?;
    let names = data.train.label_map().clone();
    let report = EvalReport {
        method: cfg.method,
        kernel: cfg.kernel,
        c,
        eta,
        seed: Some(cfg.seed),
        train_size: Some(data.train.len()),
        test_size: data.test.len(),
        class_names: names.names().to_vec(),
        confusion: eval.confusion,
        per_class_accuracy: eval.per_class_accuracy,
        mean_per_class_accuracy: eval.mean_per_class_accuracy,
        empty_classes: eval.empty_classes,
        evals_mean: eval.evals_mean,
        evals_max: eval.evals_max,
        cv,
        nonconverged_models: model.nonconverged(),
        tree: model.as_tree().map(|t| t.nested(&names)),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutput {
        report,
        model: SavedModel {
            method: cfg.method,
            label_map: names,
            scaling: data.scaling.clone(),
            kernel: spec,
            c,
            model,
        },
        traces,
        predictions: eval.predictions,
    })
}

/// Report for a saved model on an already scaled test set.
pub fn evaluate_saved(saved: &SavedModel, test: &SparseDataset) -> Result<(EvalReport, Vec<usize>)> {
    let started = Instant::now();
    let eval = evaluate(&saved.model, test)?;
    let report = EvalReport {
        method: saved.method,
        kernel: saved.kernel.kind,
        c: saved.c,
        eta: (saved.kernel.kind == KernelKind::Gaussian).then_some(saved.kernel.eta),
        seed: None,
        train_size: None,
        test_size: test.len(),
        class_names: saved.label_map.names().to_vec(),
        confusion: eval.confusion,
        per_class_accuracy: eval.per_class_accuracy,
        mean_per_class_accuracy: eval.mean_per_class_accuracy,
        empty_classes: eval.empty_classes,
        evals_mean: eval.evals_mean,
        evals_max: eval.evals_max,
        cv: None,
        nonconverged_models: saved.model.nonconverged(),
        tree: saved.model.as_tree().map(|t| t.nested(&saved.label_map)),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, eval.predictions))
}

/// One line per cutting-plane iteration, grouped by node.
pub fn format_traces(traces: &[NodeTrace], names: &LabelMap) -> String {
    let label = |ks: &[usize]| -> String {
        ks.iter().map(|&k| names.name(k)).collect::<Vec<_>>().join(" ")
    };
    let mut out = String::new();
    for t in traces {
        let _ = writeln!(out, "node={} classes=[{}]", t.path, label(&t.classes));
        for row in &t.rows {
            let _ = writeln!(out, "node={} {row}", t.path);
        }
        let _ = writeln!(
            out,
            "node={} split=[{}]|[{}] inner_nonconverged={} line_search_failed={} mkl_nonconverged={}",
            t.path,
            label(&t.g1),
            label(&t.g2),
            t.flags.inner_nonconverged,
            t.flags.line_search_failed,
            t.flags.mkl_nonconverged
        );
    }
    out
}

/// Writes report.json, confusion.csv, model.json, tree.json (tree methods)
/// and trace.log (when traces exist) into `dir`.
pub fn write_artifacts(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&out.report)?)?;
    std::fs::write(
        dir.join("confusion.csv"),
        out.report.confusion.to_csv(&out.model.label_map),
    )?;
    std::fs::write(dir.join("model.json"), serde_json::to_string(&out.model)?)?;
    if let Some(t) = out.model.model.as_tree() {
        std::fs::write(dir.join("tree.json"), serde_json::to_string_pretty(&t.layout())?)?;
    }
    if !out.traces.is_empty() {
        std::fs::write(
            dir.join("trace.log"),
            format_traces(&out.traces, &out.model.label_map),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_libsvm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant(usize, usize);

    impl Predictor for Constant {
        fn class_count(&self) -> usize {
            self.1
        }

        fn predict(&self, _: &SparseVector) -> (usize, usize) {
            (self.0, 1)
        }
    }

    struct Oracle<'a>(&'a SparseDataset);

    impl Predictor for Oracle<'_> {
        fn class_count(&self) -> usize {
            self.0.class_count()
        }

        fn predict(&self, x: &SparseVector) -> (usize, usize) {
            let i = self.0.instances().iter().position(|y| y == x).unwrap();
            (self.0.label(i), 2)
        }
    }

    #[test]
    fn metric_examples() {
        let d = parse_libsvm("1 1:1\n1 1:2\n2 1:3\n2 1:4\n").unwrap();
        let perfect = evaluate(&Oracle(&d), &d).unwrap();
        assert_eq!(perfect.mean_per_class_accuracy, 1.0);
        assert_eq!(perfect.confusion.counts, vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(perfect.evals_mean, 2.0);
        let constant = evaluate(&Constant(1, 2), &d).unwrap();
        assert_eq!(constant.mean_per_class_accuracy, 0.5);

        let conf = Confusion {
            counts: vec![vec![8, 2, 0], vec![0, 10, 0], vec![5, 0, 5]],
        };
        assert!((conf.mean_per_class_accuracy() - 2.3 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_classes_are_flagged() {
        let d = parse_libsvm("1 1:1\n1 1:2\n").unwrap();
        let e = evaluate(&Constant(1, 3), &d).unwrap();
        assert_eq!(e.empty_classes, vec![2, 3]);
        assert_eq!(e.mean_per_class_accuracy, 1.0);
        let csv = e.confusion.to_csv(&LabelMap::identity(3));
        assert_eq!(csv.lines().next().unwrap(), "true\\predicted,1,2,3");
        assert_eq!(csv.lines().nth(1).unwrap(), "1,2,0,0");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("tree".parse::<Method>().is_err());
    }

    fn noisy(seed: u64) -> SparseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        for i in 0..80 {
            let class = i % 2;
            let centre = if class == 0 { -0.3 } else { 0.3 };
            let x = centre + rng.gen_range(-0.5..0.5);
            let y = rng.gen_range(-1.0..1.0);
            // A quarter of the labels are flipped.
            let label = if rng.gen_bool(0.25) { 1 - class } else { class };
            text.push_str(&format!("{} 1:{x} 2:{y}\n", label + 1));
        }
        parse_libsvm(&text).unwrap()
    }

    #[test]
    fn cv_prefers_smaller_c_than_training_fit() {
        let d = noisy(3);
        let grid = TuningGrid {
            c: DEFAULT_GRID.to_vec(),
            eta: vec![100.0],
            folds: 5,
            seed: 1,
        };
        let opts = TrainOptions::default();
        let cv = cross_validate(&d, Method::OneVsOne, KernelKind::Gaussian, &grid, &opts).unwrap();
        assert_eq!(cv.table.len(), 7);
        let train_score = |c: f64| {
            let (m, _) = train_method(Method::OneVsOne, &d, &KernelSpec::gaussian(100.0).unwrap(), c, &opts).unwrap();
            evaluate(&m, &d).unwrap().mean_per_class_accuracy
        };
        let best_train = DEFAULT_GRID
            .iter()
            .copied()
            .fold((0.0, f64::NEG_INFINITY), |acc, c| {
                let s = train_score(c);
                if s > acc.1 { (c, s) } else { acc }
            });
        assert!(cv.c < best_train.0, "cv {} vs train {}", cv.c, best_train.0);
    }

    #[test]
    fn single_cell_grid() {
        let d = noisy(4);
        let grid = TuningGrid {
            c: vec![1.0],
            eta: vec![1.0],
            folds: 3,
            seed: 0,
        };
        let cv = cross_validate(&d, Method::OneVsRest, KernelKind::Linear, &grid, &TrainOptions::default()).unwrap();
        assert_eq!((cv.c, cv.eta, cv.table.len()), (1.0, None, 1));
    }

    #[test]
    fn experiment_artifacts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.libsvm");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut text = String::new();
        for i in 0..60 {
            let k = i % 4;
            let (cx, cy) = [(0.0, 0.0), (0.0, 3.0), (3.0, 0.0), (3.0, 3.0)][k];
            text.push_str(&format!(
                "{} 1:{} 2:{}\n",
                k + 10,
                cx + rng.gen_range(-0.5..0.5),
                cy + rng.gen_range(-0.5..0.5)
            ));
        }
        std::fs::write(&path, text).unwrap();
        let data = DataConfig {
            train: path,
            test: None,
            train_fraction: 0.5,
            scale: true,
        };
        let mut cfg = ExperimentConfig::new(data, Method::RandomTree, KernelKind::Gaussian);
        cfg.grid = TuningGrid {
            c: vec![1.0, 10.0],
            eta: vec![0.1, 1.0],
            folds: 3,
            seed: 0,
        };
        cfg.seed = 5;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        let strip = |r: &EvalReport| EvalReport {
            wall_time_seconds: 0.0,
            ..r.clone()
        };
        assert_eq!(
            serde_json::to_string(&strip(&a.report)).unwrap(),
            serde_json::to_string(&strip(&b.report)).unwrap()
        );
        assert_eq!(a.report.class_names, vec!["10", "11", "12", "13"]);
        assert!(a.report.evals_mean <= 3.0);

        let out = dir.path().join("out");
        write_artifacts(&a, &out).unwrap();
        for f in ["report.json", "confusion.csv", "model.json", "tree.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let saved = SavedModel::load(out.join("model.json")).unwrap();
        let test = a.report.test_size;
        assert_eq!(test, 30);
        let reloaded: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(reloaded, a.report);
        let data = prepare_data(&cfg.data, cfg.seed).unwrap();
        let again = evaluate(&saved.model, &data.test).unwrap();
        assert_eq!(again.confusion, a.report.confusion);
    }
}
