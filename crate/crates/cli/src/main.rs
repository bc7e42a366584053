use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msm_tree::data::{read_libsvm, ParseOptions};
use msm_tree::harness::{
    evaluate_saved, format_traces, prepare_data, run_prepared, write_artifacts, DataConfig,
    ExperimentConfig, Method, SavedModel, TuningGrid, DEFAULT_GRID,
};
use msm_tree::kernel::{KernelKind, KernelSpec};
use msm_tree::msm::{split_node, NodeProblem};
use msm_tree::tree::NodeTrace;

#[derive(Parser)]
#[command(name = "msmtree", version, about = "Class-structure trees for multi-class SVM classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune, train and evaluate one method; writes report, model and tree files.
    Train(TrainArgs),
    /// Predict labels for a LIBSVM file with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Directory for predictions.txt; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on a labelled LIBSVM file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several methods on the same split and tabulate the results.
    Compare(CompareArgs),
    /// Inspect a tree model.
    Tree {
        #[command(subcommand)]
        command: TreeCommand,
    },
    /// Run the relaxed split of one node and print its cutting-plane trace.
    SplitTrace(SplitTraceArgs),
}

#[derive(Subcommand)]
enum TreeCommand {
    /// Print the class grouping of a saved tree model.
    Show { model: PathBuf },
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    /// Separate test file; otherwise the training file is split.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Skip scaling features to [-1, 1].
    #[arg(long)]
    no_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn config(&self) -> DataConfig {
        DataConfig {
            train: self.train.clone(),
            test: self.test.clone(),
            train_fraction: self.train_fraction,
            scale: !self.no_scale,
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_parser = parse_kernel, default_value = "gaussian")]
    kernel: KernelKind,
    /// Fixed regularization; tuned by cross-validation when absent.
    #[arg(long = "C")]
    c: Option<f64>,
    /// Fixed Gaussian width; tuned when absent.
    #[arg(long)]
    eta: Option<f64>,
    /// Comma-separated tuning grid used for both C and eta.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Balance bound of the split labelings.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_parser = parse_method, default_value = "msm")]
    method: Method,
    /// Write per-node split traces to trace.log.
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', value_parser = parse_method,
          default_value = "msm,random-tree,1vs1,1vsr")]
    method: Vec<Method>,
    #[arg(long)]
    trace: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitTraceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_kernel, default_value = "gaussian")]
    kernel: KernelKind,
    #[arg(long = "C", default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long)]
    beta: Option<f64>,
    /// Original labels of the node's classes; all classes when absent.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Also write trace.log here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    s.parse().map_err(|e: msm_tree::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: msm_tree::Error| e.to_string())
}

fn experiment(data: &DataArgs, model: &ModelArgs, method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(data.config(), method, model.kernel);
    cfg.c = model.c;
    cfg.eta = model.eta;
    let grid = model.grid.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
    cfg.grid = TuningGrid {
        c: grid.clone(),
        eta: grid,
        folds: model.folds,
        seed: data.seed,
    };
    cfg.seed = data.seed;
    cfg.train.split.beta = model.beta;
    cfg
}

fn print_summary(method: Method, report: &msm_tree::harness::EvalReport) {
    let eta = report.eta.map(|e| format!(" eta={e}")).unwrap_or_default();
    println!(
        "{method}: mean per-class accuracy {:.4} (C={}{eta}), evaluations mean {:.3} max {}",
        report.mean_per_class_accuracy, report.c, report.evals_mean, report.evals_max
    );
    if !report.empty_classes.is_empty() {
        println!("  classes without test instances: {:?}", report.empty_classes);
    }
    if report.nonconverged_models > 0 {
        println!("  {} binary models hit the iteration cap", report.nonconverged_models);
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = experiment(&args.data, &args.model, args.method);
    cfg.validate()?;
    let started = Instant::now();
    let data = prepare_data(&cfg.data, cfg.seed).context("loading data")?;
    let mut out = run_prepared(&cfg, &data, started)?;
    if !args.trace {
        out.traces.clear();
    }
    write_artifacts(&out, &args.out)?;
    print_summary(args.method, &out.report);
    Ok(())
}

fn predict(model: &Path, input: &Path, out: Option<&Path>) -> Result<()> {
    let saved = SavedModel::load(model).with_context(|| format!("reading {}", model.display()))?;
    // Labels in the input are ignored, so parse with its own label map.
    let data = read_libsvm(input, &ParseOptions::default())?;
    let mut lines = String::new();
    for x in data.instances() {
        let (class, _) = msm_tree::harness::Predictor::predict(&saved.model, &saved.scale(x));
        lines.push_str(saved.label_map.name(class));
        lines.push('\n');
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("predictions.txt"), lines)?;
        }
        None => print!("{lines}"),
    }
    Ok(())
}

fn evaluate(model: &Path, test: &Path, out: &Path) -> Result<()> {
    let saved = SavedModel::load(model).with_context(|| format!("reading {}", model.display()))?;
    let data = saved.read_dataset(test)?;
    let (report, _) = evaluate_saved(&saved, &data)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("confusion.csv"), report.confusion.to_csv(&saved.label_map))?;
    print_summary(saved.method, &report);
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let base = experiment(&args.data, &args.model, Method::Msm);
    base.validate()?;
    let data = prepare_data(&base.data, base.seed).context("loading data")?;
    let mut table = String::from("method,mean_per_class_accuracy,C,eta,evals_mean,evals_max\n");
    for &method in &args.method {
        let mut cfg = base.clone();
        cfg.method = method;
        let mut out = run_prepared(&cfg, &data, Instant::now())
            .with_context(|| format!("method {method}"))?;
        if !args.trace {
            out.traces.clear();
        }
        write_artifacts(&out, &args.out.join(method.name()))?;
        let r = &out.report;
        table.push_str(&format!(
            "{method},{},{},{},{},{}\n",
            r.mean_per_class_accuracy,
            r.c,
            r.eta.map(|e| e.to_string()).unwrap_or_default(),
            r.evals_mean,
            r.evals_max
        ));
        print_summary(method, r);
    }
    std::fs::write(args.out.join("compare.csv"), table)?;
    Ok(())
}

fn tree_show(model: &Path) -> Result<()> {
    let saved = SavedModel::load(model).with_context(|| format!("reading {}", model.display()))?;
    let Some(tree) = saved.model.as_tree() else {
        bail!("{} holds a {} model, not a tree", model.display(), saved.method);
    };
    print!("{}", tree.render(&saved.label_map));
    println!("{}", tree.nested(&saved.label_map));
    Ok(())
}

fn split_trace(args: &SplitTraceArgs) -> Result<()> {
    let data = prepare_data(&args.data.config(), args.data.seed).context("loading data")?;
    let train = &data.train;
    let classes: Vec<usize> = match &args.classes {
        None => (1..=train.class_count()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                let label: f64 = n.parse().with_context(|| format!("label '{n}'"))?;
                train
                    .label_map()
                    .class_of(label)
                    .with_context(|| format!("label '{n}' not in the training data"))
            })
            .collect::<Result<_>>()?,
    };
    let kernel = match args.kernel {
        KernelKind::Linear => KernelSpec::linear(),
        KernelKind::Gaussian => KernelSpec::gaussian(args.eta)?,
    };
    let p = NodeProblem::new(train, &classes, &kernel, args.c, args.beta)?;
    let opts = msm_tree::msm::SplitOptions {
        beta: args.beta,
        ..Default::default()
    };
    let outcome = split_node(&p, &opts)?;
    let trace = NodeTrace {
        path: "root".into(),
        classes: p.classes.clone(),
        g1: outcome.g1,
        g2: outcome.g2,
        rows: outcome.state.history,
        flags: outcome.state.mkl_flags,
    };
    let text = format_traces(&[trace], train.label_map());
    print!("{text}");
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trace.log"), &text)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Predict { model, input, out } => predict(&model, &input, out.as_deref()),
        Command::Evaluate { model, test, out } => evaluate(&model, &test, &out),
        Command::Compare(args) => compare(&args),
        Command::Tree {
            command: TreeCommand::Show { model },
        } => tree_show(&model),
        Command::SplitTrace(args) => split_trace(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
