//! Command-line front end: fit, predict, explain, bench, validate-model.
//!
//! Machine-readable output (JSON, CSV) goes to stdout or `--output`;
//! human-readable summaries go to stderr. Exit codes: 0 success, 1 usage
//! or input error, 2 when no counterfactual exists for the request.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use lvqcf::baseline::{baseline_explain, BaselineConfig};
use lvqcf::bench::{run_bench, BenchSpec};
use lvqcf::data::ingest_csv;
use lvqcf::engine::{explain, CfRequest};
use lvqcf::fit::{fit_plumbing, FitMetric};
use lvqcf::model::LvqModel;
use lvqcf::regularizer::{mad_weights, Regularizer};
use lvqcf::UserConstraints;

#[derive(Parser)]
#[command(
    name = "lvqcf",
    version,
    about = "Counterfactual explanations for LVQ classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a prototype model on a labeled CSV dataset.
    Fit(FitArgs),
    /// Predict the label of an input vector.
    Predict(PredictArgs),
    /// Compute a minimum-change counterfactual for an input.
    Explain(ExplainArgs),
    /// Run the cross-validated engine-vs-baseline comparison.
    Bench(BenchArgs),
    /// Check a model file against all invariants.
    ValidateModel(ValidateArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Training data CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the integer label column.
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Prototypes per class.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Metric kind: identity, global or local (global/local estimate
    /// whitening factors from the data).
    #[arg(long, default_value = "identity")]
    metric: String,
    /// Where to write the model JSON.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated feature values, e.g. "0.5,1.25".
    #[arg(long)]
    input: String,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated feature values of the point to explain.
    #[arg(long)]
    input: String,
    /// Requested label of the counterfactual.
    #[arg(long)]
    target_label: i64,
    /// Deviation penalty: manhattan, euclidean or gl2.
    #[arg(long, default_value = "manhattan")]
    regularizer: String,
    /// Explicit manhattan weights, comma-separated (defaults to all ones).
    #[arg(long)]
    alpha: Option<String>,
    /// CSV to compute inverse-MAD manhattan weights from.
    #[arg(long)]
    mad_from: Option<PathBuf>,
    /// Label column of --mad-from.
    #[arg(long, default_value = "label")]
    label_column: String,
    /// JSON file with a symmetric psd matrix for the gl2 penalty.
    #[arg(long)]
    gl2_matrix: Option<PathBuf>,
    /// JSON file with box/frozen/linear side constraints.
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Solve the per-prototype programs on a thread pool.
    #[arg(long)]
    parallel: bool,
    /// Use the derivative-free black-box baseline instead of the exact
    /// programs (comparison aid).
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark specification JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Write the report CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
    /// Solve independent cases on a thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> lvqcf::Result<u8> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Bench(args) => cmd_bench(args),
        Command::ValidateModel(args) => cmd_validate(args),
    }
}

fn parse_vector(text: &str, flag: &str) -> lvqcf::Result<DVector<f64>> {
    let values: Result<Vec<f64>, _> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect();
    match values {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite()) => Ok(DVector::from_vec(v)),
        _ => Err(lvqcf::Error::InvalidInput(format!(
            "{flag}: expected comma-separated finite numbers, got \"{text}\""
        ))),
    }
}

fn cmd_fit(args: FitArgs) -> lvqcf::Result<u8> {
    let ds = ingest_csv(&args.data, &args.label_column)?;
    let metric = match args.metric.as_str() {
        "identity" => FitMetric::Identity,
        "global" => FitMetric::Global(None),
        "local" => FitMetric::Local,
        other => {
            return Err(lvqcf::Error::InvalidInput(format!(
                "--metric: expected identity, global or local, got \"{other}\""
            )))
        }
    };
    let model = fit_plumbing(&ds.points, &ds.labels, args.k, metric, args.seed)?;
    let correct = ds
        .points
        .iter()
        .zip(&ds.labels)
        .filter(|(x, &l)| model.predict(x).ok() == Some(l))
        .count();
    model.save(&args.output)?;
    eprintln!(
        "fitted {} model: dim={}, {} prototypes over labels {:?}, training accuracy {:.1}% -> {}",
        model.metric().name(),
        model.dim(),
        model.prototypes().len(),
        model.labels(),
        100.0 * correct as f64 / ds.len() as f64,
        args.output.display()
    );
    Ok(0)
}

fn cmd_predict(args: PredictArgs) -> lvqcf::Result<u8> {
    let model = LvqModel::load(&args.model)?;
    let x = parse_vector(&args.input, "--input")?;
    let label = model.predict(&x)?;
    let nearest = model.nearest(&x)?;
    eprintln!(
        "nearest prototype {} at squared distance {:.6}",
        nearest,
        model.distance(&x, nearest)?
    );
    println!("{label}");
    Ok(0)
}

fn build_regularizer(args: &ExplainArgs, dim: usize) -> lvqcf::Result<Regularizer> {
    match args.regularizer.as_str() {
        "manhattan" => {
            let alpha = if let Some(text) = &args.alpha {
                parse_vector(text, "--alpha")?
            } else if let Some(path) = &args.mad_from {
                let ds = ingest_csv(path, &args.label_column)?;
                let w = mad_weights(&ds.points)?;
                if !w.zero_mad.is_empty() {
                    eprintln!(
                        "warning: features {:?} have zero MAD in {}; falling back to unit \
                         weight for them — freeze these features explicitly if they must \
                         not change",
                        w.zero_mad,
                        path.display()
                    );
                }
                w.alpha
            } else {
                eprintln!("note: no --alpha or --mad-from given; using unit manhattan weights");
                DVector::from_element(dim, 1.0)
            };
            Ok(Regularizer::WeightedManhattan { alpha })
        }
        "euclidean" => Ok(Regularizer::Euclidean),
        "gl2" => {
            let path = args.gl2_matrix.as_ref().ok_or_else(|| {
                lvqcf::Error::InvalidInput("--gl2-matrix is required with --regularizer gl2".into())
            })?;
            let text = fs::read_to_string(path)?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
                .map_err(|e| lvqcf::Error::Parse(format!("--gl2-matrix: {e}")))?;
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(lvqcf::Error::InvalidInput(format!(
                    "--gl2-matrix: expected a {dim}x{dim} matrix"
                )));
            }
            let mut m = DMatrix::zeros(dim, dim);
            for (i, row) in rows.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            Ok(Regularizer::GeneralizedL2 { lambda: m })
        }
        other => Err(lvqcf::Error::InvalidInput(format!(
            "--regularizer: expected manhattan, euclidean or gl2, got \"{other}\""
        ))),
    }
}

fn cmd_explain(args: ExplainArgs) -> lvqcf::Result<u8> {
    let model = LvqModel::load(&args.model)?;
    let x = parse_vector(&args.input, "--input")?;
    let regularizer = build_regularizer(&args, model.dim())?;
    let constraints = match &args.constraints {
        Some(path) => UserConstraints::from_json_str(&fs::read_to_string(path)?)?,
        None => UserConstraints::default(),
    };

    let result = if args.baseline {
        baseline_explain(
            &model,
            &x,
            args.target_label,
            &regularizer,
            args.epsilon,
            &BaselineConfig::default(),
        )?
    } else {
        let req = CfRequest::new(x.clone(), args.target_label, regularizer)
            .with_epsilon(args.epsilon)
            .with_constraints(constraints)
            .with_parallel(args.parallel);
        explain(&model, &req)?
    };

    let json = serde_json::to_string_pretty(&result.to_json()).expect("result serialization");
    match &args.output {
        Some(path) => fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }

    match &result.solution {
        Some(sol) => {
            eprintln!(
                "counterfactual via prototype {} with distance {:.6} ({} targets tried, {:.1} ms)",
                sol.target_prototype,
                sol.distance,
                result.per_target.len(),
                result.total_wall_time_ms
            );
            Ok(0)
        }
        None => {
            eprintln!("no counterfactual found; per-target statuses:");
            for t in &result.per_target {
                eprintln!("  prototype {}: {}", t.index, t.status);
            }
            Ok(2)
        }
    }
}

fn cmd_bench(args: BenchArgs) -> lvqcf::Result<u8> {
    let mut spec = BenchSpec::from_json_str(&fs::read_to_string(&args.spec)?)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.parallel {
        spec.parallel = true;
    }
    let report = run_bench(&spec)?;
    if report.zero_mad_events > 0 {
        eprintln!(
            "warning: {} zero-MAD feature/fold combinations fell back to unit manhattan weight",
            report.zero_mad_events
        );
    }
    eprint!("{}", report.to_table());
    match &args.output {
        Some(path) => fs::write(path, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    Ok(0)
}

fn cmd_validate(args: ValidateArgs) -> lvqcf::Result<u8> {
    let model = LvqModel::load(&args.model)?;
    eprintln!(
        "ok: dim={}, metric={}, {} prototypes, labels {:?}",
        model.dim(),
        model.metric().name(),
        model.prototypes().len(),
        model.labels()
    );
    Ok(0)
}
