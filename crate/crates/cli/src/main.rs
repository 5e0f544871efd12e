//! Command-line front end: corpus generation, classifier training,
//! one-off explanations, faithfulness curves, report aggregation, and
//! full experiment runs.
//!
//! Every subcommand is a thin wrapper over the library operations, so
//! each stage can be re-run independently from its saved inputs. Exit
//! code is 0 on success; on failure the offending stage is named on
//! stderr and the exit code is nonzero.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use xplain_core::analytic;
use xplain_core::corpus::{gen_synthetic, load_jsonl, save_jsonl, AnnotatedText, Task};
use xplain_core::experiment::{derive_seed, report, run_experiment, ExperimentConfig};
use xplain_core::faithfulness::{aggregate, run_curve, CurveOptions, Direction};
use xplain_core::saliency::{random_saliency, SaliencyMap};
use xplain_core::tinylm::{evaluate, train, ModelConfig, ModelWeights};
use xplain_core::{Error, Result};

#[derive(Parser)]
#[command(name = "xplain", version, about = "Explainability experiments for tiny text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus as JSONL.
    Gen(GenArgs),
    /// Train the reference classifier and save a checkpoint.
    Train(TrainArgs),
    /// Explain one text with one method and print the token table.
    Explain(ExplainArgs),
    /// Re-run faithfulness curves from a saved saliency CSV.
    Curves(CurvesArgs),
    /// Recompute the aggregate CSV from a per-text curves CSV.
    Report(ReportArgs),
    /// Run the full experiment described by a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Classification task: hazard or polarity.
    #[arg(long)]
    task: String,
    /// Number of texts to generate.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Corpus seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Classification task: hazard or polarity.
    #[arg(long)]
    task: String,
    /// Training corpus (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Weight-initialization seed.
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Method {
    Agrad,
    Gradin,
    Igrad,
    Random,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Agrad => "agrad",
            Method::Gradin => "gradin",
            Method::Igrad => "igrad",
            Method::Random => "random",
        }
    }
}

#[derive(Args)]
struct ExplainArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Classification task: hazard or polarity.
    #[arg(long)]
    task: String,
    /// Attribution method.
    #[arg(long, value_enum, default_value_t = Method::Gradin)]
    method: Method,
    /// Text to explain.
    #[arg(long)]
    text: String,
    /// Seed (used by --method random).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional saliency CSV to write alongside the printed table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Model checkpoint answering the masked re-classifications.
    #[arg(long)]
    model: PathBuf,
    /// Classification task: hazard or polarity.
    #[arg(long)]
    task: String,
    /// Corpus the saliency maps refer to (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Saliency CSV to replay.
    #[arg(long)]
    saliency: PathBuf,
    /// Token that replaces masked tokens.
    #[arg(long, default_value = "<unk>")]
    mask_token: String,
    /// Master seed the per-curve tie-break seeds derive from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for curves.csv and curve_aggregate.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-text curves CSV to aggregate.
    #[arg(long)]
    curves: PathBuf,
    /// Aggregate CSV path to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::Gen(a) => ("gen", gen(a)),
        Command::Train(a) => ("train", train_cmd(a)),
        Command::Explain(a) => ("explain", explain(a)),
        Command::Curves(a) => ("curves", curves(a)),
        Command::Report(a) => ("report", report_cmd(a)),
        Command::Run(a) => ("run", run(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage,
                _ => stage,
            };
            eprintln!("error [stage {stage}]: {e}");
            ExitCode::FAILURE
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let task = Task::parse(&a.task)?;
    let corpus = gen_synthetic(task, a.n, a.seed);
    save_jsonl(&a.out, &corpus)?;
    println!("wrote {} texts to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let task = Task::parse(&a.task)?;
    let labels = task.label_set();
    let corpus = load_jsonl(&a.corpus, &labels)?;
    let config = ModelConfig::new(a.d_model, a.layers, a.heads, a.seed);
    let outcome = train(&corpus, &labels, &config, a.epochs, a.lr)?;
    let accuracy = evaluate(&outcome.weights, &corpus)?;
    outcome.weights.save(&a.out)?;
    println!(
        "trained on {} texts: accuracy {:.3} -> {}",
        corpus.len(),
        accuracy,
        a.out.display()
    );
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let task = Task::parse(&a.task)?;
    let labels = task.label_set();
    let model = ModelWeights::load(&a.model)?;
    let trace = model.classify_text(&a.text)?;
    let map = match a.method {
        Method::Agrad => analytic::agrad(&model, &trace)?,
        Method::Gradin => analytic::gradin(&model, &trace)?,
        Method::Igrad => analytic::igrad(&model, &trace, None)?,
        Method::Random => random_saliency(&trace.seq, a.seed)?,
    };
    println!("label: {}", trace.predicted_label(&labels));
    print_table(&map);
    if let Some(out) = &a.out {
        let rows = vec![("text0001".to_string(), vec![(a.method.as_str().to_string(), map)])];
        fs::write(out, report::saliency_csv(&rows)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn print_table(map: &SaliencyMap) {
    let width = map
        .tokens
        .iter()
        .map(|t| t.chars().count())
        .max()
        .unwrap_or(0)
        .max("token".len());
    println!("{:<width$}  weight", "token");
    for (token, weight) in map.tokens.iter().zip(&map.weights) {
        println!("{token:<width$}  {weight:.6}");
    }
}

fn curves(a: CurvesArgs) -> Result<()> {
    let task = Task::parse(&a.task)?;
    let labels = task.label_set();
    let model = ModelWeights::load(&a.model)?;
    let corpus = load_jsonl(&a.corpus, &labels)?;
    let by_id: HashMap<&str, &AnnotatedText> =
        corpus.iter().map(|t| (t.id.as_str(), t)).collect();
    let saliency = report::read_saliency_csv(&fs::read(&a.saliency)?)?;
    let mut curves = Vec::new();
    for (text_id, methods) in &saliency {
        let text = by_id.get(text_id.as_str()).ok_or_else(|| {
            Error::Config(format!("text {text_id} is not in {}", a.corpus.display()))
        })?;
        let seq = model.tokenize(&text.text);
        for (method, map) in methods {
            for direction in [Direction::HighToLow, Direction::LowToHigh] {
                let options = CurveOptions {
                    mask_token: a.mask_token.clone(),
                    seed: derive_seed(
                        a.seed,
                        &format!("curve/{method}/{}/{text_id}", direction.as_str()),
                    ),
                    sticky: false,
                };
                let mut classify = |masked: &str| {
                    model
                        .classify_text(masked)
                        .map(|t| t.predicted_label(&labels).to_string())
                };
                curves.push(run_curve(&mut classify, text_id, &seq, map, direction, &options)?);
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("curves.csv"), report::curves_csv(&curves)?)?;
    let agg = aggregate(&curves)?;
    fs::write(
        a.out.join("curve_aggregate.csv"),
        report::aggregate_csv(&agg)?,
    )?;
    println!("wrote {} curves to {}", curves.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let curves_bytes = fs::read(&a.curves)?;
    fs::write(&a.out, report::reaggregate(&curves_bytes)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(out) = a.out {
        config.out_dir = out;
    }
    let manifest = run_experiment(&config)?;
    println!(
        "bundle complete: {} ({} files)",
        config.out_dir.display(),
        manifest.files.len()
    );
    Ok(())
}
