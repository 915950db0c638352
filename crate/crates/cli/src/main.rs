use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lirex::evaluation::{MetricReport, Question};
use lirex::inference::InferenceMode;
use lirex::pipeline::synthetic::write_synthetic_splits;
use lirex::pipeline::{self, PipelineConfig, RunOptions, Stage};
use lirex::selector::SelectionStrategy;

#[derive(Parser)]
#[command(name = "lirex", version, about = "Staged rationale, explanation and NLI training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run even if upstream stages are incomplete; ignore cached outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    mode: Option<InferenceMode>,
    #[arg(long)]
    strategy: Option<SelectionStrategy>,
    /// Worker threads for fan-out stages (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Describe the stage without running it.
    #[arg(long)]
    dry_run: bool,
    /// Print reports as JSON lines instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load and filter the corpora, build vocabularies.
    Prepare(StageArgs),
    #[command(alias = "train_rationalizer")]
    TrainRationalizer(StageArgs),
    #[command(alias = "train_generator")]
    TrainGenerator(StageArgs),
    /// Label-conditioned explanations for every instance.
    Generate(StageArgs),
    #[command(alias = "train_selector")]
    TrainSelector(StageArgs),
    /// Selector distributions and the chosen explanation per instance.
    Select(StageArgs),
    #[command(alias = "train_inference")]
    TrainInference(StageArgs),
    Evaluate(StageArgs),
    /// Faithfulness and spurious-explanation probes.
    Probe(StageArgs),
    /// Draw the human evaluation sample.
    #[command(alias = "human_eval")]
    HumanEval(StageArgs),
    /// Every stage from prepare through probe.
    #[command(alias = "run_all")]
    RunAll(StageArgs),
    /// Answer human evaluation questions on stdin.
    Annotate {
        #[arg(long, short)]
        config: PathBuf,
        /// rationale or relevance
        #[arg(long)]
        question: Question,
        #[arg(long)]
        annotator: String,
    },
    /// Agreement between two annotators.
    Agreement {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        question: Question,
        first: String,
        second: String,
    },
    /// Write a starter configuration.
    InitConfig {
        /// Directory holding train.csv, dev.csv and test.csv.
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "cache")]
        cache_dir: PathBuf,
        /// Pretrained backbones with full-scale hyper-parameters.
        #[arg(long)]
        full_scale: bool,
        #[arg(long, short, default_value = "lirex.toml")]
        output: PathBuf,
    },
    /// Write a templated synthetic corpus split into train/dev/test.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, short, default_value_t = 200)]
        n: usize,
    },
}

fn load_config(args: &StageArgs) -> lirex::Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(s) = args.strategy {
        config.strategy = s;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    Ok(config)
}

fn print_reports(reports: &[MetricReport], json: bool) -> lirex::Result<()> {
    for r in reports {
        if json {
            println!("{}", r.to_json_line()?);
        } else {
            print!("{r}");
        }
    }
    Ok(())
}

fn run_stages(stages: &[Stage], args: &StageArgs) -> lirex::Result<()> {
    let config = load_config(args)?;
    let opts = RunOptions { force: args.force };
    for &stage in stages {
        if args.dry_run {
            print!("{}", pipeline::dry_run(&config, stage)?);
            continue;
        }
        let outcome = pipeline::run_stage(&config, stage, opts)?;
        print_reports(&outcome.reports, args.json)?;
    }
    Ok(())
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

fn run(cli: Cli) -> lirex::Result<()> {
    let stage = |s: Stage, a: &StageArgs| run_stages(&[s], a);
    match &cli.command {
        Command::Prepare(a) => stage(Stage::Prepare, a),
        Command::TrainRationalizer(a) => stage(Stage::TrainRationalizer, a),
        Command::TrainGenerator(a) => stage(Stage::TrainGenerator, a),
        Command::Generate(a) => stage(Stage::Generate, a),
        Command::TrainSelector(a) => stage(Stage::TrainSelector, a),
        Command::Select(a) => stage(Stage::Select, a),
        Command::TrainInference(a) => stage(Stage::TrainInference, a),
        Command::Evaluate(a) => stage(Stage::Evaluate, a),
        Command::Probe(a) => stage(Stage::Probe, a),
        Command::HumanEval(a) => stage(Stage::HumanEval, a),
        Command::RunAll(a) => {
            let all: Vec<Stage> = Stage::ALL.into_iter().filter(|&s| s != Stage::HumanEval).collect();
            run_stages(&all, a)
        }
        Command::Annotate {
            config,
            question,
            annotator,
        } => {
            let config = PipelineConfig::load(config)?;
            let stdin = io::stdin();
            let outcome = pipeline::annotate(&config, *question, annotator, &mut stdin.lock(), &mut io::stdout())?;
            let state = if outcome.completed { "complete" } else { "paused" };
            println!("\n{} judgments recorded ({state})", outcome.records.len());
            Ok(())
        }
        Command::Agreement {
            config,
            question,
            first,
            second,
        } => {
            let config = PipelineConfig::load(config)?;
            print!("{}", pipeline::agreement_report(&config, *question, first, second)?);
            Ok(())
        }
        Command::InitConfig {
            data_dir,
            cache_dir,
            full_scale,
            output,
        } => {
            let abs = |p: &Path| std::path::absolute(p).map_err(|e| lirex::Error::Config(format!("{}: {e}", p.display())));
            let out_abs = abs(output)?;
            let base = out_abs.parent().unwrap_or(Path::new("/"));
            let data = relative_to(&abs(data_dir)?, base);
            let cache = relative_to(&abs(cache_dir)?, base);
            let config = if *full_scale {
                PipelineConfig::full_scale(&data, &cache)
            } else {
                PipelineConfig::toy(&data, &cache)
            };
            std::fs::write(output, config.to_toml()?).map_err(|e| lirex::Error::Config(format!("{}: {e}", output.display())))?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Synth { out, seed, n } => {
            write_synthetic_splits(out, *seed, *n)?;
            println!("wrote train.csv, dev.csv and test.csv to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
