use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qagen::backend::{serve, MockBackend, MockConfig, Seq2SeqBackend};
use qagen::error::Error;
use qagen::mrqa::{aggregate_runs, evaluate, read_predictions, EvalReport};
use qagen::mrqa_format::load_mrqa_jsonl;
use qagen::pipeline::{report, BackendKind, PipelineConfig, Run, Stage};

#[derive(Parser)]
#[command(name = "qagen", version, about = "Synthetic extractive QA data generation and evaluation")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Process,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the backend kind.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of QA model runs.
    #[arg(long)]
    num_runs: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(b) = self.backend {
            cfg.backend.name = match b {
                BackendArg::Mock => BackendKind::Mock,
                BackendArg::Process => BackendKind::Process,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.num_runs {
            cfg.num_runs = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Read the corpus into corpus.jsonl.
    Ingest(RunArgs),
    /// Tag entities and write answer candidates.
    SampleAnswers(RunArgs),
    /// Train the question generator on the few-shot split.
    TrainQgen(RunArgs),
    /// Generate questions for every candidate.
    Generate(RunArgs),
    /// Pool sampling, rule filtering and consistency filtering.
    Filter(RunArgs),
    /// Train the QA model runs.
    TrainMrqa(RunArgs),
    /// Evaluate a run, or a predictions file against a gold file.
    Evaluate {
        #[command(flatten)]
        run: Option<RunArgs>,
        /// Predictions JSONL ({id, prediction}).
        #[arg(long, requires = "gold", conflicts_with = "config")]
        pred: Option<PathBuf>,
        /// Gold MRQA JSONL.
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Skip leading stages whose outputs are unchanged.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Serve the mock backend over the worker protocol on stdin/stdout.
    #[command(hide = true)]
    ServeBackend {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Write to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.into(),
            source: Box::new(other),
        },
    }
}

fn run_one(args: &RunArgs, stage: Stage) -> Result<(), Error> {
    let cfg = args.load().map_err(|e| stage_error(stage.name(), e))?;
    let mut run = Run::open(cfg).map_err(|e| stage_error(stage.name(), e))?;
    run.run_stage(stage)?;
    emit(&format!("{}: done ({})\n", stage.name(), run.dir.display()));
    Ok(())
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Ingest(a) => run_one(&a, Stage::Ingest),
        Command::SampleAnswers(a) => run_one(&a, Stage::SampleAnswers),
        Command::TrainQgen(a) => run_one(&a, Stage::TrainQgen),
        Command::Generate(a) => run_one(&a, Stage::Generate),
        Command::Filter(a) => run_one(&a, Stage::Filter),
        Command::TrainMrqa(a) => run_one(&a, Stage::TrainMrqa),
        Command::Evaluate { run, pred, gold, out } => {
            let eval = || -> Result<(), Error> {
                let report = match (run, pred, gold) {
                    (_, Some(pred), Some(gold)) => {
                        let gold = load_mrqa_jsonl(&gold, qagen::jsonl::is_gzip_path(&gold))?;
                        let result = evaluate(&read_predictions(&pred)?, &gold)?;
                        EvalReport::new(&aggregate_runs(vec![result])?)
                    }
                    (Some(run), _, _) => {
                        let mut r = Run::open(run.load()?)?;
                        EvalReport::new(&r.evaluate()?)
                    }
                    _ => return Err(Error::Config("evaluate needs --config or --pred and --gold".into())),
                };
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Backend(e.to_string()))?;
                if let Some(out) = out {
                    qagen::jsonl::write_json(&out, &report)?;
                }
                emit(&format!("{text}\n"));
                Ok(())
            };
            eval().map_err(|e| stage_error("evaluate", e))
        }
        Command::Pipeline { run, resume } => {
            let cfg = run.load().map_err(|e| stage_error("pipeline", e))?;
            let mut r = Run::open(cfg).map_err(|e| stage_error("pipeline", e))?;
            let aggregate = r.run_all(resume)?;
            emit(&report(&r.dir).map_err(|e| stage_error("report", e))?);
            emit(&format!("F1 {aggregate}\n"));
            Ok(())
        }
        Command::Report { run_dir } => {
            emit(&report(&run_dir).map_err(|e| stage_error("report", e))?);
            Ok(())
        }
        Command::ServeBackend { checkpoint } => {
            let mut backend = MockBackend::new(MockConfig::default())?;
            if let Some(c) = checkpoint {
                backend.load(&c)?;
            }
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve(&mut backend, stdin.lock(), stdout.lock())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
