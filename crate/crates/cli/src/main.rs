use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odis_core::llm::ProviderKind;
use odis_core::pipeline::{self, Mode, Pipeline, PipelineError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "odis", version, about = "Demonstration selection for cross-domain text-to-SQL")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "odis.toml")]
    config: PathBuf,
    /// Overrides run.seed and synthesis.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.mode.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Overrides run.workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides llm.provider (mock, replay or http).
    #[arg(long, global = true, value_parser = parse_provider)]
    provider: Option<ProviderKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the dataset and write the catalog with content samples.
    Ingest,
    /// Generate and verify the synthetic in-domain pool.
    Synthesize,
    /// Add zero-shot predictions to the out-of-domain pool.
    PredictZeroshot,
    /// Print the retrieval trace for test examples as JSON lines.
    Retrieve {
        /// Only this test example.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Print the final prompt of one test example.
    RenderPrompt {
        #[arg(long)]
        index: usize,
    },
    /// Decode every test example and score the predictions.
    Run,
    /// Score a predictions file by execution accuracy.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Gold examples; defaults to data.test.
        #[arg(long)]
        gold: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_provider(s: &str) -> Result<ProviderKind, String> {
    match s {
        "mock" => Ok(ProviderKind::Mock),
        "replay" => Ok(ProviderKind::Replay),
        "http" => Ok(ProviderKind::Http),
        _ => Err(format!("unknown provider `{s}` (expected mock, replay or http)")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.synthesis.seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.run.mode = mode;
    }
    if let Some(workers) = cli.workers {
        cfg.run.workers = workers;
    }
    if let Some(provider) = cli.provider {
        cfg.llm.provider = provider;
        if let Some(g) = &mut cfg.llm_generate {
            g.provider = provider;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Ingest => {
            let s = pipeline::ingest(&cfg)?;
            println!(
                "{} databases ({} with content), {} test and {} out-of-domain examples",
                s.databases, s.with_content, s.test_examples, s.ood_examples
            );
            println!("catalog: {}", s.catalog_path.display());
        }
        Command::Synthesize => {
            let report = pipeline::synthesize(&cfg)?;
            for db in &report.databases {
                println!(
                    "{}: {} of {} kept ({} templates, {} rejected)",
                    db.db_id, db.kept, report.target_per_db, db.templates, db.stats.rejected
                );
            }
            println!("pool: {}", report.pool_path.display());
        }
        Command::PredictZeroshot => {
            let (path, counts) = pipeline::predict_zero_shot(&cfg)?;
            println!("{} requests, {} backend calls", counts.requests, counts.backend_calls);
            println!("pool: {}", path.display());
        }
        Command::Retrieve { index } => {
            let p = Pipeline::new(cfg)?;
            let ids: Vec<usize> = match index {
                Some(i) => vec![*i],
                None => (0..p.tests().len()).collect(),
            };
            for id in ids {
                let zero_shot = p.zero_shot(id)?;
                let trace = p.retrieve(id, &zero_shot)?;
                println!("{}", serde_json::json!({"id": id, "zero_shot_sql": zero_shot, "retrieval": trace}));
            }
        }
        Command::RenderPrompt { index } => {
            let p = Pipeline::new(cfg)?;
            let trace = if p.config().run.mode == Mode::ZeroShot {
                Default::default()
            } else {
                let zero_shot = p.zero_shot(*index)?;
                p.retrieve(*index, &zero_shot)?
            };
            println!("{}", p.render(*index, &trace)?);
        }
        Command::Run => {
            let report = pipeline::run(&cfg)?;
            println!(
                "{} examples, {} failed, {:.2} calls per example, {:.2}s",
                report.examples, report.failed_examples, report.calls_per_example, report.wall_time_secs
            );
            if let Some(score) = report.score {
                println!("EX: {:.4}", score.accuracy);
            }
            println!("predictions: {}", report.predictions_path.display());
        }
        Command::Evaluate { predictions, gold } => {
            let score = pipeline::evaluate(&cfg, predictions, gold.as_deref())?;
            eprintln!("{} of {} correct, {} dropped", score.correct, score.scored, score.dropped);
            println!("EX: {:.4}", score.accuracy);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let informational = !e.use_stderr();
            let _ = e.print();
            return if informational { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
