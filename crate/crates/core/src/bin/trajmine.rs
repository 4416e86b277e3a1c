use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use trajmine::features::PartitionScheme;
use trajmine::pipeline::{run_stage, Overrides, PipelineConfig, Stage};
use trajmine::Error;

/// Critical example mining pipeline.
#[derive(Parser, Debug)]
#[command(name = "trajmine", version)]
struct Cli {
    /// gen, ingest, features, train, score, mine, eval, ablate or all
    stage: String,
    /// TOML or JSON pipeline configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated mining ratios
    #[arg(long, value_delimiter = ',')]
    r: Option<Vec<f64>>,
    #[arg(long)]
    lambda: Option<f64>,
    /// e.g. fixsegnum:5 or fixseglen:1.0
    #[arg(long)]
    scheme: Option<String>,
}

fn run(cli: Cli) -> trajmine::Result<()> {
    let stage: Stage = cli.stage.parse()?;
    let mut cfg = PipelineConfig::from_file(&cli.config)?;
    let scheme = cli.scheme.as_deref().map(str::parse::<PartitionScheme>).transpose()?;
    cfg.apply(&Overrides { out_dir: cli.out, seed: cli.seed, r: cli.r, lambda: cli.lambda, scheme });
    for path in run_stage(stage, &cfg)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training { log, .. } = &e {
                eprintln!("last recorded epochs: {:?}", log.epochs.iter().rev().take(3).collect::<Vec<_>>());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
