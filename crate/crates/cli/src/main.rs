//! Batch driver: one subcommand per pipeline stage.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage, 3 missing or stale upstream
//! stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tailshare::metrics::format_ablation;
use tailshare::pipeline::{self, PipelineConfig, RunManifest, Workspace};
use tailshare::Error;

#[derive(Debug, Parser)]
#[command(name = "tailshare", version, about = "Semantic-ID head-to-tail transfer for long-tail CTR prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen(Common),
    /// Train the contrastive encoders and write aligned representations.
    Align(Common),
    /// Train the residual quantizers and assign semantic IDs.
    Quantize(Common),
    /// Train the ranking model.
    Train(Common),
    /// Score the test split and write the slice report.
    Eval(Common),
    /// Train the full model and six ablations, then write the delta table.
    Ablate(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Workspace root holding one directory per stage.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Replace existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads for scoring and ablation variants.
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dependency(_) => 3,
        Error::Config(_) | Error::OutputExists(_) => 2,
        _ => 1,
    }
}

fn workspace(c: &Common) -> Result<Workspace, Error> {
    if !c.config.is_file() {
        return Err(Error::Config(format!("config file {} not found", c.config.display())));
    }
    let mut config = PipelineConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    Ok(Workspace::new(&c.out, config, &c.config, c.force))
}

fn report(m: &RunManifest) {
    println!("{}: wrote {} files (config {})", m.command, m.outputs.len(), m.config_hash);
}

fn run(cmd: &Command) -> Result<(), Error> {
    let c = match cmd {
        Command::Gen(c)
        | Command::Align(c)
        | Command::Quantize(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::Ablate(c) => c,
    };
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let ws = workspace(c)?;
    match cmd {
        Command::Gen(_) => report(&pipeline::run_gen(&ws)?),
        Command::Align(_) => report(&pipeline::run_align(&ws)?),
        Command::Quantize(_) => report(&pipeline::run_quantize(&ws)?),
        Command::Train(_) => report(&pipeline::run_train(&ws)?),
        Command::Eval(_) => {
            let m = pipeline::run_eval(&ws)?;
            report(&m);
            let text = std::fs::read_to_string(ws.dir(pipeline::Stage::Eval).join("report.txt"))
                .map_err(|e| Error::io(ws.dir(pipeline::Stage::Eval), e))?;
            print!("{text}");
        }
        Command::Ablate(_) => {
            let (m, table) = pipeline::run_ablate(&ws)?;
            report(&m);
            print!("{}", format_ablation(&table));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
