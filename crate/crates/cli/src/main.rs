use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msrf_cli::commands::{self, Context};
use msrf_cli::config::{split_overrides, PipelineConfig};
use msrf_cli::error::{CliError, CliResult};
use msrf_cli::manifest::io_err;

/// Multi-scale road network embeddings, one stage per subcommand.
///
/// Any config key can be overridden with `--section.key value`.
#[derive(Debug, Parser)]
#[command(name = "msrf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run even if upstream artifacts were produced with other settings.
    #[arg(long, global = true)]
    force: bool,
    /// Accept scale orders that break k_S < k_M < k_L.
    #[arg(long, global = true)]
    allow_violations: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grid city with trajectories.
    Synth,
    /// Map-match trajectories to segment sequences.
    Match,
    /// Pick the three hop orders.
    Scales,
    /// Build transfer and interaction matrices.
    Matrices,
    /// Partition every interaction graph into regions.
    Regions,
    /// Train the model and write embeddings.
    Train,
    /// Cross-validate downstream tasks on the embeddings.
    Eval,
    /// Train and evaluate every candidate triple of orders.
    Sweep,
    /// Region overlap tables and embedding similarities.
    Report,
    /// Run match through report in order.
    RunAll,
    /// Print the fully resolved configuration.
    Config,
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<(PipelineConfig, PathBuf)> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((PipelineConfig::parse(&text, overrides)?, base))
        }
        None => Ok((PipelineConfig::parse("", overrides)?, PathBuf::new())),
    }
}

fn run() -> CliResult<()> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{}", e);
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    if let Some(n) = commands::thread_cap()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let (cfg, base) = load_config(cli.config.as_deref(), &overrides)?;
    let mut ctx = Context::new(cfg, base);
    ctx.force = cli.force;
    ctx.allow_violations = cli.allow_violations;
    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Match => commands::cmd_match(&ctx),
        Command::Scales => commands::cmd_scales(&ctx),
        Command::Matrices => commands::cmd_matrices(&ctx),
        Command::Regions => commands::cmd_regions(&ctx),
        Command::Train => commands::cmd_train(&ctx),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Report => commands::cmd_report(&ctx),
        Command::RunAll => commands::cmd_run_all(&ctx),
        Command::Config => {
            print!("{}", ctx.cfg.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msrf: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
