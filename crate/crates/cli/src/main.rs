use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use causal_cxr::causal::Graph;
use causal_cxr::synthbench::Split;
use causal_cxr_cli::commands;
use causal_cxr_cli::config::RunConfig;
use causal_cxr_cli::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "causal-cxr", version, about = "Confounded multi-label image classification with backdoor-adjusted training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphArg {
    Mutilated,
    Observational,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into <out>/data.
    GenData(RunArgs),
    /// Train and keep the checkpoint with the best causal validation AUC.
    Train(RunArgs),
    /// Per-class AUC with bootstrap intervals for a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train the four attention / causal-loss variants and compare them.
    Ablate(RunArgs),
    /// Check backdoor adjustment and the independence identities on a table.
    ScmCheck {
        /// Table file in the `scm v1` text format.
        table: Option<PathBuf>,
        /// Use a bundled table: confounded, negative-control or singleton.
        #[arg(long, conflicts_with = "table")]
        example: Option<String>,
        #[arg(long, value_enum, default_value = "mutilated")]
        graph: GraphArg,
    },
    /// Write per-class decoder attention maps for one image.
    ExportAttention {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        index: usize,
    },
    /// Print the default config with one comment per key.
    Defaults,
}

fn load_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(CliError::from)?,
        None => RunConfig::default(),
    };
    let cfg = match args.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    Ok(cfg.with_out_dir(args.out.clone()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let stdout = std::io::stdout();
    let out = &mut stdout.lock();
    match cli.command {
        Command::GenData(a) => {
            commands::gen_data(&load_config(&a)?, out)?;
        }
        Command::Train(a) => {
            commands::train(&load_config(&a)?, out)?;
        }
        Command::Eval { run, checkpoint, split } => {
            commands::eval(&load_config(&run)?, checkpoint.as_deref(), split.into(), out)?;
        }
        Command::Ablate(a) => {
            commands::ablate(&load_config(&a)?, out)?;
        }
        Command::ScmCheck { table, example, graph } => {
            let text = match (table, example) {
                (Some(p), _) => std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Core(e.into()))
                    .with_context(|| format!("reading {}", p.display()))?,
                (None, Some(name)) => commands::bundled_table(&name)?.to_string(),
                (None, None) => return Err(CliError::Usage("give a table path or --example".into()).into()),
            };
            let graph = match graph {
                GraphArg::Mutilated => Graph::Mutilated,
                GraphArg::Observational => Graph::Observational,
            };
            commands::scm_check(&text, graph, out)?;
        }
        Command::ExportAttention { run, checkpoint, split, index } => {
            commands::export_attention(&load_config(&run)?, checkpoint.as_deref(), split.into(), index, out)?;
        }
        Command::Defaults => print!("{}", RunConfig::documented_defaults()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_USAGE, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
