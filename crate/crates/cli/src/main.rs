use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use openhealth_core::pipeline::{self, RunContext, Stage};

#[derive(Parser)]
#[command(name = "openhealth", version, about = "Neighborhood disease-factor analysis pipeline")]
struct Cli {
    /// Suppress the list of written files.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the neighborhood table.
    Ingest(Common),
    /// Score industrial pollution risk per neighborhood.
    Pollution(Common),
    /// Fit one GAM per candidate factor.
    Scan(Common),
    /// PCA plus Gaussian mixture clustering.
    Cluster(Common),
    /// Fit a GAM on the given factors and write its smooth curves.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Comma-separated factor names.
        #[arg(long, value_delimiter = ',')]
        factors: Vec<String>,
    },
    /// Factor-group selection for all neighborhoods and each class.
    Select(Common),
    /// Every stage in order.
    Run(Common),
}

fn context(common: &Common, factors: Option<Vec<String>>) -> Result<RunContext, String> {
    let mut config = pipeline::load_config(&common.config).map_err(|e| e.to_string())?;
    if let Some(f) = factors.filter(|f| !f.is_empty()) {
        config.fit.factors = f;
    }
    RunContext::new(config, common.seed, common.out.clone()).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, stage, factors) = match cli.command {
        Command::Ingest(c) => (c, Some(Stage::Ingest), None),
        Command::Pollution(c) => (c, Some(Stage::Pollution), None),
        Command::Scan(c) => (c, Some(Stage::Scan), None),
        Command::Cluster(c) => (c, Some(Stage::Cluster), None),
        Command::Fit { common, factors } => (common, Some(Stage::Fit), Some(factors)),
        Command::Select(c) => (c, Some(Stage::Select), None),
        Command::Run(c) => (c, None, None),
    };
    let ctx = match context(&common, factors) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    let written = match stage {
        Some(s) => pipeline::run_stage(&ctx, s),
        None => pipeline::run_pipeline(&ctx).map(|r| r.files),
    };
    match written {
        Ok(files) => {
            if !cli.quiet {
                for f in files {
                    println!("{}", f.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
