//! Command-line front end: configuration, stage orchestration and the
//! external activation import.

pub mod config;
pub mod import;
pub mod logging;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use introspect_core::naps::NapMode;
use log::{error, info};

pub use config::ExperimentConfig;
pub use stages::Context;

pub const OUT_ENV: &str = "INTROSPECT3D_OUT";

/// Failure classes, mapped to exit codes 1 (validation) and 2 (runtime).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<introspect_core::Error> for CliError {
    fn from(e: introspect_core::Error) -> Self {
        use introspect_core::Error as E;
        match e {
            E::Config(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "introspect3d",
    version,
    about = "Introspection toolkit for a toy LiDAR detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (default: $INTROSPECT3D_OUT, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModeArgs {
    /// Restrict to these NAP modes (comma separated); default: config modes.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene dataset.
    GenData(Common),
    /// Train the pillar detector and report its held-out miss rate.
    TrainDetector(Common),
    /// Label frames and store activation bundles, or import external bundles.
    BuildErrorset {
        #[command(flatten)]
        common: Common,
        /// Directory of externally dumped bundles (ppc, mla, lla).
        #[arg(long, requires = "labels")]
        import: Option<PathBuf>,
        /// JSON object mapping frame id to 0 (NoError) or 1 (Error).
        #[arg(long, requires = "import")]
        labels: Option<PathBuf>,
    },
    /// Train one introspector per mode.
    TrainIntrospector {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        modes: ModeArgs,
    },
    /// Test-split metrics and confidence buckets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        modes: ModeArgs,
    },
    /// Eigen-CAM heatmaps for test frames.
    Explain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        modes: ModeArgs,
    },
    /// Operation counts and latency per mode.
    Profile {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        modes: ModeArgs,
    },
    /// Every stage in order.
    RunAll(Common),
}

fn context(common: &Common) -> Result<Context, CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Context::new(cfg, out))
}

fn modes(ctx: &Context, args: &ModeArgs) -> Result<Vec<NapMode>, CliError> {
    if args.modes.is_empty() {
        return Ok(ctx.cfg.modes.clone());
    }
    args.modes
        .iter()
        .map(|m| {
            m.trim()
                .to_ascii_uppercase()
                .parse()
                .map_err(|e: introspect_core::Error| CliError::Validation(e.to_string()))
        })
        .collect()
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(c) => stages::gen_data(&context(&c)?),
        Command::TrainDetector(c) => stages::train_detector(&context(&c)?),
        Command::BuildErrorset {
            common,
            import,
            labels,
        } => {
            let ctx = context(&common)?;
            match (import, labels) {
                (Some(dir), Some(labels)) => {
                    let out = ctx.errorset_dir();
                    let (ds, summary) = import::import_external_bundles(
                        &dir,
                        &labels,
                        ctx.cfg.errorset.split_ratios,
                        ctx.cfg.errorset.zeroing_percentile,
                        ctx.cfg.seed.wrapping_add(3),
                        &out,
                    )?;
                    info!(
                        "imported {} frames; {} unknown labels and {} unlabelled bundles skipped",
                        summary.n_records, summary.unknown_labels, summary.unlabelled_bundles
                    );
                    stages::report_dataset(&ds);
                    Ok(())
                }
                _ => stages::build_errorset(&ctx),
            }
        }
        Command::TrainIntrospector { common, modes: m } => {
            let ctx = context(&common)?;
            stages::train_introspector(&ctx, &modes(&ctx, &m)?)
        }
        Command::Evaluate { common, modes: m } => {
            let ctx = context(&common)?;
            stages::evaluate(&ctx, &modes(&ctx, &m)?)
        }
        Command::Explain { common, modes: m } => {
            let ctx = context(&common)?;
            stages::explain(&ctx, &modes(&ctx, &m)?)
        }
        Command::Profile { common, modes: m } => {
            let ctx = context(&common)?;
            stages::profile(&ctx, &modes(&ctx, &m)?)
        }
        Command::RunAll(c) => stages::run_all(&context(&c)?),
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    logging::init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
