mod commands;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pat_core::PatError;

/// Part-aware transformer toolkit: synthetic data, training, evaluation and
/// numerical self-checks.
#[derive(Parser, Debug)]
#[command(name = "pat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the source and target synthetic domains.
    GenData(Common),
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or precomputed features) and print metrics JSON.
    Eval(EvalArgs),
    /// Dump global and part features for a domain.
    Embed(EmbedArgs),
    /// Finite-difference check of every differentiable op and the objective.
    Gradcheck(CheckArgs),
    /// Write fused attention maps as binary PGM images.
    Attnmap(AttnArgs),
    /// Compare the fast kernels against brute-force references.
    OracleCheck(CheckArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    no_csl: bool,
    #[arg(long)]
    no_psd: bool,
    /// Resume from this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "features")]
    ckpt: Option<PathBuf>,
    /// Score a feature container instead of running the encoder.
    #[arg(long, conflicts_with = "ckpt")]
    features: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "target")]
    domain: Domain,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "target")]
    domain: Domain,
    /// Also write each sample's `n` nearest neighbours per part.
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AttnArgs {
    #[command(flatten)]
    common: Common,
    /// Freshly initialized weights are used when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// `cls`, `p1`, `p2`, ...; repeat for several maps.
    #[arg(long = "token", required = true)]
    tokens: Vec<String>,
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    /// Sample index within the domain.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PatError>() {
            return match e {
                PatError::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("PAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| PatError::Config(format!("PAT_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Gradcheck(a) => commands::gradcheck(a.seed),
        Command::Attnmap(a) => commands::attnmap(&a),
        Command::OracleCheck(a) => commands::oracle_check(a.seed),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
