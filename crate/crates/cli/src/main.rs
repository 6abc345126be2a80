//! `dsa`: gradient checks, oracle sweeps, cost reports and the order demo.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsa_core::backbone::Position;
use dsa_core::dsa::{ContextSource, DsaConfig};

use output::{CliError, Format};

#[derive(Debug, Parser)]
#[command(name = "dsa", version, about = "Dynamic segment aggregation toolkit")]
struct Cli {
    /// Base seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Worker threads for independent cells; results keep their order.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and a 2-block net.
    Gradcheck(GradcheckArgs),
    /// Segment convolution against the brute-force 4D convolution.
    Oracle(OracleArgs),
    /// Analytic MACs and parameters of a staged network.
    Flops(FlopsArgs),
    /// Baseline vs DSA on the snippet-order task.
    TrainDemo(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Context {
    Split,
    Full,
}

#[derive(Debug, Clone, Args)]
struct DsaArgs {
    /// Snippets per video.
    #[arg(long, default_value_t = 4)]
    u: usize,
    /// Kernel size along the snippet axis (odd).
    #[arg(long, default_value_t = 3)]
    l: usize,
    /// MLP hidden width factor.
    #[arg(long, default_value_t = 2)]
    alpha: usize,
    /// Fraction of channels aggregated, in [0, 1].
    #[arg(long, default_value_t = 0.125)]
    beta: f64,
    /// Insertion point inside a residual block: I, II, III or IV.
    #[arg(long, default_value = "II", value_parser = parse_position)]
    position: Position,
    /// Channels that feed the kernel generator.
    #[arg(long, value_enum, default_value_t = Context::Split)]
    context: Context,
}

impl DsaArgs {
    fn config(&self, channels: usize) -> Result<DsaConfig, CliError> {
        let cfg = DsaConfig {
            snippets: self.u,
            kernel_size: self.l,
            alpha: self.alpha,
            beta: self.beta,
            channels,
            context: match self.context {
                Context::Split => ContextSource::Split,
                Context::Full => ContextSource::Full,
            },
        };
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }
}

fn parse_position(s: &str) -> Result<Position, String> {
    s.parse().map_err(|e: dsa_core::Error| e.to_string())
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seeds per op, counting up from --seed.
    #[arg(long, default_value_t = dsa_core::gradcheck::DEFAULT_SEEDS)]
    seeds: usize,
    /// Restrict to these ops (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
    /// List the ops and exit.
    #[arg(long)]
    list: bool,
    /// Corrupt the backward pass of one op; exercises the failure path.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Drop grid cells with any extent above this.
    #[arg(long)]
    max_extent: Option<usize>,
    /// Seeds per grid cell, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Kernel size along the snippet axis (odd).
    #[arg(long, default_value_t = 3)]
    l: usize,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Built-in architecture name or path to a JSON description.
    #[arg(long, default_value = "i3d_r50")]
    arch: String,
    /// Frames per snippet; defaults to the architecture's reference input.
    #[arg(long)]
    frames: Option<usize>,
    /// Square input resolution; defaults to the reference input.
    #[arg(long)]
    res: Option<usize>,
    /// Override the number of classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Only report the parameter count.
    #[arg(long)]
    params: bool,
    /// Append the cost of DSA modules.
    #[arg(long)]
    dsa: bool,
    /// DSA placement as stage:modules pairs.
    #[arg(long, default_value = "res3:2,res4:3")]
    dsa_stages: String,
    #[command(flatten)]
    dsa_args: DsaArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Samples in the generated dataset (even).
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Independent runs, seeded from --seed upward.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Write the dataset and trained networks of each run here.
    #[arg(long)]
    save_dir: Option<PathBuf>,
    #[command(flatten)]
    dsa_args: DsaArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DSA_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let ctx = commands::Context {
        seed: cli.seed,
        format: cli.format,
        pool,
    };
    let result = match &cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Oracle(a) => commands::oracle(&ctx, a),
        Command::Flops(a) => commands::flops(&ctx, a),
        Command::TrainDemo(a) => commands::train_demo(&ctx, a),
    };
    match result {
        Ok(out) => {
            print!("{}", out.text);
            ExitCode::from(if out.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
