//! `starkit`: benchmark launcher. Each subcommand spins up its own
//! in-process world, checks a correctness oracle, and emits timing rows as
//! CSV to stdout or to `--csv PATH` (with a `.meta` sidecar).

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use starkit_cli::bench::{
    batch_bench, lbfgs_bench, launch_latency, sf_latency, solve_bench, BatchOpts, Common,
    LbfgsOpts, SolveOpts,
};
use starkit_cli::csvout::{render_csv, write_csv, write_sidecar, BenchRecord};
use starkit_cli::{CliError, CliResult};

use starkit_core::comm::ReduceOp;
use starkit_core::krylov::batched::BatchedMethod;
use starkit_core::krylov::Method;
use starkit_core::lbfgs::Formulation;

#[derive(Parser)]
#[command(name = "starkit", version, about = "communication and solver benchmarks")]
struct Cli {
    /// World size (process-wide thread ranks). Defaults per subcommand.
    #[arg(long, global = true)]
    ranks: Option<usize>,
    /// Inner iteration count for latency loops. Defaults per subcommand.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Seed for every generated problem and dataset.
    #[arg(long, global = true, default_value_t = 20240901)]
    seed: u64,
    /// Write CSV here (plus a .meta sidecar) instead of stdout.
    #[arg(long, global = true)]
    csv: Option<std::path::PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-rank star-forest round trip, value transport only.
    SfPingpong(SizeArgs),
    /// Two-rank star-forest round trip with additive unpacking.
    SfUnpack(SizeArgs),
    /// Task submission latency, enqueue-only versus synchronize-each.
    LaunchLatency,
    /// Time a grid-stencil Krylov solve.
    Solve(SolveArgs),
    /// Lockstep-batched small systems versus one stacked ensemble.
    BatchBench(BatchArgs),
    /// Limited-memory quasi-Newton update/apply throughput sweep.
    LbfgsBench(LbfgsArgs),
}

#[derive(Args)]
struct SizeArgs {
    /// Message sizes in doubles.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 64, 1024, 16384])]
    sizes: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cg,
    CgAsync,
    Tfqmr,
    TfqmrAsync,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Cg => Method::Cg,
            MethodArg::CgAsync => Method::CgAsync,
            MethodArg::Tfqmr => Method::Tfqmr,
            MethodArg::TfqmrAsync => Method::TfqmrAsync,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BatchedMethodArg {
    Tfqmr,
    Bicg,
}

impl From<BatchedMethodArg> for BatchedMethod {
    fn from(m: BatchedMethodArg) -> BatchedMethod {
        match m {
            BatchedMethodArg::Tfqmr => BatchedMethod::Tfqmr,
            BatchedMethodArg::Bicg => BatchedMethod::Bicg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormulationArg {
    Recursive,
    CompactDense,
    IntermediateDense,
}

impl From<FormulationArg> for Formulation {
    fn from(f: FormulationArg) -> Formulation {
        match f {
            FormulationArg::Recursive => Formulation::Recursive,
            FormulationArg::CompactDense => Formulation::CompactDense,
            FormulationArg::IntermediateDense => Formulation::IntermediateDense,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    /// Spatial dimension of the grid, 2 or 3.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Use the wide stencil (box coupling) instead of the narrow one.
    #[arg(long)]
    wide: bool,
    /// Grid points per side.
    #[arg(long, default_value_t = 24)]
    extent: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Cg)]
    method: MethodArg,
    #[arg(long, default_value_t = 1e-8)]
    rtol: f64,
    #[arg(long, default_value_t = 10000)]
    max_it: usize,
    /// Residual inspection stride; async methods synchronize only here.
    #[arg(long, default_value_t = 1)]
    check_stride: usize,
}

#[derive(Args)]
struct BatchArgs {
    /// Lane counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32, 64, 128])]
    lanes: Vec<usize>,
    /// Rows per small system.
    #[arg(long, default_value_t = 16)]
    block: usize,
    #[arg(long, value_enum, default_value_t = BatchedMethodArg::Tfqmr)]
    method: BatchedMethodArg,
    #[arg(long, default_value_t = 1e-10)]
    rtol: f64,
}

#[derive(Args)]
struct LbfgsArgs {
    /// Problem sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1000usize])]
    sizes: Vec<usize>,
    /// History capacities to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 50])]
    histories: Vec<usize>,
    /// Formulations to time (the agreement oracle always checks all three).
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [FormulationArg::Recursive, FormulationArg::CompactDense, FormulationArg::IntermediateDense])]
    formulation: Vec<FormulationArg>,
    /// Update/apply cycles per timed repetition.
    #[arg(long, default_value_t = 100)]
    cycles: usize,
}

fn run(cli: &Cli) -> CliResult<Vec<BenchRecord>> {
    let common = |ranks_default: usize, iters_default: usize| Common {
        ranks: cli.ranks.unwrap_or(ranks_default),
        iters: cli.iters.unwrap_or(iters_default),
        seed: cli.seed,
    };
    match &cli.cmd {
        Cmd::SfPingpong(a) => sf_latency(&common(2, 200), &a.sizes, ReduceOp::Replace),
        Cmd::SfUnpack(a) => sf_latency(&common(2, 200), &a.sizes, ReduceOp::Sum),
        Cmd::LaunchLatency => launch_latency(&common(1, 100_000)),
        Cmd::Solve(a) => solve_bench(
            &common(4, 1),
            &SolveOpts {
                dim: a.dim,
                wide: a.wide,
                extent: a.extent,
                method: a.method.into(),
                rtol: a.rtol,
                max_it: a.max_it,
                check_stride: a.check_stride,
            },
        ),
        Cmd::BatchBench(a) => batch_bench(
            &common(1, 1),
            &BatchOpts {
                lanes: a.lanes.clone(),
                block: a.block,
                method: a.method.into(),
                rtol: a.rtol,
            },
        ),
        Cmd::LbfgsBench(a) => lbfgs_bench(
            &common(8, 1),
            &LbfgsOpts {
                sizes: a.sizes.clone(),
                histories: a.histories.clone(),
                formulations: a.formulation.iter().map(|&f| f.into()).collect(),
                cycles: a.cycles,
            },
        ),
    }
}

fn effective_ranks(cli: &Cli) -> usize {
    let default = match cli.cmd {
        Cmd::SfPingpong(_) | Cmd::SfUnpack(_) => 2,
        Cmd::LaunchLatency | Cmd::BatchBench(_) => 1,
        Cmd::Solve(_) => 4,
        Cmd::LbfgsBench(_) => 8,
    };
    cli.ranks.unwrap_or(default)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(records) => {
            if let Some(path) = &cli.csv {
                let flags: Vec<String> = std::env::args().skip(1).collect();
                if let Err(e) = write_csv(path, &records).and_then(|()| {
                    write_sidecar(path, cli.seed, effective_ranks(&cli), &flags.join(" "))
                }) {
                    eprintln!("starkit: {e}");
                    return ExitCode::from(1);
                }
                eprintln!("starkit: wrote {} rows to {}", records.len(), path.display());
            } else {
                print!("{}", render_csv(&records));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("starkit: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
