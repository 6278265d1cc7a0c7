use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use maxcovar::brt::GrowthMode;

mod commands;
mod plot;

/// Maximal-covariance backward reachable trees: build, query, verify, plot.
#[derive(Debug, Parser)]
#[command(name = "maxcovar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Grow a tree from an experiment config and write it with a build report.
    BuildTree {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `tree.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `tree.mode`.
        #[arg(long)]
        mode: Option<Mode>,
        /// Overrides `tree.n_iter`.
        #[arg(long)]
        n_iter: Option<usize>,
        /// Build report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Query success rates of two trees over the config's covariance intervals.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, num_args = 2, required = true, value_names = ["TREE_A", "TREE_B"])]
        trees: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Queries per interval; overrides `query.trials`.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides `query.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Replaces the config intervals, e.g. `--interval 0,0.1 --interval 0.1,0.2`.
        #[arg(long, value_parser = parse_interval)]
        interval: Vec<[f64; 2]>,
        #[arg(long)]
        inner: Option<f64>,
        #[arg(long)]
        outer: Option<f64>,
        #[arg(short = 'M')]
        m: Option<usize>,
    },
    /// Plan from a query belief through a tree.
    Query {
        #[arg(long)]
        tree: PathBuf,
        /// Gaussian belief JSON `{"mean": [..], "covariance": [[..]]}`.
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short = 'M', default_value_t = maxcovar::planner::DEFAULT_M)]
        m: usize,
        /// Also time a single steering solve over the whole path horizon.
        #[arg(long)]
        monolithic: bool,
    },
    /// Replay-audit a tree, or a query result against its tree, analytically and by sampling.
    Verify {
        #[arg(long)]
        tree: PathBuf,
        /// Query result written by `query`; verifies its full law instead of the tree edges.
        #[arg(long)]
        result: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit CSV series for plotting.
    PlotData {
        #[arg(long)]
        kind: PlotKind,
        /// Tree file (`tree`), coverage CSV (`coverage`) or query result (`trajectories`).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tree file, needed for `trajectories`.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// State indices of the plotted plane.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Maxcovar,
    Randcovar,
}

impl From<Mode> for GrowthMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Maxcovar => GrowthMode::Maxcovar,
            Mode::Randcovar => GrowthMode::Randcovar,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlotKind {
    Tree,
    Coverage,
    Trajectories,
}

fn parse_interval(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [lo, hi] = parts[..] else {
        return Err(format!("expected `lo,hi`, got `{s}`"));
    };
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok([parse(lo)?, parse(hi)?])
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    /// Verification or planning failed; exit 1.
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::BuildTree { config, out, seed, mode, n_iter, report } => {
            commands::build_tree(&config, &out, seed, mode.map(Into::into), n_iter, report.as_deref())
        }
        Command::Coverage { config, trees, out, trials, seed, interval, inner, outer, m } => {
            let opts = commands::CoverageArgs { trials, seed, intervals: interval, inner, outer, m };
            commands::coverage(&config, &trees[0], &trees[1], &out, &opts)
        }
        Command::Query { tree, query, out, m, monolithic } => commands::query(&tree, &query, &out, m, monolithic),
        Command::Verify { tree, result, trials, seed } => commands::verify(&tree, result.as_deref(), trials, seed),
        Command::PlotData { kind, input, out, tree, dims, trials, seed } => match kind {
            PlotKind::Tree => plot::tree(&input, &out, &dims),
            PlotKind::Coverage => plot::coverage(&input, &out),
            PlotKind::Trajectories => plot::trajectories(&input, tree.as_deref(), &out, trials, seed),
        },
    };
    match run {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
