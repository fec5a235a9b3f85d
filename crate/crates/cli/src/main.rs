mod bench;
mod model;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgGroup, CommandFactory, Parser, Subcommand, ValueEnum};
use cwnm_core::conv::default_workers;
use cwnm_core::pruner::{PruneMode, PruneSpec, SparseWeight};
use cwnm_core::random::DEFAULT_SEED;
use cwnm_core::tensor::{read_tensor, write_tensor, Layout, Matrix};

/// Column-wise N:M sparse convolution toolkit.
#[derive(Parser)]
#[command(name = "cwnm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune dense weights and write a sparse weight file.
    #[command(group(ArgGroup::new("amount").required(true).args(["sparsity", "n"])))]
    Prune {
        /// Dense weights: a 2-D matrix or 4-D [cout, cin, kh, kw] filters.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Rows per tile for column-wise pruning.
        #[arg(long, default_value_t = 8)]
        tile: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Column)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite a 4-D tensor file in another layout.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        layout: LayoutArg,
    },
    /// Run a model manifest on an input tensor.
    Conv(model::ConvArgs),
    /// Profile every "auto" layer of a manifest and fill the tuning cache.
    Tune(model::TuneArgs),
    /// Run a benchmark suite and write a JSON report.
    Bench(bench::BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Row,
    Column,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Nhwc,
    Cnhw,
}

/// `CWNM_THREADS` wins over `--threads`, which wins over the core count.
pub(crate) fn resolve_threads(flag: Option<usize>) -> usize {
    std::env::var("CWNM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .or(flag)
        .unwrap_or_else(default_workers)
        .max(1)
}

pub(crate) fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ValueValidation, msg)
        .exit()
}

#[allow(clippy::too_many_arguments)]
fn prune(
    weights: PathBuf,
    sparsity: Option<f64>,
    n: Option<usize>,
    m: usize,
    tile: usize,
    mode: ModeArg,
    out: PathBuf,
) -> Result<()> {
    // row mode is column-wise pruning with one-row tiles
    let tile = match mode {
        ModeArg::Row => 1,
        ModeArg::Column => tile,
    };
    let spec = match (sparsity, n) {
        (Some(s), None) => PruneSpec::from_ratio(s, m, tile, PruneMode::ColumnWise),
        (None, Some(n)) => PruneSpec::new(n, m, tile, PruneMode::ColumnWise),
        _ => unreachable!("clap enforces exactly one"),
    }
    .unwrap_or_else(|e| usage_error(e));
    let tensor = read_tensor(&weights).with_context(|| format!("reading {}", weights.display()))?;
    let w = Matrix::from_weight_tensor(tensor)?;
    let sw = SparseWeight::prune(&w, &spec)?;
    sw.write_file(&out)
        .with_context(|| format!("writing {}", out.display()))?;

    let mode_name = match mode {
        ModeArg::Row => "row",
        ModeArg::Column => "column",
    };
    println!(
        "pruned {}x{} weights: n={} m={} tile={} mode={mode_name}",
        w.rows, w.cols, spec.n, spec.m, sw.tile_t
    );
    let kept = sw.mask().kept();
    println!(
        "achieved sparsity {:.4} ({kept} of {} weights kept)",
        sw.sparsity(),
        w.rows * w.cols
    );
    let mut histogram = BTreeMap::new();
    for count in sw.group_kept_counts().into_iter().flatten() {
        *histogram.entry(count).or_insert(0usize) += 1;
    }
    let parts: Vec<String> = histogram
        .iter()
        .rev()
        .map(|(kept, groups)| format!("{kept} in {groups} groups"))
        .collect();
    println!("kept per group: {}", parts.join(", "));
    println!("wrote {}", out.display());
    Ok(())
}

fn convert(input: PathBuf, out: PathBuf, layout: LayoutArg) -> Result<()> {
    let t = read_tensor(&input).with_context(|| format!("reading {}", input.display()))?;
    let target = match layout {
        LayoutArg::Nhwc => Layout::Nhwc,
        LayoutArg::Cnhw => Layout::Cnhw,
    };
    let from = t.layout();
    let converted = t.convert_layout(target)?;
    write_tensor(&converted, &out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{from} -> {target}: {:?} written to {}",
        converted.dims(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Prune {
            weights,
            sparsity,
            n,
            m,
            tile,
            mode,
            out,
        } => prune(weights, sparsity, n, m, tile, mode, out).map(|_| ExitCode::SUCCESS),
        Command::Convert { input, out, layout } => convert(input, out, layout).map(|_| ExitCode::SUCCESS),
        Command::Conv(args) => model::conv(args),
        Command::Tune(args) => model::tune(args).map(|_| ExitCode::SUCCESS),
        Command::Bench(args) => bench::bench(args).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
