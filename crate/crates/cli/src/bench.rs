use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use cwnm_core::conv::conv_forward_with_stats;
use cwnm_core::kernels::{gemm, KernelConfig, KernelKind, KernelWeights, Lmul, VectorEnv, DEFAULT_VLEN_BITS};
use cwnm_core::manifest::prune_for;
use cwnm_core::packer::{
    fused_im2col_pack, fused_im2col_pack_with, two_step_pack, CopyWidth, FusedOptions, COPY_WIDTHS,
};
use cwnm_core::pruner::kept_for_ratio;
use cwnm_core::random::{seeded, uniform_matrix, uniform_tensor};
use cwnm_core::shapes::{desk_shapes, parse_shapes, StageShape};
use cwnm_core::tensor::Layout;
use cwnm_core::tuner::{enumerate_candidates, host_id};
use cwnm_core::{ConvLayer, WeightSource};
use serde::Serialize;
use serde_json::{json, Value};

pub const REPORT_VERSION: u32 = 1;

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    /// Report path; stdout when absent.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Shape table to use instead of the built-in one.
    #[arg(long)]
    shapes: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Worker threads for the stage-shapes suite; CWNM_THREADS takes precedence.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Tile height for the stage-shapes suite.
    #[arg(long, default_value_t = 7)]
    t: usize,
    /// LMUL for the stage-shapes suite.
    #[arg(long, default_value_t = 4)]
    lmul: u32,
    #[arg(long, default_value_t = crate::default_seed())]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    StageShapes,
    Packing,
    Kernels,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::StageShapes => "stage-shapes",
            Suite::Packing => "packing",
            Suite::Kernels => "kernels",
        }
    }
}

#[derive(Serialize)]
struct Row {
    case: String,
    config: Value,
    median_ns: u64,
    traffic: Value,
}

fn median_ns(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

fn load_shapes(path: &Option<PathBuf>) -> Result<Vec<StageShape>> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_shapes(&text)?)
        }
        None => Ok(desk_shapes()),
    }
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let shapes = load_shapes(&args.shapes)?;
    let threads = crate::resolve_threads(args.threads);
    let (rows, summary) = match args.suite {
        Suite::StageShapes => stage_shapes(&args, &shapes, threads)?,
        Suite::Packing => packing(&args, &shapes)?,
        Suite::Kernels => kernels(&args, &shapes)?,
    };
    let report = json!({
        "report_version": REPORT_VERSION,
        "suite": args.suite.name(),
        "env": { "host": host_id(), "threads": threads, "vlen_bits": DEFAULT_VLEN_BITS },
        "seed": args.seed,
        "repeats": args.repeats,
        "rows": rows,
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.json {
        Some(path) => {
            std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
            eprintln!("{} rows written to {}", rows.len(), path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn lmul_arg(v: u32) -> Result<Lmul> {
    Ok(Lmul::try_from(v)?)
}

fn stage_shapes(args: &BenchArgs, shapes: &[StageShape], threads: usize) -> Result<(Vec<Row>, Value)> {
    let mut rng = seeded(args.seed);
    let env = VectorEnv::new(DEFAULT_VLEN_BITS, lmul_arg(args.lmul)?)?;
    let n = kept_for_ratio(args.sparsity, args.m).max(1);
    let mut rows = Vec::new();
    let mut speedups = Vec::new();
    let mut conversions = Vec::new();
    for s in shapes.iter().filter(|s| !s.is_stem()) {
        let g = s.geometry()?;
        let dense = uniform_matrix(s.out_channels, g.k_rows(), &mut rng);
        let input = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
        // the model input arrives as NHWC; its conversion is timed on its own
        let nhwc = input.convert_layout(Layout::Nhwc)?;
        let convert_ns = median_ns(args.repeats, || {
            std::hint::black_box(nhwc.convert_layout(Layout::Cnhw)?);
            Ok(())
        })?;
        conversions.push(json!({ "case": s.name, "nhwc_to_cnhw_ns": convert_ns }));
        let mut times = Vec::new();
        for kind in [KernelKind::Dense, KernelKind::InnerProductNM, KernelKind::ColumnWise] {
            let cfg = KernelConfig::new(kind, args.t, env)?;
            let source = match kind {
                KernelKind::Dense => WeightSource::Dense(dense.clone()),
                _ => prune_for(&dense, n, args.m, kind, args.t)?,
            };
            let layer = ConvLayer::new(g, source, None, cfg)?;
            let (_, traffic) = conv_forward_with_stats(&layer, &input, threads)?;
            let ns = median_ns(args.repeats, || {
                std::hint::black_box(conv_forward_with_stats(&layer, &input, threads)?);
                Ok(())
            })?;
            times.push(ns);
            rows.push(Row {
                case: s.name.clone(),
                config: serde_json::to_value(cfg)?,
                median_ns: ns,
                traffic: serde_json::to_value(traffic)?,
            });
        }
        speedups.push(json!({
            "case": s.name,
            "column_wise_vs_dense": times[0] as f64 / times[2] as f64,
            "column_wise_vs_inner_nm": times[1] as f64 / times[2] as f64,
        }));
    }
    Ok((rows, json!({ "n": n, "m": args.m, "speedups": speedups, "layout_conversion": conversions })))
}

fn packing(args: &BenchArgs, shapes: &[StageShape]) -> Result<(Vec<Row>, Value)> {
    let mut rng = seeded(args.seed);
    let mut rows = Vec::new();
    let mut all_fewer = true;
    for s in shapes.iter().filter(|s| s.is_spatial()) {
        let g = s.geometry()?;
        let src = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
        for vl in COPY_WIDTHS {
            let (_, two) = two_step_pack(&src, &g, vl)?;
            let opts = FusedOptions {
                copy_width: CopyWidth::Fixed(vl),
                record_runs: false,
            };
            let (_, fused, _) = fused_im2col_pack_with(&src, &g, vl, opts)?;
            all_fewer &= fused.total_reads() < two.total_reads();
            let two_ns = median_ns(args.repeats, || {
                std::hint::black_box(two_step_pack(&src, &g, vl)?);
                Ok(())
            })?;
            let fused_ns = median_ns(args.repeats, || {
                std::hint::black_box(fused_im2col_pack(&src, &g, vl)?);
                Ok(())
            })?;
            for (name, ns, stats) in [("two_step", two_ns, two), ("fused", fused_ns, fused)] {
                let mut traffic = serde_json::to_value(stats)?;
                traffic["total_reads"] = json!(stats.total_reads());
                rows.push(Row {
                    case: s.name.clone(),
                    config: json!({ "pipeline": name, "vl": vl }),
                    median_ns: ns,
                    traffic,
                });
            }
        }
    }
    Ok((rows, json!({ "fused_reads_fewer_on_every_case": all_fewer })))
}

fn kernels(args: &BenchArgs, shapes: &[StageShape]) -> Result<(Vec<Row>, Value)> {
    let mut rng = seeded(args.seed);
    let n = kept_for_ratio(args.sparsity, args.m).max(1);
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for s in shapes.iter().filter(|s| s.is_spatial() && !s.is_stem()) {
        let g = s.geometry()?;
        let dense = uniform_matrix(s.out_channels, g.k_rows(), &mut rng);
        let input = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
        let mut loads_t8 = [0u64; 2];
        for kind in KernelKind::ALL {
            for cfg in enumerate_candidates(kind, s.out_channels, DEFAULT_VLEN_BITS)? {
                let source = match kind {
                    KernelKind::Dense => WeightSource::Dense(dense.clone()),
                    _ => prune_for(&dense, n, args.m, kind, cfg.t)?,
                };
                let weights = KernelWeights::prepare(&source, &cfg)?;
                let packed = fused_im2col_pack(&input, &g, cfg.vl())?;
                let (_, traffic) = gemm(&weights, &packed, &cfg)?;
                let ns = median_ns(args.repeats, || {
                    std::hint::black_box(gemm(&weights, &packed, &cfg)?);
                    Ok(())
                })?;
                if cfg.t == 8 && cfg.env.lmul == Lmul::M1 {
                    match kind {
                        KernelKind::InnerProductNM => loads_t8[0] = traffic.data_elem_loads,
                        KernelKind::ColumnWise => loads_t8[1] = traffic.data_elem_loads,
                        _ => {}
                    }
                }
                rows.push(Row {
                    case: s.name.clone(),
                    config: serde_json::to_value(cfg)?,
                    median_ns: ns,
                    traffic: serde_json::to_value(traffic)?,
                });
            }
        }
        if loads_t8[1] > 0 {
            ratios.push(json!({
                "case": s.name,
                "inner_nm_over_column_wise_data_loads_t8": loads_t8[0] as f64 / loads_t8[1] as f64,
            }));
        }
    }
    Ok((rows, json!({ "n": n, "m": args.m, "traffic_ratios": ratios })))
}
