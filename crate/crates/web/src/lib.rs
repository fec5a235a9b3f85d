//! wasm-bindgen entry points for the demo page in `www/`.
//!
//! Every export returns a JSON string; failures come back as `{"error": ...}`.

use cwnm_core::conv::{conv_forward_with_stats, conv_reference_with_magnitude};
use cwnm_core::manifest::prune_for;
use cwnm_core::packer::{fused_im2col_pack_with, two_step_pack, CopyWidth, FusedOptions, RunKind};
use cwnm_core::pruner::{select_mask_columnwise, select_mask_rowwise, Mask};
use cwnm_core::random::{seeded, uniform_matrix, uniform_tensor};
use cwnm_core::{ConvGeometry, ConvLayer, Dims4, KernelConfig, KernelKind, Layout, Lmul, VectorEnv, WeightSource};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const VLEN_BITS: usize = 256;

fn respond(r: cwnm_core::Result<Value>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn mask_rows(mask: &Mask, rows: usize, cols: usize) -> Vec<String> {
    (0..rows)
        .map(|r| (0..cols).map(|c| if mask.get(r, c) { '1' } else { '0' }).collect())
        .collect()
}

/// Row-wise and column-wise masks for the same random weights.
#[wasm_bindgen]
pub fn prune_masks(rows: usize, cols: usize, n: usize, m: usize, tile: usize, seed: u64) -> String {
    respond(prune_masks_value(rows, cols, n, m, tile, seed))
}

fn prune_masks_value(rows: usize, cols: usize, n: usize, m: usize, tile: usize, seed: u64) -> cwnm_core::Result<Value> {
    let w = uniform_matrix(rows, cols, &mut seeded(seed));
    let row = select_mask_rowwise(&w, n, m)?;
    let col = select_mask_columnwise(&w, n, m, tile)?;
    let distinct = |mask: &Mask| {
        let mut patterns: Vec<Vec<usize>> = (0..rows).map(|r| mask.kept_in_row(r)).collect();
        patterns.sort();
        patterns.dedup();
        patterns.len()
    };
    Ok(json!({
        "rows": rows,
        "cols": cols,
        "weights": (0..rows).map(|r| w.row(r).to_vec()).collect::<Vec<_>>(),
        "row_wise": { "mask": mask_rows(&row, rows, cols), "sparsity": row.sparsity(), "distinct_row_patterns": distinct(&row) },
        "column_wise": { "mask": mask_rows(&col, rows, cols), "sparsity": col.sparsity(), "distinct_row_patterns": distinct(&col) },
    }))
}

/// Runs one convolution layer through every kernel and reports memory traffic.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn kernel_traffic(
    size: usize,
    cin: usize,
    cout: usize,
    k: usize,
    n: usize,
    m: usize,
    t: usize,
    lmul: u32,
    seed: u64,
) -> String {
    respond(kernel_traffic_value(size, cin, cout, k, n, m, t, lmul, seed))
}

#[allow(clippy::too_many_arguments)]
fn kernel_traffic_value(
    size: usize,
    cin: usize,
    cout: usize,
    k: usize,
    n: usize,
    m: usize,
    t: usize,
    lmul: u32,
    seed: u64,
) -> cwnm_core::Result<Value> {
    let g = ConvGeometry::new(Dims4::new(1, cin, size, size), (k, k), (1, 1), (k / 2, k / 2))?;
    let env = VectorEnv::new(VLEN_BITS, Lmul::try_from(lmul)?)?;
    let mut rng = seeded(seed);
    let dense = uniform_matrix(cout, g.k_rows(), &mut rng);
    let input = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
    let mut kernels = Vec::new();
    for kind in KernelKind::ALL {
        let source = match kind {
            KernelKind::Dense => WeightSource::Dense(dense.clone()),
            _ => prune_for(&dense, n, m, kind, t)?,
        };
        let cfg = match KernelConfig::new(kind, t, env) {
            Ok(cfg) => cfg,
            Err(e) => {
                kernels.push(json!({ "kind": kind.to_string(), "error": e.to_string() }));
                continue;
            }
        };
        let reference = conv_reference_with_magnitude(&g, &source.to_dense(), None, &input)?;
        let layer = ConvLayer::new(g, source, None, cfg)?;
        let (out, traffic) = conv_forward_with_stats(&layer, &input, 1)?;
        kernels.push(json!({
            "kind": kind.to_string(),
            "config": cfg.to_string(),
            "traffic": traffic,
            "max_rel_err": reference.max_relative_error(&out)?,
        }));
    }
    Ok(json!({ "vl": env.vl(), "output": [cout, size * size], "kernels": kernels }))
}

/// Fused im2col packing of one input channel, with every vector move listed.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn fused_pack_runs(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    vl: usize,
    copy_width: usize,
    seed: u64,
) -> String {
    respond(fused_pack_runs_value(h, w, k, stride, pad, vl, copy_width, seed))
}

#[allow(clippy::too_many_arguments)]
fn fused_pack_runs_value(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    vl: usize,
    copy_width: usize,
    seed: u64,
) -> cwnm_core::Result<Value> {
    let g = ConvGeometry::new(Dims4::new(1, 1, h, w), (k, k), (stride, stride), (pad, pad))?;
    let src = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut seeded(seed));
    // 0 picks the width automatically
    let copy_width = match copy_width {
        0 => CopyWidth::Auto,
        n => CopyWidth::Fixed(n),
    };
    let opts = FusedOptions {
        copy_width,
        record_runs: true,
    };
    let (packed, fused, runs) = fused_im2col_pack_with(&src, &g, vl, opts)?;
    let (_, two) = two_step_pack(&src, &g, vl)?;
    let runs: Vec<Value> = runs
        .iter()
        .map(|r| {
            let kind = match r.kind {
                RunKind::Contiguous => "copy",
                RunKind::Strided => "gather",
                RunKind::Zero => "zero",
            };
            json!([r.row, r.col, r.len, kind])
        })
        .collect();
    let totals = |s: cwnm_core::packer::PackStats| {
        json!({ "source_reads": s.source_reads, "intermediate_reads": s.intermediate_reads,
                "total_reads": s.total_reads(), "writes": s.writes, "runs": s.runs })
    };
    Ok(json!({
        "rows": packed.rows,
        "cols": packed.logical_cols,
        "strips": packed.num_strips(),
        "out": [g.out_h, g.out_w],
        "copy_width": copy_width.resolve(g.in_w),
        "runs": runs,
        "fused": totals(fused),
        "two_step": totals(two),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: String) -> Value {
        serde_json::from_str(&s).unwrap()
    }

    #[test]
    fn column_masks_share_patterns_within_tiles() {
        let v = parse(prune_masks(8, 16, 2, 4, 4, 1));
        assert_eq!(v["column_wise"]["sparsity"], 0.5);
        assert_eq!(v["row_wise"]["sparsity"], 0.5);
        assert!(v["column_wise"]["distinct_row_patterns"].as_u64().unwrap() <= 2);
        let mask = v["column_wise"]["mask"].as_array().unwrap();
        assert_eq!(mask[0], mask[3]);
        assert_eq!(mask[4], mask[7]);
    }

    #[test]
    fn bad_pattern_reports_error() {
        let v = parse(prune_masks(4, 8, 5, 4, 2, 1));
        assert!(v["error"].is_string());
    }

    #[test]
    fn kernel_traffic_shows_tile_reuse() {
        let v = parse(kernel_traffic(6, 3, 16, 3, 2, 4, 4, 1, 7));
        let kernels = v["kernels"].as_array().unwrap();
        assert_eq!(kernels.len(), 4);
        let loads = |kind: &str| {
            let k = kernels.iter().find(|k| k["kind"] == kind).unwrap();
            assert!(k["max_rel_err"].as_f64().unwrap() <= 1e-4);
            k["traffic"]["data_elem_loads"].as_u64().unwrap()
        };
        assert_eq!(loads("inner_nm"), 4 * loads("column_wise"));
    }

    #[test]
    fn illegal_tile_is_reported_per_kernel() {
        let v = parse(kernel_traffic(4, 2, 31, 1, 1, 2, 31, 8, 1));
        let cw = v["kernels"]
            .as_array()
            .unwrap()
            .iter()
            .find(|k| k["kind"] == "column_wise")
            .unwrap();
        assert!(cw["error"].is_string());
    }

    #[test]
    fn fused_runs_chunk_and_read_less() {
        let v = parse(fused_pack_runs(3, 56, 1, 1, 0, 32, 32, 1));
        let lens: Vec<u64> = v["runs"]
            .as_array()
            .unwrap()
            .iter()
            .take(2)
            .map(|r| r[2].as_u64().unwrap())
            .collect();
        assert_eq!(lens, [32, 24]);
        assert!(v["fused"]["total_reads"].as_u64() < v["two_step"]["total_reads"].as_u64());
        assert_eq!(
            v["fused"]["runs"].as_u64().unwrap() as usize,
            v["runs"].as_array().unwrap().len()
        );
    }
}
