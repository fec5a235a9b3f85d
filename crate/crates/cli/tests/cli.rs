use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cwnm_core::pruner::{select_mask_rowwise, SparseWeight};
use cwnm_core::random::{seeded, uniform_matrix, uniform_tensor, uniform_vec};
use cwnm_core::tensor::{read_tensor, write_tensor, Dims4, Layout, Matrix, Tensor};
use serde_json::Value;
use tempfile::TempDir;

fn cwnm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwnm"))
        .args(args)
        .env_remove("CWNM_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_matrix(dir: &Path, name: &str, m: &Matrix) -> PathBuf {
    let path = dir.join(name);
    write_tensor(&m.clone().into_tensor(), &path).unwrap();
    path
}

fn write_vec(dir: &Path, name: &str, v: Vec<f32>) -> PathBuf {
    let path = dir.join(name);
    let t = Tensor::new(vec![1, v.len()], Layout::RowMajor2D, v).unwrap();
    write_tensor(&t, &path).unwrap();
    path
}

#[test]
fn prune_reports_n_from_sparsity() {
    let dir = TempDir::new().unwrap();
    let w = write_matrix(dir.path(), "w.cwnm", &uniform_matrix(16, 64, &mut seeded(1)));
    let out = dir.path().join("w.cwsw");
    let text = ok(cwnm(&[
        "prune",
        "--weights",
        p(&w),
        "--sparsity",
        "0.5",
        "--m",
        "8",
        "--out",
        p(&out),
    ]));
    assert!(text.contains("n=4 m=8"), "{text}");
    assert!(text.contains("achieved sparsity 0.5000"), "{text}");
    let sw = SparseWeight::read_file(&out).unwrap();
    assert_eq!(sw.tile_t, 8);
    assert!(sw.group_kept_counts().iter().flatten().all(|&k| k == 4));

    let text = ok(cwnm(&[
        "prune",
        "--weights",
        p(&w),
        "--sparsity",
        "0.75",
        "--m",
        "16",
        "--out",
        p(&out),
    ]));
    assert!(text.contains("n=4 m=16"), "{text}");
}

#[test]
fn prune_rejects_n_above_m() {
    let dir = TempDir::new().unwrap();
    let w = write_matrix(dir.path(), "w.cwnm", &uniform_matrix(4, 8, &mut seeded(2)));
    let out = dir.path().join("w.cwsw");
    let o = cwnm(&["prune", "--weights", p(&w), "--n", "5", "--m", "4", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
    let o = cwnm(&[
        "prune",
        "--weights",
        p(&w),
        "--n",
        "2",
        "--sparsity",
        "0.5",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn row_mode_matches_rowwise_selection() {
    let dir = TempDir::new().unwrap();
    let m = uniform_matrix(6, 20, &mut seeded(3));
    let w = write_matrix(dir.path(), "w.cwnm", &m);
    let out = dir.path().join("w.cwsw");
    ok(cwnm(&[
        "prune",
        "--weights",
        p(&w),
        "--n",
        "2",
        "--m",
        "4",
        "--mode",
        "row",
        "--out",
        p(&out),
    ]));
    let sw = SparseWeight::read_file(&out).unwrap();
    assert_eq!(sw.tile_t, 1);
    let want = select_mask_rowwise(&m, 2, 4).unwrap();
    let got = sw.mask();
    assert!((0..6).all(|r| (0..20).all(|c| got.get(r, c) == want.get(r, c))));
}

#[test]
fn prune_accepts_four_dimensional_filters() {
    let dir = TempDir::new().unwrap();
    let t = uniform_tensor(Dims4::new(8, 3, 3, 3), Layout::Nhwc, &mut seeded(4));
    let w = dir.path().join("filters.cwnm");
    write_tensor(&t, &w).unwrap();
    let out = dir.path().join("f.cwsw");
    let text = ok(cwnm(&[
        "prune",
        "--weights",
        p(&w),
        "--sparsity",
        "0.5",
        "--out",
        p(&out),
    ]));
    assert!(text.contains("pruned 8x27 weights"), "{text}");
}

#[test]
fn convert_round_trips_bytes() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.cwnm");
    write_tensor(
        &uniform_tensor(Dims4::new(2, 3, 4, 5), Layout::Nhwc, &mut seeded(5)),
        &a,
    )
    .unwrap();
    let b = dir.path().join("b.cwnm");
    let c = dir.path().join("c.cwnm");
    ok(cwnm(&["convert", "--input", p(&a), "--out", p(&b), "--layout", "cnhw"]));
    assert_eq!(read_tensor(&b).unwrap().layout(), Layout::Cnhw);
    ok(cwnm(&["convert", "--input", p(&b), "--out", p(&c), "--layout", "nhwc"]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn identity_manifest_verifies_exactly() {
    let dir = TempDir::new().unwrap();
    write_matrix(dir.path(), "eye.cwnm", &Matrix::identity(5));
    fs::write(
        dir.path().join("model.json"),
        r#"{ "layers": [ { "weights_file": "eye.cwnm",
            "kernel_config": { "kind": "dense", "t": 4, "lmul": 1 } } ] }"#,
    )
    .unwrap();
    let x = dir.path().join("x.cwnm");
    let input = uniform_tensor(Dims4::new(1, 5, 6, 7), Layout::Nhwc, &mut seeded(6));
    write_tensor(&input, &x).unwrap();
    let y = dir.path().join("y.cwnm");
    let model = dir.path().join("model.json");
    let text = ok(cwnm(&[
        "conv",
        "--manifest",
        p(&model),
        "--input",
        p(&x),
        "--out",
        p(&y),
        "--verify",
    ]));
    assert!(text.contains("max relative error 0.000e0"), "{text}");
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
}

/// Bottleneck block: pruned 1x1 reduce, 3x3 with ReLU, 1x1 expand.
fn block_model(dir: &Path, third: &str) -> PathBuf {
    let mut rng = seeded(7);
    let reduce = uniform_matrix(16, 64, &mut rng);
    let sw = SparseWeight::prune(
        &reduce,
        &cwnm_core::PruneSpec::new(4, 8, 8, cwnm_core::PruneMode::ColumnWise).unwrap(),
    )
    .unwrap();
    sw.write_file(dir.join("reduce.cwsw")).unwrap();
    write_matrix(dir, "mid.cwnm", &uniform_matrix(16, 16 * 9, &mut rng));
    write_vec(dir, "mid.bias", uniform_vec(16, &mut rng));
    write_matrix(dir, "expand.cwnm", &uniform_matrix(64, 16, &mut rng));
    let manifest = format!(
        r#"{{ "layers": [
        {{ "weights_file": "reduce.cwsw", "relu": true,
           "kernel_config": {{ "kind": "column_wise", "t": 8, "lmul": 2 }} }},
        {{ "weights_file": "mid.cwnm", "bias_file": "mid.bias", "padding": 1, "relu": true,
           "prune": {{ "sparsity": 0.5 }},
           "kernel_config": {{ "kind": "inner_nm", "t": 4, "lmul": 1 }} }},
        {{ "weights_file": "expand.cwnm", "prune": {{ "n": 2, "m": 4 }}, {third} }}
    ] }}"#
    );
    let path = dir.join("block.json");
    fs::write(&path, manifest).unwrap();
    let x = uniform_tensor(Dims4::new(1, 64, 8, 8), Layout::Nhwc, &mut rng);
    write_tensor(&x, dir.join("x.cwnm")).unwrap();
    path
}

#[test]
fn block_manifest_verifies_and_is_thread_independent() {
    let dir = TempDir::new().unwrap();
    let model = block_model(
        dir.path(),
        r#""kernel_config": { "kind": "column_wise", "t": 6, "lmul": 4 }"#,
    );
    let x = dir.path().join("x.cwnm");
    let y1 = dir.path().join("y1.cwnm");
    let y8 = dir.path().join("y8.cwnm");
    let text = ok(cwnm(&[
        "conv",
        "--manifest",
        p(&model),
        "--input",
        p(&x),
        "--out",
        p(&y1),
        "--threads",
        "1",
        "--verify",
    ]));
    assert!(text.contains("max relative error"), "{text}");
    ok(cwnm(&[
        "conv",
        "--manifest",
        p(&model),
        "--input",
        p(&x),
        "--out",
        p(&y8),
        "--threads",
        "8",
    ]));
    assert_eq!(fs::read(&y1).unwrap(), fs::read(&y8).unwrap());
    assert_eq!(read_tensor(&y1).unwrap().dims(), [1, 64, 8, 8]);
}

#[test]
fn thread_env_overrides_flag() {
    let dir = TempDir::new().unwrap();
    let model = block_model(dir.path(), r#""kernel_config": { "kind": "dense", "t": 3, "lmul": 1 }"#);
    let x = dir.path().join("x.cwnm");
    let y = dir.path().join("y.cwnm");
    let o = Command::new(env!("CARGO_BIN_EXE_cwnm"))
        .args([
            "conv",
            "--manifest",
            p(&model),
            "--input",
            p(&x),
            "--out",
            p(&y),
            "--threads",
            "2",
        ])
        .env("CWNM_THREADS", "3")
        .output()
        .unwrap();
    assert!(ok(o).contains("with 3 threads"));
}

#[test]
fn tune_is_idempotent_and_retunes_on_foreign_entries() {
    let dir = TempDir::new().unwrap();
    let model = block_model(dir.path(), r#""kernel_config": "auto""#);
    let cache = dir.path().join("cache.jsonl");
    let args = [
        "tune",
        "--manifest",
        p(&model),
        "--cache",
        p(&cache),
        "--shape",
        "1,64,8,8",
        "--repeats",
        "3",
        "--warmups",
        "0",
    ];
    let first = ok(cwnm(&args));
    assert!(first.contains("1 tuned, 0 cached, 2 fixed"), "{first}");
    let second = ok(cwnm(&args));
    assert!(second.contains("0 tuned, 1 cached, 2 fixed"), "{second}");

    let record: Value = serde_json::from_str(fs::read_to_string(&cache).unwrap().trim()).unwrap();
    assert_eq!(record["winner"]["kind"], "column_wise");
    assert!(record["candidates"].as_array().unwrap().len() > 1);

    let foreign = fs::read_to_string(&cache)
        .unwrap()
        .replace(record["env"]["host"].as_str().unwrap(), "elsewhere/riscv64-linux");
    fs::write(&cache, foreign).unwrap();
    let o = cwnm(&args);
    assert!(
        stderr(&o).contains("warning: layer 2 was tuned on elsewhere/riscv64-linux"),
        "{}",
        stderr(&o)
    );
    assert!(ok(o).contains("1 tuned, 0 cached"));

    // conv reuses the cache when the worker count matches
    let x = dir.path().join("x.cwnm");
    let y = dir.path().join("y.cwnm");
    let threads = record["env"]["workers"].to_string();
    let o = cwnm(&[
        "conv",
        "--manifest",
        p(&model),
        "--input",
        p(&x),
        "--out",
        p(&y),
        "--cache",
        p(&cache),
        "--threads",
        &threads,
        "--verify",
    ]);
    assert!(stderr(&o).contains("layer 2: cached"), "{}", stderr(&o));
    ok(o);
}

#[test]
fn corrupted_cache_is_reported() {
    let dir = TempDir::new().unwrap();
    let model = block_model(dir.path(), r#""kernel_config": "auto""#);
    let cache = dir.path().join("cache.jsonl");
    fs::write(&cache, "{ broken\n").unwrap();
    let o = cwnm(&[
        "tune",
        "--manifest",
        p(&model),
        "--cache",
        p(&cache),
        "--shape",
        "1,64,8,8",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn bad_manifest_fails_cleanly() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m.json");
    fs::write(
        &model,
        r#"{ "layers": [ { "weights_file": "nope.cwnm", "kernel_config": "fast" } ] }"#,
    )
    .unwrap();
    let o = cwnm(&["tune", "--manifest", p(&model), "--shape", "1,1,1,1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

const SMALL_SHAPES: &str = r#"{ "shapes": [
  { "name": "a-conv2", "group": "a", "in_channels": 16, "out_channels": 16, "size": 6, "kernel": 3, "stride": 1, "padding": 1 },
  { "name": "b-conv1", "group": "b", "in_channels": 16, "out_channels": 32, "size": 5, "kernel": 1, "stride": 1, "padding": 0 },
  { "name": "b-conv2", "group": "b", "in_channels": 8, "out_channels": 32, "size": 7, "kernel": 3, "stride": 2, "padding": 1 }
] }"#;

fn bench(suite: &str, dir: &Path) -> Value {
    let shapes = dir.join("shapes.json");
    fs::write(&shapes, SMALL_SHAPES).unwrap();
    let out = dir.join(format!("{suite}.json"));
    ok(cwnm(&[
        "bench",
        "--suite",
        suite,
        "--shapes",
        p(&shapes),
        "--repeats",
        "1",
        "--json",
        p(&out),
    ]));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["report_version"], 1);
    assert_eq!(v["suite"], suite);
    v
}

#[test]
fn bench_packing_fused_reads_fewer() {
    let dir = TempDir::new().unwrap();
    let v = bench("packing", dir.path());
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 4 * 2);
    assert_eq!(v["summary"]["fused_reads_fewer_on_every_case"], true);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0]["config"]["pipeline"], "two_step");
        assert!(pair[1]["traffic"]["total_reads"].as_u64() < pair[0]["traffic"]["total_reads"].as_u64());
    }
}

#[test]
fn bench_kernels_covers_every_config() {
    let dir = TempDir::new().unwrap();
    let v = bench("kernels", dir.path());
    let rows = v["rows"].as_array().unwrap();
    // 4 kinds x legal (t, lmul) pairs: 41 for 16 output rows, 56 for 32
    assert_eq!(rows.len(), 4 * (41 + 56));
    for r in v["summary"]["traffic_ratios"].as_array().unwrap() {
        assert_eq!(r["inner_nm_over_column_wise_data_loads_t8"], 8.0);
    }
    assert_eq!(v["summary"]["traffic_ratios"].as_array().unwrap().len(), 2);
    let lmuls: std::collections::BTreeSet<u64> = rows.iter().map(|r| r["config"]["lmul"].as_u64().unwrap()).collect();
    assert_eq!(lmuls.into_iter().collect::<Vec<_>>(), [1, 2, 4, 8]);
}

#[test]
fn bench_stage_shapes_compares_three_kinds() {
    let dir = TempDir::new().unwrap();
    let v = bench("stage-shapes", dir.path());
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 3);
    let kinds: Vec<&str> = rows[..3]
        .iter()
        .map(|r| r["config"]["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["dense", "inner_nm", "column_wise"]);
    let dense_macs = rows[0]["traffic"]["macs"].as_u64().unwrap() as f64;
    let cw_macs = rows[2]["traffic"]["macs"].as_u64().unwrap() as f64;
    assert!((cw_macs / dense_macs - 0.5).abs() < 0.01);
    assert!(rows.iter().all(|r| r["median_ns"].as_u64().unwrap() > 0));
    let conversions = v["summary"]["layout_conversion"].as_array().unwrap();
    assert_eq!(conversions.len(), 3);
    assert!(conversions.iter().all(|c| c["nhwc_to_cnhw_ns"].as_u64().is_some()));
}
