use cwnm_core::conv::{conv_forward_with_stats, conv_reference_with_magnitude};
use cwnm_core::kernels::{KernelConfig, KernelKind, Lmul, VectorEnv, WeightSource};
use cwnm_core::packer::{fused_im2col_pack_with, im2col, pack, two_step_pack, CopyWidth, FusedOptions, RunKind};
use cwnm_core::pruner::{select_mask_columnwise, select_mask_rowwise, PruneMode, PruneSpec, SparseWeight};
use cwnm_core::random::{integer_matrix, seeded, uniform_matrix, uniform_tensor};
use cwnm_core::tensor::{Dims4, Layout, Tensor};
use cwnm_core::{ConvGeometry, ConvLayer};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (
        1usize..=2,
        1usize..=4,
        1usize..=12,
        1usize..=12,
        1usize..=5,
        1usize..=3,
        1usize..=3,
        0usize..=3,
    )
        .prop_filter_map("kernel must fit", |(n, c, h, w, k, sh, sw, p)| {
            ConvGeometry::new(Dims4::new(n, c, h, w), (k, k), (sh, sw), (p, p)).ok()
        })
}

fn nm() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=12).prop_flat_map(|m| (1..=m, Just(m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_packing_equals_two_step(g in geometry(), vl in prop::sample::select(vec![1usize, 3, 8, 16, 32]),
                                     width in prop::option::of(1usize..=40), seed in any::<u64>()) {
        let src = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut seeded(seed));
        let copy_width = width.map_or(CopyWidth::Auto, CopyWidth::Fixed);
        let opts = FusedOptions { copy_width, record_runs: true };
        let (fused, stats, runs) = fused_im2col_pack_with(&src, &g, vl, opts).unwrap();
        let (two, two_stats) = two_step_pack(&src, &g, vl).unwrap();
        prop_assert_eq!(&fused, &two);
        prop_assert_eq!(&fused, &pack(&im2col(&src, &g).unwrap(), vl).unwrap());
        prop_assert!(stats.total_reads() < two_stats.total_reads());
        prop_assert_eq!(stats.runs as usize, runs.len());
        let chunk = copy_width.resolve(g.in_w);
        prop_assert!(runs.iter().all(|r| r.len >= 1 && (r.kind == RunKind::Zero || r.len <= chunk)));
    }

    #[test]
    fn tile_one_is_rowwise((n, m) in nm(), rows in 1usize..10, cols in 1usize..30, seed in any::<u64>()) {
        let w = integer_matrix(rows, cols, 2, &mut seeded(seed));
        prop_assert_eq!(select_mask_columnwise(&w, n, m, 1).unwrap(), select_mask_rowwise(&w, n, m).unwrap());
    }

    #[test]
    fn pruning_is_idempotent((n, m) in nm(), t in 1usize..9, rows in 1usize..20, cols in 1usize..40,
                             seed in any::<u64>()) {
        let spec = PruneSpec::new(n, m, t, PruneMode::ColumnWise).unwrap();
        let sw = SparseWeight::prune(&uniform_matrix(rows, cols, &mut seeded(seed)), &spec).unwrap();
        let again = SparseWeight::prune(&sw.decompress(), &spec).unwrap();
        prop_assert_eq!(&again, &sw);
        prop_assert!(sw.mask().is_column_consistent(t));
        prop_assert!(sw.validate().is_ok());
    }

    #[test]
    fn sparse_round_trips((n, m) in nm(), t in 1usize..9, rows in 1usize..20, cols in 1usize..40,
                          seed in any::<u64>()) {
        let w = uniform_matrix(rows, cols, &mut seeded(seed));
        let sw = SparseWeight::prune(&w, &PruneSpec::new(n, m, t, PruneMode::ColumnWise).unwrap()).unwrap();
        let mask = sw.mask();
        prop_assert_eq!(sw.decompress(), mask.apply(&w).unwrap());
        prop_assert_eq!(SparseWeight::compress(&w, &mask, t).unwrap(), sw.clone());
        let mut buf = Vec::new();
        sw.write_to(&mut buf).unwrap();
        prop_assert_eq!(SparseWeight::read_from(buf.as_slice()).unwrap(), sw);
    }

    #[test]
    fn layouts_round_trip(n in 1usize..4, c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = uniform_tensor(Dims4::new(n, c, h, w), Layout::Nhwc, &mut seeded(seed));
        let cnhw = x.convert_layout(Layout::Cnhw).unwrap();
        prop_assert_eq!(&cnhw.convert_layout(Layout::Nhwc).unwrap(), &x);
        let mut buf = Vec::new();
        cnhw.write_to(&mut buf).unwrap();
        prop_assert_eq!(Tensor::read_from(buf.as_slice()).unwrap(), cnhw);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A fixed set of pruned weights computes the same layer under every legal
    /// configuration of every kernel kind.
    #[test]
    fn configs_agree(g in geometry(), cout in 1usize..20, t in 1usize..8, (n, m) in nm(), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let w = uniform_matrix(cout, g.k_rows(), &mut rng);
        let sw = SparseWeight::prune(&w, &PruneSpec::new(n, m, t, PruneMode::ColumnWise).unwrap()).unwrap();
        let input = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
        let reference = conv_reference_with_magnitude(&g, &sw.decompress(), None, &input).unwrap();
        for kind in KernelKind::ALL {
            for lmul in Lmul::ALL {
                let Ok(cfg) = KernelConfig::new(kind, t, VectorEnv::new(256, lmul).unwrap()) else { continue };
                let layer = ConvLayer::new(g, WeightSource::ColumnWise(sw.clone()), None, cfg).unwrap();
                let (out, _) = conv_forward_with_stats(&layer, &input, 2).unwrap();
                let e = reference.max_relative_error(&out).unwrap();
                prop_assert!(e <= 1e-4, "{} rel err {}", cfg, e);
            }
        }
    }

    /// Column-wise data loads are the inner-product loads divided by `t`.
    #[test]
    fn data_loads_drop_by_tile_height(g in geometry(), tiles in 1usize..4, t in 1usize..9, (n, m) in nm(),
                                      seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let w = uniform_matrix(tiles * t, g.k_rows(), &mut rng);
        let sw = SparseWeight::prune(&w, &PruneSpec::new(n, m, t, PruneMode::ColumnWise).unwrap()).unwrap();
        let input = uniform_tensor(g.input_dims(), Layout::Cnhw, &mut rng);
        let env = VectorEnv::new(256, Lmul::M1).unwrap();
        let loads = |kind| {
            let layer = ConvLayer::new(g, WeightSource::ColumnWise(sw.clone()), None,
                                       KernelConfig::new(kind, t, env).unwrap()).unwrap();
            conv_forward_with_stats(&layer, &input, 1).unwrap().1
        };
        let cw = loads(KernelKind::ColumnWise);
        let inner = loads(KernelKind::InnerProductNM);
        prop_assert_eq!(cw.data_elem_loads * t as u64, inner.data_elem_loads);
        prop_assert_eq!(cw.macs, inner.macs);
        prop_assert_eq!(cw.output_elem_stores, inner.output_elem_stores);
    }
}
