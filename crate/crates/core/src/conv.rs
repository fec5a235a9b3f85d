//! Convolution driver: fused packing, tiled sparse GEMM over every output
//! block, bias/ReLU at tile store, and a static-partition worker pool.
//!
//! The GEMM output `cout x (N*OH*OW)` is already the CNHW linearization of the
//! output tensor, so no reshuffle follows the kernels.

use std::thread;

use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, KernelWeights, TrafficCounters, WeightSource};
use crate::packer::{fused_im2col_pack, ConvGeometry};
use crate::tensor::{Dims4, Layout, Matrix, Tensor};

/// Default worker count: the host's available parallelism.
pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub geometry: ConvGeometry,
    pub config: KernelConfig,
    pub bias: Option<Vec<f32>>,
    pub relu: bool,
    source: WeightSource,
    prepared: KernelWeights,
}

impl ConvLayer {
    pub fn new(
        geometry: ConvGeometry,
        weights: WeightSource,
        bias: Option<Vec<f32>>,
        config: KernelConfig,
    ) -> Result<Self> {
        if weights.cols() != geometry.k_rows() {
            return Err(Error::shape(format!(
                "weights have {} columns but Cin*Kh*Kw = {}",
                weights.cols(),
                geometry.k_rows()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    weights.rows()
                )));
            }
        }
        let prepared = KernelWeights::prepare(&weights, &config)?;
        Ok(ConvLayer {
            geometry,
            config,
            bias,
            relu: false,
            source: weights,
            prepared,
        })
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.source.rows()
    }

    pub fn weights(&self) -> &WeightSource {
        &self.source
    }

    /// Masked dense weights, for the reference path.
    pub fn dense_weights(&self) -> Matrix {
        self.source.to_dense()
    }

    pub fn output_dims(&self) -> Dims4 {
        self.geometry.output_dims(self.out_channels())
    }
}

pub fn conv_forward(layer: &ConvLayer, input: &Tensor, workers: usize) -> Result<Tensor> {
    conv_forward_with_stats(layer, input, workers).map(|(t, _)| t)
}

/// Runs the layer on a CNHW input and returns the CNHW output with summed
/// kernel traffic. Output is identical for every worker count.
pub fn conv_forward_with_stats(layer: &ConvLayer, input: &Tensor, workers: usize) -> Result<(Tensor, TrafficCounters)> {
    let g = &layer.geometry;
    g.check_input(input)?;
    let cfg = &layer.config;
    let (t, vl) = (cfg.t, cfg.vl());
    let packed = fused_im2col_pack(input, g, vl)?;
    let weights = &layer.prepared;
    let rows = weights.rows();
    let cols = packed.logical_cols;
    let tiles = weights.num_tiles();
    let units = tiles * packed.num_strips();
    let block = t * vl;

    // unit u covers strip u / tiles, row-tile u % tiles
    let run_units = |range: std::ops::Range<usize>| -> Result<(Vec<f32>, TrafficCounters)> {
        let mut out = vec![0.0; range.len() * block];
        let mut ctr = TrafficCounters::default();
        for (u, acc) in range.zip(out.chunks_exact_mut(block)) {
            let (s, tile) = (u / tiles, u % tiles);
            ctr += weights.run_tile(tile, packed.strip(s), cfg, acc)?;
            let r0 = tile * t;
            for i in 0..t.min(rows - r0) {
                let lanes = &mut acc[i * vl..(i + 1) * vl];
                if let Some(b) = &layer.bias {
                    lanes.iter_mut().for_each(|v| *v += b[r0 + i]);
                }
                if layer.relu {
                    lanes.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
        Ok((out, ctr))
    };

    let workers = workers.clamp(1, units.max(1));
    let per = units.div_ceil(workers);
    let ranges: Vec<_> = (0..workers)
        .map(|w| (w * per).min(units)..((w + 1) * per).min(units))
        .collect();
    let results: Vec<Result<(Vec<f32>, TrafficCounters)>> = if workers == 1 {
        vec![run_units(0..units)]
    } else {
        let run_units = &run_units;
        thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .iter()
                .cloned()
                .map(|r| scope.spawn(move || run_units(r)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("conv worker panicked"))
                .collect()
        })
    };

    let mut data = vec![0.0; rows * cols];
    let mut total = TrafficCounters::default();
    for (range, result) in ranges.into_iter().zip(results) {
        let (blocks, ctr) = result?;
        total += ctr;
        for (u, acc) in range.zip(blocks.chunks_exact(block)) {
            let (s, tile) = (u / tiles, u % tiles);
            let live = packed.live_lanes(s);
            let r0 = tile * t;
            for i in 0..t.min(rows - r0) {
                let dst = (r0 + i) * cols + s * vl;
                data[dst..dst + live].copy_from_slice(&acc[i * vl..i * vl + live]);
            }
        }
    }
    let d = layer.output_dims();
    Ok((Tensor::new(vec![d.n, d.c, d.h, d.w], Layout::Cnhw, data)?, total))
}

/// Direct convolution by definition, accumulated in f64. CNHW in and out.
pub fn conv_forward_reference(
    g: &ConvGeometry,
    weights: &Matrix,
    bias: Option<&[f32]>,
    input: &Tensor,
) -> Result<Tensor> {
    conv_reference_with_magnitude(g, weights, bias, input).map(|r| r.output)
}

/// Reference output plus, per element, `sum |w * x| + |bias|`.
#[derive(Clone, Debug)]
pub struct ReferenceOutput {
    pub output: Tensor,
    pub magnitude: Vec<f64>,
}

impl ReferenceOutput {
    /// Largest per-element error normalized by the accumulation magnitude
    /// `sum |w * x| + |bias|`, which bounds `|reference|` from above.
    pub fn max_relative_error(&self, got: &Tensor) -> Result<f64> {
        if got.dims() != self.output.dims() || got.layout() != self.output.layout() {
            return Err(Error::shape(format!(
                "output {:?} ({}) vs reference {:?} ({})",
                got.dims(),
                got.layout(),
                self.output.dims(),
                self.output.layout()
            )));
        }
        Ok(got
            .data()
            .iter()
            .zip(self.output.data())
            .zip(&self.magnitude)
            .map(|((&a, &b), &mag)| relative_error(a, b, mag))
            .fold(0.0, f64::max))
    }
}

pub fn relative_error(got: f32, want: f32, magnitude: f64) -> f64 {
    let diff = (got as f64 - want as f64).abs();
    let denom = (want as f64).abs().max(magnitude);
    if diff == 0.0 {
        0.0
    } else if denom == 0.0 || !diff.is_finite() {
        f64::INFINITY
    } else {
        diff / denom
    }
}

pub fn conv_reference_with_magnitude(
    g: &ConvGeometry,
    weights: &Matrix,
    bias: Option<&[f32]>,
    input: &Tensor,
) -> Result<ReferenceOutput> {
    g.check_input(input)?;
    if weights.cols != g.k_rows() {
        return Err(Error::shape(format!(
            "weights have {} columns but Cin*Kh*Kw = {}",
            weights.cols,
            g.k_rows()
        )));
    }
    let cout = weights.rows;
    let out_dims = g.output_dims(cout);
    // input converted once so taps index a plain NCHW array
    let mut x = vec![0.0f64; g.batch * g.in_channels * g.in_h * g.in_w];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            for h in 0..g.in_h {
                for w in 0..g.in_w {
                    x[((n * g.in_channels + c) * g.in_h + h) * g.in_w + w] = input.at(n, c, h, w) as f64;
                }
            }
        }
    }
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0f32; out_dims.len()];
    let mut magnitude = vec![0.0f64; out_dims.len()];
    let mut sum = vec![0.0f64; plane];
    let mut mag = vec![0.0f64; plane];
    for co in 0..cout {
        let b = bias.map_or(0.0, |b| b[co] as f64);
        for n in 0..g.batch {
            sum.fill(b);
            mag.fill(b.abs());
            for c in 0..g.in_channels {
                let xc = &x[(n * g.in_channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                for ki in 0..g.kernel_h {
                    for kj in 0..g.kernel_w {
                        let w = weights.get(co, (c * g.kernel_h + ki) * g.kernel_w + kj) as f64;
                        if w == 0.0 {
                            continue;
                        }
                        for oh in 0..g.out_h {
                            let ih = (oh * g.stride_h + ki) as isize - g.pad_h as isize;
                            if ih < 0 || ih >= g.in_h as isize {
                                continue;
                            }
                            let row = &xc[ih as usize * g.in_w..][..g.in_w];
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride_w + kj) as isize - g.pad_w as isize;
                                if iw < 0 || iw >= g.in_w as isize {
                                    continue;
                                }
                                let p = w * row[iw as usize];
                                sum[oh * g.out_w + ow] += p;
                                mag[oh * g.out_w + ow] += p.abs();
                            }
                        }
                    }
                }
            }
            let at = out_dims.offset(Layout::Cnhw, n, co, 0, 0);
            for (o, &v) in out[at..at + plane].iter_mut().zip(&sum) {
                *o = v as f32;
            }
            magnitude[at..at + plane].copy_from_slice(&mag);
        }
    }
    Ok(ReferenceOutput {
        output: Tensor::new(vec![out_dims.n, out_dims.c, out_dims.h, out_dims.w], Layout::Cnhw, out)?,
        magnitude,
    })
}

/// NHWC in, NHWC out: one layout conversion at each end, CNHW in between.
pub fn run_model(layers: &[ConvLayer], input: &Tensor, workers: usize) -> Result<Tensor> {
    if input.layout() != Layout::Nhwc {
        return Err(Error::Layout(format!(
            "model input must be NHWC, got {}",
            input.layout()
        )));
    }
    let mut x = input.convert_layout(Layout::Cnhw)?;
    for (i, layer) in layers.iter().enumerate() {
        let have = x.dims4()?;
        if have != layer.geometry.input_dims() {
            return Err(Error::shape(format!(
                "layer {i} expects input {:?}, got {have:?}",
                layer.geometry.input_dims()
            )));
        }
        x = conv_forward(layer, &x, workers)?;
    }
    x.convert_layout(Layout::Nhwc)
}

/// Reference counterpart of [`run_model`], including each layer's ReLU.
pub fn run_model_reference(layers: &[ConvLayer], input: &Tensor) -> Result<Tensor> {
    let mut x = input.convert_layout(Layout::Cnhw)?;
    for layer in layers {
        x = conv_forward_reference(&layer.geometry, &layer.dense_weights(), layer.bias.as_deref(), &x)?;
        if layer.relu {
            x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    x.convert_layout(Layout::Nhwc)
}

/// Runs the model and checks every layer against the reference on the same
/// input. Returns the NHWC output and each layer's max relative error.
pub fn run_model_verified(layers: &[ConvLayer], input: &Tensor, workers: usize) -> Result<(Tensor, Vec<f64>)> {
    if input.layout() != Layout::Nhwc {
        return Err(Error::Layout(format!(
            "model input must be NHWC, got {}",
            input.layout()
        )));
    }
    let mut x = input.convert_layout(Layout::Cnhw)?;
    let mut errors = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut reference =
            conv_reference_with_magnitude(&layer.geometry, &layer.dense_weights(), layer.bias.as_deref(), &x)?;
        if layer.relu {
            reference.output.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        x = conv_forward(layer, &x, workers)?;
        errors.push(reference.max_relative_error(&x)?);
    }
    Ok((x.convert_layout(Layout::Nhwc)?, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelKind, Lmul, VectorEnv};
    use crate::pruner::{PruneMode, PruneSpec, SparseWeight};
    use crate::random::{seeded, uniform_matrix, uniform_tensor, uniform_vec};

    fn config(kind: KernelKind, t: usize, lmul: Lmul) -> KernelConfig {
        KernelConfig::new(kind, t, VectorEnv::with_lmul(lmul)).unwrap()
    }

    #[test]
    fn identity_pointwise_layer_is_a_no_op() {
        let d = Dims4::new(1, 6, 5, 7);
        let g = ConvGeometry::new(d, (1, 1), (1, 1), (0, 0)).unwrap();
        let x = uniform_tensor(d, Layout::Cnhw, &mut seeded(1));
        for kind in KernelKind::ALL {
            let layer = ConvLayer::new(
                g,
                WeightSource::Dense(Matrix::identity(6)),
                None,
                config(kind, 4, Lmul::M1),
            )
            .unwrap();
            assert_eq!(conv_forward(&layer, &x, 2).unwrap(), x);
        }
    }

    #[test]
    fn fully_pruned_layer_outputs_bias() {
        let d = Dims4::new(2, 3, 6, 6);
        let g = ConvGeometry::new(d, (3, 3), (1, 1), (1, 1)).unwrap();
        let w = Matrix::zeros(5, 27);
        let sw = SparseWeight::compress(&w, &crate::pruner::Mask::from_fn(5, 27, |_, _| false), 2).unwrap();
        let bias = vec![0.5, -1.0, 2.0, 0.0, 3.25];
        let layer = ConvLayer::new(
            g,
            WeightSource::ColumnWise(sw),
            Some(bias.clone()),
            config(KernelKind::ColumnWise, 2, Lmul::M2),
        )
        .unwrap();
        let x = uniform_tensor(d, Layout::Cnhw, &mut seeded(2));
        let y = conv_forward(&layer, &x, 3).unwrap();
        for (co, &b) in bias.iter().enumerate() {
            for n in 0..2 {
                for h in 0..6 {
                    for w in 0..6 {
                        assert_eq!(y.at(n, co, h, w), b);
                    }
                }
            }
        }
    }

    #[test]
    fn resnet_block_matches_reference() {
        let d = Dims4::new(1, 16, 8, 8);
        let g = ConvGeometry::new(d, (3, 3), (1, 1), (1, 1)).unwrap();
        let w = uniform_matrix(32, 144, &mut seeded(3));
        let spec = PruneSpec::from_ratio(0.5, 144, 8, PruneMode::ColumnWise).unwrap();
        let sw = SparseWeight::prune(&w, &spec).unwrap();
        let bias = uniform_vec(32, &mut seeded(4));
        let layer = ConvLayer::new(
            g,
            WeightSource::ColumnWise(sw),
            Some(bias),
            config(KernelKind::ColumnWise, 8, Lmul::M2),
        )
        .unwrap();
        let x = uniform_tensor(d, Layout::Cnhw, &mut seeded(5));
        let reference = conv_reference_with_magnitude(&g, &layer.dense_weights(), layer.bias.as_deref(), &x).unwrap();
        let y = conv_forward(&layer, &x, 4).unwrap();
        assert!(reference.max_relative_error(&y).unwrap() <= 1e-4);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let d = Dims4::new(2, 8, 9, 9);
        let g = ConvGeometry::new(d, (3, 3), (2, 2), (1, 1)).unwrap();
        let w = uniform_matrix(20, 72, &mut seeded(6));
        let sw = SparseWeight::prune(&w, &PruneSpec::new(4, 8, 4, PruneMode::ColumnWise).unwrap()).unwrap();
        let layer = ConvLayer::new(
            g,
            WeightSource::ColumnWise(sw),
            None,
            config(KernelKind::ColumnWise, 4, Lmul::M1),
        )
        .unwrap();
        let x = uniform_tensor(d, Layout::Cnhw, &mut seeded(7));
        let (one, c1) = conv_forward_with_stats(&layer, &x, 1).unwrap();
        for workers in [2, 3, 8, 64] {
            let (many, cn) = conv_forward_with_stats(&layer, &x, workers).unwrap();
            assert!(one
                .data()
                .iter()
                .zip(many.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(c1, cn);
        }
    }

    #[test]
    fn relu_clamps_negative_outputs() {
        let d = Dims4::new(1, 2, 3, 3);
        let g = ConvGeometry::new(d, (1, 1), (1, 1), (0, 0)).unwrap();
        let w = Matrix::new(2, 2, vec![-1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = ConvLayer::new(g, WeightSource::Dense(w), None, config(KernelKind::Dense, 2, Lmul::M1))
            .unwrap()
            .with_relu(true);
        let x = Tensor::from_fn4(d, Layout::Cnhw, |_, _, _, _| 1.0).unwrap();
        let y = conv_forward(&layer, &x, 1).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.0));
        assert!(y.data()[9..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn layer_rejects_mismatched_shapes() {
        let d = Dims4::new(1, 2, 4, 4);
        let g = ConvGeometry::new(d, (3, 3), (1, 1), (1, 1)).unwrap();
        let cfg = config(KernelKind::Dense, 2, Lmul::M1);
        assert!(ConvLayer::new(g, WeightSource::Dense(Matrix::zeros(3, 17)), None, cfg).is_err());
        assert!(ConvLayer::new(g, WeightSource::Dense(Matrix::zeros(3, 18)), Some(vec![0.0; 2]), cfg).is_err());
        let layer = ConvLayer::new(g, WeightSource::Dense(Matrix::zeros(3, 18)), None, cfg).unwrap();
        let wrong = uniform_tensor(Dims4::new(1, 2, 5, 4), Layout::Cnhw, &mut seeded(8));
        assert!(conv_forward(&layer, &wrong, 1).is_err());
    }

    #[test]
    fn empty_model_round_trips_layout() {
        let x = uniform_tensor(Dims4::new(2, 3, 4, 5), Layout::Nhwc, &mut seeded(9));
        assert_eq!(run_model(&[], &x, 2).unwrap(), x);
    }

    #[test]
    fn two_layer_chain_matches_reference_chain() {
        let d = Dims4::new(1, 4, 8, 8);
        let g1 = ConvGeometry::new(d, (3, 3), (1, 1), (1, 1)).unwrap();
        let g2 = ConvGeometry::new(g1.output_dims(6), (3, 3), (2, 2), (1, 1)).unwrap();
        let w1 = uniform_matrix(6, 36, &mut seeded(10));
        let w2 = uniform_matrix(5, 54, &mut seeded(11));
        let sw1 = SparseWeight::prune(&w1, &PruneSpec::new(18, 36, 2, PruneMode::ColumnWise).unwrap()).unwrap();
        let l1 = ConvLayer::new(
            g1,
            WeightSource::ColumnWise(sw1),
            Some(vec![0.1; 6]),
            config(KernelKind::ColumnWise, 2, Lmul::M1),
        )
        .unwrap()
        .with_relu(true);
        let l2 = ConvLayer::new(
            g2,
            WeightSource::Dense(w2),
            None,
            config(KernelKind::InnerProductNM, 3, Lmul::M2),
        )
        .unwrap();
        let layers = [l1, l2];
        let x = uniform_tensor(d, Layout::Nhwc, &mut seeded(12));
        let got = run_model(&layers, &x, 2).unwrap();
        let want = run_model_reference(&layers, &x).unwrap();
        assert_eq!(got.layout(), Layout::Nhwc);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }
}
