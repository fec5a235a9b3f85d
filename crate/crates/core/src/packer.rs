//! GEMM data-matrix construction from CNHW feature maps.
//!
//! Row `r` of the data matrix encodes `(c, kh_off, kw_off)` with `kw_off`
//! fastest; column `j` encodes `(n, oh, ow)` with `ow` fastest. [`im2col`] and
//! [`pack`] are the two-step baseline; [`fused_im2col_pack`] writes the strips
//! straight from the feature map in one pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Layout, Matrix, Tensor};

/// Shape of one convolution, including the batch it runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Dims4, kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape("kernel and stride extents must be at least 1"));
        }
        if input.is_empty() {
            return Err(Error::shape(format!("empty input {input:?}")));
        }
        if input.h + 2 * ph < kh || input.w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                input.h + 2 * ph,
                input.w + 2 * pw
            )));
        }
        Ok(ConvGeometry {
            batch: input.n,
            in_channels: input.c,
            in_h: input.h,
            in_w: input.w,
            kernel_h: kh,
            kernel_w: kw,
            stride_h: sh,
            stride_w: sw,
            pad_h: ph,
            pad_w: pw,
            out_h: (input.h + 2 * ph - kh) / sh + 1,
            out_w: (input.w + 2 * pw - kw) / sw + 1,
        })
    }

    pub fn input_dims(&self) -> Dims4 {
        Dims4::new(self.batch, self.in_channels, self.in_h, self.in_w)
    }

    pub fn output_dims(&self, out_channels: usize) -> Dims4 {
        Dims4::new(self.batch, out_channels, self.out_h, self.out_w)
    }

    /// Reduction length `Cin * Kh * Kw`: rows of the data matrix.
    pub fn k_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// `N * OH * OW`: columns of the data matrix.
    pub fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn check_input(&self, src: &Tensor) -> Result<()> {
        if src.layout() != Layout::Cnhw {
            return Err(Error::Layout(format!(
                "convolution input must be CNHW, got {}",
                src.layout()
            )));
        }
        let dims = src.dims4()?;
        if dims != self.input_dims() {
            return Err(Error::shape(format!(
                "input {dims:?} does not match geometry {:?}",
                self.input_dims()
            )));
        }
        Ok(())
    }

    /// Output columns `[lo, hi)` of one output row whose horizontal tap `kj`
    /// lands inside the image.
    fn valid_ow(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad_w > kj {
            (self.pad_w - kj).div_ceil(self.stride_w)
        } else {
            0
        };
        let hi = if self.in_w + self.pad_w > kj {
            (self.in_w + self.pad_w - kj).div_ceil(self.stride_w)
        } else {
            0
        };
        (lo.min(self.out_w), hi.min(self.out_w).max(lo.min(self.out_w)))
    }

    /// Input row for output row `oh` and vertical tap `ki`, if inside the image.
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.stride_h + ki)
            .checked_sub(self.pad_h)
            .filter(|&ih| ih < self.in_h)
    }
}

/// Data matrix split into vector-aligned strips of `vl` columns. Within a
/// strip, storage is row-major over `(row, lane)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    pub rows: usize,
    pub logical_cols: usize,
    pub vl: usize,
    data: Vec<f32>,
}

impl PackedMatrix {
    fn zeroed(rows: usize, logical_cols: usize, vl: usize) -> Self {
        let strips = logical_cols.div_ceil(vl);
        PackedMatrix {
            rows,
            logical_cols,
            vl,
            data: vec![0.0; strips * rows * vl],
        }
    }

    pub fn num_strips(&self) -> usize {
        self.logical_cols.div_ceil(self.vl)
    }

    /// Strip `s`: `rows * vl` values.
    #[inline]
    pub fn strip(&self, s: usize) -> &[f32] {
        let len = self.rows * self.vl;
        &self.data[s * len..(s + 1) * len]
    }

    /// Live lanes of strip `s`; only the last strip can be short.
    pub fn live_lanes(&self, s: usize) -> usize {
        (self.logical_cols - s * self.vl).min(self.vl)
    }

    #[inline]
    pub fn offset(&self, r: usize, c: usize) -> usize {
        (c / self.vl) * self.rows * self.vl + r * self.vl + c % self.vl
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[self.offset(r, c)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn unpack(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.logical_cols, |r, c| self.get(r, c))
    }

    /// Writes `values` into row `r` starting at logical column `c`, splitting at
    /// strip boundaries.
    fn write_run(&mut self, r: usize, mut c: usize, mut values: &[f32]) {
        while !values.is_empty() {
            let lane = c % self.vl;
            let take = values.len().min(self.vl - lane);
            let at = self.offset(r, c);
            self.data[at..at + take].copy_from_slice(&values[..take]);
            values = &values[take..];
            c += take;
        }
    }

    fn zero_run(&mut self, r: usize, mut c: usize, mut len: usize) {
        while len > 0 {
            let lane = c % self.vl;
            let take = len.min(self.vl - lane);
            let at = self.offset(r, c);
            self.data[at..at + take].fill(0.0);
            len -= take;
            c += take;
        }
    }
}

/// Element-level memory traffic of a packing pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackStats {
    /// Reads of feature-map elements.
    pub source_reads: u64,
    /// Reads of the intermediate patch matrix (two-step pipeline only).
    pub intermediate_reads: u64,
    /// Element writes, including explicit zero padding.
    pub writes: u64,
    /// Vector copy instructions issued, one per run.
    pub runs: u64,
}

impl PackStats {
    pub fn total_reads(&self) -> u64 {
        self.source_reads + self.intermediate_reads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunKind {
    /// Unit-stride vector copy.
    Contiguous,
    /// Strided gather (`stride_w > 1`).
    Strided,
    /// Padding written as zeros without touching the source.
    Zero,
}

/// One vector move issued by the fused pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub row: usize,
    pub col: usize,
    pub len: usize,
    pub kind: RunKind,
}

/// Copy-chunk length of the fused pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CopyWidth {
    Fixed(usize),
    /// The width from [`COPY_WIDTHS`] closest to the input width.
    Auto,
}

/// Vector lengths (f32 lanes) for LMUL 1, 2, 4, 8 at VLEN = 256.
pub const COPY_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl CopyWidth {
    pub fn resolve(self, in_w: usize) -> usize {
        match self {
            CopyWidth::Fixed(n) => n,
            // ties go to the longer vector
            CopyWidth::Auto => *COPY_WIDTHS
                .iter()
                .rev()
                .min_by_key(|&&w| w.abs_diff(in_w))
                .expect("non-empty"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedOptions {
    pub copy_width: CopyWidth,
    pub record_runs: bool,
}

/// Patch matrix of `src` (CNHW). Padding taps are 0.0.
pub fn im2col(src: &Tensor, g: &ConvGeometry) -> Result<Matrix> {
    im2col_with_stats(src, g).map(|(m, _)| m)
}

pub fn im2col_with_stats(src: &Tensor, g: &ConvGeometry) -> Result<(Matrix, PackStats)> {
    g.check_input(src)?;
    let dims = g.input_dims();
    let cols = g.cols();
    let mut out = Matrix::zeros(g.k_rows(), cols);
    let mut stats = PackStats::default();
    let x = src.data();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let row = &mut out.data[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    for oh in 0..g.out_h {
                        for ow in 0..g.out_w {
                            let j = (n * g.out_h + oh) * g.out_w + ow;
                            let ih = (oh * g.stride_h + ki).checked_sub(g.pad_h);
                            let iw = (ow * g.stride_w + kj).checked_sub(g.pad_w);
                            row[j] = match (ih, iw) {
                                (Some(ih), Some(iw)) if ih < g.in_h && iw < g.in_w => {
                                    stats.source_reads += 1;
                                    x[dims.offset(Layout::Cnhw, n, c, ih, iw)]
                                }
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }
    stats.writes = (g.k_rows() * cols) as u64;
    Ok((out, stats))
}

/// Reorganizes `m` into strips of `vl` columns; the final strip is zero-padded.
pub fn pack(m: &Matrix, vl: usize) -> Result<PackedMatrix> {
    pack_with_stats(m, vl).map(|(p, _)| p)
}

pub fn pack_with_stats(m: &Matrix, vl: usize) -> Result<(PackedMatrix, PackStats)> {
    if vl == 0 {
        return Err(Error::config("vector length must be at least 1"));
    }
    let mut packed = PackedMatrix::zeroed(m.rows, m.cols, vl);
    for r in 0..m.rows {
        packed.write_run(r, 0, m.row(r));
    }
    let stats = PackStats {
        intermediate_reads: (m.rows * m.cols) as u64,
        writes: packed.data.len() as u64,
        runs: (m.rows * packed.num_strips()) as u64,
        ..PackStats::default()
    };
    Ok((packed, stats))
}

/// The separate im2col + pack baseline, with combined traffic.
pub fn two_step_pack(src: &Tensor, g: &ConvGeometry, vl: usize) -> Result<(PackedMatrix, PackStats)> {
    if vl == 0 {
        return Err(Error::config("vector length must be at least 1"));
    }
    let (m, a) = im2col_with_stats(src, g)?;
    let (p, b) = pack_with_stats(&m, vl)?;
    let stats = PackStats {
        source_reads: a.source_reads,
        intermediate_reads: b.intermediate_reads,
        writes: a.writes + b.writes,
        runs: b.runs,
    };
    Ok((p, stats))
}

/// im2col and packing in one pass over the feature map, copying W-runs of at
/// most `vl` elements.
pub fn fused_im2col_pack(src: &Tensor, g: &ConvGeometry, vl: usize) -> Result<PackedMatrix> {
    let opts = FusedOptions {
        copy_width: CopyWidth::Fixed(vl),
        record_runs: false,
    };
    fused_im2col_pack_with(src, g, vl, opts).map(|(p, _, _)| p)
}

/// Fused pass with an explicit copy width. Returns the strips, traffic and,
/// when requested, every run issued.
pub fn fused_im2col_pack_with(
    src: &Tensor,
    g: &ConvGeometry,
    vl: usize,
    opts: FusedOptions,
) -> Result<(PackedMatrix, PackStats, Vec<Run>)> {
    g.check_input(src)?;
    let chunk = opts.copy_width.resolve(g.in_w);
    if vl == 0 || chunk == 0 {
        return Err(Error::config("vector length must be at least 1"));
    }
    let dims = g.input_dims();
    let x = src.data();
    let mut packed = PackedMatrix::zeroed(g.k_rows(), g.cols(), vl);
    let mut stats = PackStats::default();
    let mut runs = Vec::new();
    let mut gather = vec![0.0f32; chunk];
    let mut emit = |stats: &mut PackStats, run: Run| {
        stats.runs += 1;
        if opts.record_runs {
            runs.push(run);
        }
    };

    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let r = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let (ow_lo, ow_hi) = g.valid_ow(kj);
                for n in 0..g.batch {
                    for oh in 0..g.out_h {
                        let col0 = (n * g.out_h + oh) * g.out_w;
                        let Some(ih) = g.input_row(oh, ki) else {
                            packed.zero_run(r, col0, g.out_w);
                            stats.writes += g.out_w as u64;
                            emit(
                                &mut stats,
                                Run {
                                    row: r,
                                    col: col0,
                                    len: g.out_w,
                                    kind: RunKind::Zero,
                                },
                            );
                            continue;
                        };
                        // skip padded regions by offset, zero-fill them in place
                        for (lo, hi) in [(0, ow_lo), (ow_hi, g.out_w)] {
                            if hi > lo {
                                packed.zero_run(r, col0 + lo, hi - lo);
                                stats.writes += (hi - lo) as u64;
                                emit(
                                    &mut stats,
                                    Run {
                                        row: r,
                                        col: col0 + lo,
                                        len: hi - lo,
                                        kind: RunKind::Zero,
                                    },
                                );
                            }
                        }
                        let src_row = dims.offset(Layout::Cnhw, n, c, ih, 0);
                        let mut ow = ow_lo;
                        while ow < ow_hi {
                            let len = (ow_hi - ow).min(chunk);
                            let iw = ow * g.stride_w + kj - g.pad_w;
                            let kind = if g.stride_w == 1 {
                                packed.write_run(r, col0 + ow, &x[src_row + iw..src_row + iw + len]);
                                RunKind::Contiguous
                            } else {
                                for (i, v) in gather[..len].iter_mut().enumerate() {
                                    *v = x[src_row + iw + i * g.stride_w];
                                }
                                packed.write_run(r, col0 + ow, &gather[..len]);
                                RunKind::Strided
                            };
                            stats.source_reads += len as u64;
                            stats.writes += len as u64;
                            emit(
                                &mut stats,
                                Run {
                                    row: r,
                                    col: col0 + ow,
                                    len,
                                    kind,
                                },
                            );
                            ow += len;
                        }
                    }
                }
            }
        }
    }
    Ok((packed, stats, runs))
}
