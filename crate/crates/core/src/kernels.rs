//! Micro-kernels over a modeled RVV register file.
//!
//! Each kernel computes one `t x vl` output block from one row-tile of weights
//! and one packed data strip. Vector registers are modeled as `vl`-wide lane
//! arrays; every element moved between memory and the model register file is
//! counted in [`TrafficCounters`].

use std::fmt;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::PackedMatrix;
use crate::pruner::{Mask, RowSparseWeight, SparseTile, SparseWeight};
use crate::tensor::Matrix;

/// Architectural vector registers in RVV.
pub const VECTOR_REGISTERS: usize = 32;
pub const DEFAULT_VLEN_BITS: usize = 256;
/// Largest tile height the tuner considers.
pub const MAX_TILE: usize = 31;

/// Register-group multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Lmul {
    M1,
    M2,
    M4,
    M8,
}

impl Lmul {
    pub const ALL: [Lmul; 4] = [Lmul::M1, Lmul::M2, Lmul::M4, Lmul::M8];

    pub fn factor(self) -> usize {
        match self {
            Lmul::M1 => 1,
            Lmul::M2 => 2,
            Lmul::M4 => 4,
            Lmul::M8 => 8,
        }
    }
}

impl TryFrom<u32> for Lmul {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            1 => Ok(Lmul::M1),
            2 => Ok(Lmul::M2),
            4 => Ok(Lmul::M4),
            8 => Ok(Lmul::M8),
            _ => Err(Error::config(format!("LMUL must be 1, 2, 4 or 8, got {v}"))),
        }
    }
}

impl From<Lmul> for u32 {
    fn from(l: Lmul) -> u32 {
        l.factor() as u32
    }
}

impl fmt::Display for Lmul {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VectorEnv {
    #[serde(default = "default_vlen_bits")]
    pub vlen_bits: usize,
    pub lmul: Lmul,
}

fn default_vlen_bits() -> usize {
    DEFAULT_VLEN_BITS
}

impl VectorEnv {
    pub fn new(vlen_bits: usize, lmul: Lmul) -> Result<Self> {
        if vlen_bits < 32 || !vlen_bits.is_multiple_of(32) {
            return Err(Error::config(format!(
                "VLEN must be a positive multiple of 32 bits, got {vlen_bits}"
            )));
        }
        Ok(VectorEnv { vlen_bits, lmul })
    }

    pub fn with_lmul(lmul: Lmul) -> Self {
        VectorEnv {
            vlen_bits: DEFAULT_VLEN_BITS,
            lmul,
        }
    }

    /// f32 lanes per logical register.
    pub fn vl(&self) -> usize {
        self.vlen_bits / 32 * self.lmul.factor()
    }

    /// Logical registers left after grouping.
    pub fn logical_regs(&self) -> usize {
        VECTOR_REGISTERS / self.lmul.factor()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Dense,
    #[serde(rename = "inner_nm")]
    InnerProductNM,
    #[serde(rename = "outer_nm")]
    OuterProductNM,
    #[serde(rename = "column_wise")]
    ColumnWise,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::Dense,
        KernelKind::InnerProductNM,
        KernelKind::OuterProductNM,
        KernelKind::ColumnWise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Dense => "dense",
            KernelKind::InnerProductNM => "inner_nm",
            KernelKind::OuterProductNM => "outer_nm",
            KernelKind::ColumnWise => "column_wise",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dense" => Ok(KernelKind::Dense),
            "inner_nm" | "inner" | "inner_product_nm" => Ok(KernelKind::InnerProductNM),
            "outer_nm" | "outer" | "outer_product_nm" => Ok(KernelKind::OuterProductNM),
            "column_wise" | "columnwise" | "column" => Ok(KernelKind::ColumnWise),
            _ => Err(Error::config(format!("unknown kernel kind '{s}'"))),
        }
    }
}

/// One micro-kernel candidate: kind, tile height and vector environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub t: usize,
    #[serde(flatten)]
    pub env: VectorEnv,
}

#[derive(Deserialize)]
struct RawConfig {
    kind: KernelKind,
    t: usize,
    lmul: Lmul,
    #[serde(default = "default_vlen_bits")]
    vlen_bits: usize,
}

impl TryFrom<RawConfig> for KernelConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        KernelConfig::new(raw.kind, raw.t, VectorEnv::new(raw.vlen_bits, raw.lmul)?)
    }
}

impl KernelConfig {
    pub fn new(kind: KernelKind, t: usize, env: VectorEnv) -> Result<Self> {
        let cfg = KernelConfig { kind, t, env };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `t` accumulators plus one data register must fit the register file.
    pub fn fits_register_budget(t: usize, lmul: Lmul) -> bool {
        (t + 1) * lmul.factor() <= VECTOR_REGISTERS
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::config("tile height must be at least 1"));
        }
        if self.kind == KernelKind::ColumnWise && !Self::fits_register_budget(self.t, self.env.lmul) {
            return Err(Error::config(format!(
                "t={} at LMUL={} needs {} vector registers, only {VECTOR_REGISTERS} exist",
                self.t,
                self.env.lmul,
                (self.t + 1) * self.env.lmul.factor()
            )));
        }
        Ok(())
    }

    pub fn vl(&self) -> usize {
        self.env.vl()
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(t={}, lmul={})", self.kind, self.t, self.env.lmul)
    }
}

/// Element counts of memory traffic in one kernel run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub data_elem_loads: u64,
    pub weight_elem_loads: u64,
    pub output_elem_loads: u64,
    pub output_elem_stores: u64,
    /// Lane-level multiply-accumulates.
    pub macs: u64,
}

impl AddAssign for TrafficCounters {
    fn add_assign(&mut self, o: Self) {
        self.data_elem_loads += o.data_elem_loads;
        self.weight_elem_loads += o.weight_elem_loads;
        self.output_elem_loads += o.output_elem_loads;
        self.output_elem_stores += o.output_elem_stores;
        self.macs += o.macs;
    }
}

impl std::iter::Sum for TrafficCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = TrafficCounters::default();
        for c in iter {
            total += c;
        }
        total
    }
}

impl TrafficCounters {
    pub fn output_traffic(&self) -> u64 {
        self.output_elem_loads + self.output_elem_stores
    }

    /// One load of the block when resuming and one store at the end.
    fn count_block(&mut self, mode: AccMode, len: usize) {
        if mode == AccMode::Resume {
            self.output_elem_loads += len as u64;
        }
        self.output_elem_stores += len as u64;
    }
}

/// Whether the output block already holds partial sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccMode {
    /// Caller zeroed the block; accumulators start at zero without a load.
    Fresh,
    /// Accumulators are loaded from the block before the kernel runs.
    Resume,
}

/// Model register file: `t` accumulators of `vl` lanes each.
struct Registers {
    vl: usize,
    lanes: Vec<f32>,
}

impl Registers {
    fn new(t: usize, vl: usize) -> Self {
        Registers {
            vl,
            lanes: vec![0.0; t * vl],
        }
    }

    #[inline(always)]
    fn acc(&mut self, i: usize) -> &mut [f32] {
        &mut self.lanes[i * self.vl..(i + 1) * self.vl]
    }

    fn load(&mut self, mode: AccMode, acc: &[f32], ctr: &mut TrafficCounters) {
        if mode == AccMode::Resume {
            self.lanes.copy_from_slice(acc);
            ctr.output_elem_loads += acc.len() as u64;
        }
    }

    fn store(&self, acc: &mut [f32], ctr: &mut TrafficCounters) {
        acc.copy_from_slice(&self.lanes);
        ctr.output_elem_stores += acc.len() as u64;
    }
}

/// `acc[l] += w * data[l]` over all lanes (vfmacc.vf).
#[inline(always)]
fn fmacc(acc: &mut [f32], w: f32, data: &[f32]) {
    for (a, &x) in acc.iter_mut().zip(data) {
        *a += w * x;
    }
}

#[inline(always)]
fn strip_row(strip: &[f32], row: usize, vl: usize) -> &[f32] {
    &strip[row * vl..(row + 1) * vl]
}

/// Lanes per host-register pass. Tiled kernels keep `t` such chunks of
/// accumulators live across the whole reduction.
const LANE_CHUNK: usize = 8;

#[inline(always)]
fn lane_chunk(s: &[f32], at: usize) -> &[f32; LANE_CHUNK] {
    s[at..at + LANE_CHUNK].try_into().unwrap()
}

/// `acc[i] += sum_j weight(j, i) * strip[row_of(j)]` with the `T x vl` block
/// held in locals one lane chunk at a time. Same summation order as [`fmacc`].
#[inline(always)]
fn tiled_block<const T: usize, R: Fn(usize) -> usize, W: Fn(usize, usize) -> f32>(
    steps: usize,
    row_of: R,
    weight: W,
    strip: &[f32],
    vl: usize,
    acc: &mut [f32],
    resume: bool,
) {
    for c0 in (0..vl).step_by(LANE_CHUNK) {
        let mut regs = [[0.0f32; LANE_CHUNK]; T];
        if resume {
            for (i, r) in regs.iter_mut().enumerate() {
                *r = *lane_chunk(acc, i * vl + c0);
            }
        }
        for j in 0..steps {
            let d = lane_chunk(strip, row_of(j) * vl + c0);
            for (i, r) in regs.iter_mut().enumerate() {
                let w = weight(j, i);
                for l in 0..LANE_CHUNK {
                    r[l] += w * d[l];
                }
            }
        }
        for (i, r) in regs.iter().enumerate() {
            acc[i * vl + c0..i * vl + c0 + LANE_CHUNK].copy_from_slice(r);
        }
    }
}

/// Calls `$f::<T, _, _>` with the tile height as a constant when it is at
/// most [`MAX_TILE`]; evaluates to `false` otherwise.
macro_rules! dispatch_tile {
    ($t:expr, $f:ident($($arg:expr),* $(,)?)) => {
        dispatch_tile!(@arms $t, $f, ($($arg),*), 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16
            17 18 19 20 21 22 23 24 25 26 27 28 29 30 31)
    };
    (@arms $t:expr, $f:ident, $args:tt, $($n:literal)*) => {
        match $t {
            $($n => { dispatch_tile!(@call $f, $n, $args); true })*
            _ => false,
        }
    };
    (@call $f:ident, $n:literal, ($($arg:expr),*)) => {
        $f::<$n, _, _>($($arg),*)
    };
}

fn check_block(cfg: &KernelConfig, k_rows: usize, strip: &[f32], acc: &[f32]) -> Result<usize> {
    cfg.validate()?;
    let vl = cfg.vl();
    if strip.len() != k_rows * vl {
        return Err(Error::shape(format!(
            "strip holds {} values, expected {k_rows} rows x {vl} lanes",
            strip.len()
        )));
    }
    if acc.len() != cfg.t * vl {
        return Err(Error::shape(format!(
            "output block holds {} values, expected {} x {vl}",
            acc.len(),
            cfg.t
        )));
    }
    Ok(vl)
}

/// Dense weights split into zero-padded `t x cols` row tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTiles {
    pub rows: usize,
    pub cols: usize,
    pub t: usize,
    data: Vec<f32>,
}

impl DenseTiles {
    pub fn new(w: &Matrix, t: usize) -> Self {
        let tiles = w.rows.div_ceil(t);
        let mut data = vec![0.0; tiles * t * w.cols];
        data[..w.data.len()].copy_from_slice(&w.data);
        DenseTiles {
            rows: w.rows,
            cols: w.cols,
            t,
            data,
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.rows.div_ceil(self.t)
    }

    /// Row-major `t x cols` block of tile `i`.
    pub fn tile(&self, i: usize) -> &[f32] {
        let len = self.t * self.cols;
        &self.data[i * len..(i + 1) * len]
    }
}

/// Standard tiled GEMM block: every weight column of the tile against every
/// strip row.
pub fn microkernel_dense(
    w_tile: &[f32],
    cols: usize,
    strip: &[f32],
    cfg: &KernelConfig,
    acc: &mut [f32],
    mode: AccMode,
) -> Result<TrafficCounters> {
    let vl = check_block(cfg, cols, strip, acc)?;
    let t = cfg.t;
    if w_tile.len() != t * cols {
        return Err(Error::shape(format!(
            "weight tile holds {} values, expected {t} x {cols}",
            w_tile.len()
        )));
    }
    let mut ctr = TrafficCounters::default();
    let resume = mode == AccMode::Resume;
    let fast = vl % LANE_CHUNK == 0
        && dispatch_tile!(
            t,
            tiled_block(cols, |k| k, |k, i| w_tile[i * cols + k], strip, vl, acc, resume)
        );
    if fast {
        ctr.count_block(mode, acc.len());
    } else {
        let mut regs = Registers::new(t, vl);
        regs.load(mode, acc, &mut ctr);
        for k in 0..cols {
            let data = strip_row(strip, k, vl);
            for i in 0..t {
                fmacc(regs.acc(i), w_tile[i * cols + k], data);
            }
        }
        regs.store(acc, &mut ctr);
    }
    ctr.data_elem_loads += (cols * vl) as u64;
    ctr.weight_elem_loads += (cols * t) as u64;
    ctr.macs += (cols * t * vl) as u64;
    Ok(ctr)
}

/// Column-wise N:M block: for each kept column, one data row is loaded and
/// broadcast-multiplied into all `t` register-resident accumulators.
pub fn microkernel_columnwise(
    tile: SparseTile<'_>,
    strip: &[f32],
    k_rows: usize,
    cfg: &KernelConfig,
    acc: &mut [f32],
    mode: AccMode,
) -> Result<TrafficCounters> {
    let vl = check_block(cfg, k_rows, strip, acc)?;
    let t = cfg.t;
    if tile.tile_t != t {
        return Err(Error::config(format!(
            "weights were pruned at tile height {} but the kernel runs t={t}",
            tile.tile_t
        )));
    }
    let mut ctr = TrafficCounters::default();
    let resume = mode == AccMode::Resume;
    let (cols, vals) = (tile.col_index, tile.values);
    let fast = vl % LANE_CHUNK == 0
        && dispatch_tile!(
            t,
            tiled_block(
                cols.len(),
                |j| cols[j] as usize,
                |j, i| vals[j * t + i],
                strip,
                vl,
                acc,
                resume
            )
        );
    if fast {
        ctr.count_block(mode, acc.len());
    } else {
        let mut regs = Registers::new(t, vl);
        regs.load(mode, acc, &mut ctr);
        for (j, &col) in cols.iter().enumerate() {
            let data = strip_row(strip, col as usize, vl);
            for (i, &w) in tile.column(j).iter().enumerate() {
                fmacc(regs.acc(i), w, data);
            }
        }
        regs.store(acc, &mut ctr);
    }
    let kept = tile.kept();
    ctr.data_elem_loads += (kept * vl) as u64;
    ctr.weight_elem_loads += (kept * t) as u64;
    ctr.macs += (kept * t * vl) as u64;
    Ok(ctr)
}

/// Conventional N:M, inner-product order: each weight row walks its own kept
/// indices and reloads the data rows it needs.
pub fn microkernel_inner_nm(
    weights: &RowSparseWeight,
    row0: usize,
    strip: &[f32],
    cfg: &KernelConfig,
    acc: &mut [f32],
    mode: AccMode,
) -> Result<TrafficCounters> {
    let vl = check_block(cfg, weights.cols, strip, acc)?;
    let t = cfg.t;
    let mut ctr = TrafficCounters::default();
    ctr.count_block(mode, acc.len());
    if mode == AccMode::Fresh {
        acc.fill(0.0);
    }
    for i in 0..t {
        let r = row0 + i;
        if r >= weights.rows {
            break;
        }
        let (idx, vals) = weights.row(r);
        let out = &mut acc[i * vl..(i + 1) * vl];
        if vl % LANE_CHUNK == 0 {
            // one output chunk in registers, data rows reloaded per weight row
            for c0 in (0..vl).step_by(LANE_CHUNK) {
                let mut reg = *lane_chunk(out, c0);
                for (&col, &w) in idx.iter().zip(vals) {
                    let d = lane_chunk(strip, col as usize * vl + c0);
                    for l in 0..LANE_CHUNK {
                        reg[l] += w * d[l];
                    }
                }
                out[c0..c0 + LANE_CHUNK].copy_from_slice(&reg);
            }
        } else {
            for (&col, &w) in idx.iter().zip(vals) {
                fmacc(out, w, strip_row(strip, col as usize, vl));
            }
        }
        ctr.data_elem_loads += (idx.len() * vl) as u64;
        ctr.weight_elem_loads += idx.len() as u64;
        ctr.macs += (idx.len() * vl) as u64;
    }
    Ok(ctr)
}

/// Column of a [`ScatteredWeight`] tile: its nonzero entries in `entries[start..end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScatterColumn {
    pub col: u32,
    pub start: usize,
    pub end: usize,
}

/// Row-wise-masked weights regrouped per row-tile by column, for the
/// outer-product schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteredWeight {
    pub rows: usize,
    pub cols: usize,
    pub t: usize,
    tile_ptr: Vec<usize>,
    columns: Vec<ScatterColumn>,
    entries: Vec<(u32, f32)>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScatteredTile<'a> {
    pub t: usize,
    pub columns: &'a [ScatterColumn],
    entries: &'a [(u32, f32)],
}

impl<'a> ScatteredTile<'a> {
    /// `(row within tile, weight)` pairs of one column.
    pub fn entries(&self, c: &ScatterColumn) -> &'a [(u32, f32)] {
        &self.entries[c.start..c.end]
    }
}

impl ScatteredWeight {
    pub fn new(weights: &RowSparseWeight, t: usize) -> Self {
        let mut tile_ptr = vec![0];
        let mut columns = Vec::new();
        let mut entries = Vec::new();
        let mut per_col: Vec<Vec<(u32, f32)>> = vec![Vec::new(); weights.cols];
        for r0 in (0..weights.rows).step_by(t) {
            for r in r0..(r0 + t).min(weights.rows) {
                let (idx, vals) = weights.row(r);
                for (&c, &v) in idx.iter().zip(vals) {
                    per_col[c as usize].push(((r - r0) as u32, v));
                }
            }
            for (c, list) in per_col.iter_mut().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let start = entries.len();
                entries.append(list);
                columns.push(ScatterColumn {
                    col: c as u32,
                    start,
                    end: entries.len(),
                });
            }
            tile_ptr.push(columns.len());
        }
        ScatteredWeight {
            rows: weights.rows,
            cols: weights.cols,
            t,
            tile_ptr,
            columns,
            entries,
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.tile_ptr.len() - 1
    }

    pub fn tile(&self, i: usize) -> ScatteredTile<'_> {
        ScatteredTile {
            t: self.t,
            columns: &self.columns[self.tile_ptr[i]..self.tile_ptr[i + 1]],
            entries: &self.entries,
        }
    }
}

/// Conventional N:M, outer-product order. Columns whose nonzeros cover the
/// whole tile accumulate in registers; partial products of irregular columns
/// are scattered to the output block in memory and reloaded on every update.
pub fn microkernel_outer_nm(
    tile: ScatteredTile<'_>,
    strip: &[f32],
    k_rows: usize,
    cfg: &KernelConfig,
    acc: &mut [f32],
    mode: AccMode,
) -> Result<TrafficCounters> {
    let vl = check_block(cfg, k_rows, strip, acc)?;
    let t = cfg.t;
    if tile.t != t {
        return Err(Error::config(format!(
            "weights were grouped at tile height {} but the kernel runs t={t}",
            tile.t
        )));
    }
    let mut ctr = TrafficCounters::default();
    let mut regs = Registers::new(t, vl);
    // rows whose memory block holds live partial sums
    let mut in_memory = vec![mode == AccMode::Resume; t];
    for column in tile.columns {
        let data = strip_row(strip, column.col as usize, vl);
        ctr.data_elem_loads += vl as u64;
        let entries = tile.entries(column);
        ctr.weight_elem_loads += entries.len() as u64;
        ctr.macs += (entries.len() * vl) as u64;
        if entries.len() == t {
            for &(i, w) in entries {
                fmacc(regs.acc(i as usize), w, data);
            }
            continue;
        }
        for &(i, w) in entries {
            let i = i as usize;
            let out = &mut acc[i * vl..(i + 1) * vl];
            if in_memory[i] {
                ctr.output_elem_loads += vl as u64;
                fmacc(out, w, data);
            } else {
                for (o, &x) in out.iter_mut().zip(data) {
                    *o = w * x;
                }
                in_memory[i] = true;
            }
            ctr.output_elem_stores += vl as u64;
        }
    }
    for (i, &live) in in_memory.iter().enumerate() {
        let out = &mut acc[i * vl..(i + 1) * vl];
        if live {
            ctr.output_elem_loads += vl as u64;
            for (o, &r) in out.iter_mut().zip(regs.acc(i).iter()) {
                *o += r;
            }
        } else {
            out.copy_from_slice(regs.acc(i));
        }
        ctr.output_elem_stores += vl as u64;
    }
    Ok(ctr)
}

/// Weights as supplied by the caller, before kernel-specific preparation.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightSource {
    Dense(Matrix),
    ColumnWise(SparseWeight),
    RowWise(RowSparseWeight),
}

impl WeightSource {
    pub fn rows(&self) -> usize {
        match self {
            WeightSource::Dense(m) => m.rows,
            WeightSource::ColumnWise(s) => s.rows,
            WeightSource::RowWise(r) => r.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            WeightSource::Dense(m) => m.cols,
            WeightSource::ColumnWise(s) => s.cols,
            WeightSource::RowWise(r) => r.cols,
        }
    }

    /// Dense matrix with zeros at pruned positions.
    pub fn to_dense(&self) -> Matrix {
        match self {
            WeightSource::Dense(m) => m.clone(),
            WeightSource::ColumnWise(s) => s.decompress(),
            WeightSource::RowWise(r) => r.decompress(),
        }
    }

    fn to_row_sparse(&self) -> RowSparseWeight {
        match self {
            WeightSource::Dense(m) => RowSparseWeight::compress(m, &Mask::full(m.rows, m.cols)).expect("full mask"),
            WeightSource::ColumnWise(s) => RowSparseWeight::from_columnwise(s),
            WeightSource::RowWise(r) => r.clone(),
        }
    }
}

/// Weights laid out for one kernel kind and tile height.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelWeights {
    Dense(DenseTiles),
    ColumnWise(SparseWeight),
    InnerProduct { weights: RowSparseWeight, t: usize },
    OuterProduct(ScatteredWeight),
}

impl KernelWeights {
    /// Lays out `source` for `cfg`. Column-wise weights must have been pruned
    /// at the kernel's tile height.
    pub fn prepare(source: &WeightSource, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.t;
        Ok(match cfg.kind {
            KernelKind::Dense => KernelWeights::Dense(DenseTiles::new(&source.to_dense(), t)),
            KernelKind::ColumnWise => match source {
                WeightSource::ColumnWise(sw) if sw.tile_t == t => KernelWeights::ColumnWise(sw.clone()),
                WeightSource::ColumnWise(sw) => {
                    return Err(Error::config(format!(
                        "weights were pruned at tile height {} but the kernel runs t={t}",
                        sw.tile_t
                    )))
                }
                WeightSource::Dense(m) => KernelWeights::ColumnWise(SparseWeight::dense(m, t)?),
                WeightSource::RowWise(r) => {
                    let dense = r.decompress();
                    let mask = row_sparse_mask(r);
                    KernelWeights::ColumnWise(SparseWeight::compress(&dense, &mask, t)?)
                }
            },
            KernelKind::InnerProductNM => KernelWeights::InnerProduct {
                weights: source.to_row_sparse(),
                t,
            },
            KernelKind::OuterProductNM => KernelWeights::OuterProduct(ScatteredWeight::new(&source.to_row_sparse(), t)),
        })
    }

    pub fn rows(&self) -> usize {
        match self {
            KernelWeights::Dense(d) => d.rows,
            KernelWeights::ColumnWise(s) => s.rows,
            KernelWeights::InnerProduct { weights, .. } => weights.rows,
            KernelWeights::OuterProduct(s) => s.rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            KernelWeights::Dense(d) => d.cols,
            KernelWeights::ColumnWise(s) => s.cols,
            KernelWeights::InnerProduct { weights, .. } => weights.cols,
            KernelWeights::OuterProduct(s) => s.cols,
        }
    }

    pub fn tile_height(&self) -> usize {
        match self {
            KernelWeights::Dense(d) => d.t,
            KernelWeights::ColumnWise(s) => s.tile_t,
            KernelWeights::InnerProduct { t, .. } => *t,
            KernelWeights::OuterProduct(s) => s.t,
        }
    }

    pub fn num_tiles(&self) -> usize {
        self.rows().div_ceil(self.tile_height())
    }

    /// Runs the kernel for row-tile `tile` against one strip into a fresh block.
    pub fn run_tile(&self, tile: usize, strip: &[f32], cfg: &KernelConfig, acc: &mut [f32]) -> Result<TrafficCounters> {
        let k = self.cols();
        match self {
            KernelWeights::Dense(d) => microkernel_dense(d.tile(tile), k, strip, cfg, acc, AccMode::Fresh),
            KernelWeights::ColumnWise(s) => microkernel_columnwise(s.tile(tile), strip, k, cfg, acc, AccMode::Fresh),
            KernelWeights::InnerProduct { weights, t } => {
                microkernel_inner_nm(weights, tile * t, strip, cfg, acc, AccMode::Fresh)
            }
            KernelWeights::OuterProduct(s) => microkernel_outer_nm(s.tile(tile), strip, k, cfg, acc, AccMode::Fresh),
        }
    }
}

fn row_sparse_mask(r: &RowSparseWeight) -> Mask {
    let mut mask = Mask::from_fn(r.rows, r.cols, |_, _| false);
    for row in 0..r.rows {
        for &c in r.row(row).0 {
            mask.set(row, c as usize, true);
        }
    }
    mask
}

/// Full `rows x logical_cols` product of prepared weights and a packed data
/// matrix, tile by tile on the calling thread.
pub fn gemm(weights: &KernelWeights, packed: &PackedMatrix, cfg: &KernelConfig) -> Result<(Matrix, TrafficCounters)> {
    if weights.tile_height() != cfg.t {
        return Err(Error::config(format!(
            "weights prepared for t={} but config has t={}",
            weights.tile_height(),
            cfg.t
        )));
    }
    if packed.vl != cfg.vl() || packed.rows != weights.cols() {
        return Err(Error::shape(format!(
            "packed matrix is {} rows at vl={}, kernel expects {} rows at vl={}",
            packed.rows,
            packed.vl,
            weights.cols(),
            cfg.vl()
        )));
    }
    let (t, vl) = (cfg.t, cfg.vl());
    let mut out = Matrix::zeros(weights.rows(), packed.logical_cols);
    let mut block = vec![0.0; t * vl];
    let mut total = TrafficCounters::default();
    for s in 0..packed.num_strips() {
        let live = packed.live_lanes(s);
        for tile in 0..weights.num_tiles() {
            block.fill(0.0);
            total += weights.run_tile(tile, packed.strip(s), cfg, &mut block)?;
            let r0 = tile * t;
            for i in 0..t.min(weights.rows() - r0) {
                let dst = (r0 + i) * out.cols + s * vl;
                out.data[dst..dst + live].copy_from_slice(&block[i * vl..i * vl + live]);
            }
        }
    }
    Ok((out, total))
}

/// Triple-loop product in f64, rounded once. Test oracle.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    Matrix::from_fn(a.rows, b.cols, |i, j| {
        (0..a.cols)
            .map(|k| a.get(i, k) as f64 * b.get(k, j) as f64)
            .sum::<f64>() as f32
    })
}
