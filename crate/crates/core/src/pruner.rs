//! N:M mask selection (row-wise and tile-level column-wise) and the compressed
//! column-wise weight format.
//!
//! Weight matrices are `rows = output channels` by `cols = Cin*Kh*Kw`, with the
//! column order matching the data-matrix rows produced by [`crate::packer`].
//! Within each group of `m` consecutive columns the `n` units with the largest
//! L1 norm survive. Equal norms keep the lower column index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_f32s, read_u32, write_f32s, Matrix};

pub const SPARSE_MAGIC: [u8; 4] = *b"CWSW";
pub const SPARSE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    #[serde(rename = "row")]
    RowWise,
    #[serde(rename = "column")]
    ColumnWise,
}

impl std::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "rowwise" | "row-wise" => Ok(PruneMode::RowWise),
            "column" | "col" | "columnwise" | "column-wise" => Ok(PruneMode::ColumnWise),
            _ => Err(Error::prune(format!("unknown pruning mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub n: usize,
    pub m: usize,
    pub tile_t: usize,
    pub mode: PruneMode,
    pub sparsity_ratio: f64,
}

impl PruneSpec {
    pub fn new(n: usize, m: usize, tile_t: usize, mode: PruneMode) -> Result<Self> {
        check_nm(n, m)?;
        if tile_t == 0 {
            return Err(Error::prune("tile height must be at least 1"));
        }
        Ok(PruneSpec {
            n,
            m,
            tile_t,
            mode,
            sparsity_ratio: 1.0 - n as f64 / m as f64,
        })
    }

    /// `n = round((1 - ratio) * m)`.
    pub fn from_ratio(ratio: f64, m: usize, tile_t: usize, mode: PruneMode) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::prune(format!("sparsity ratio {ratio} outside [0, 1)")));
        }
        let n = kept_for_ratio(ratio, m);
        let mut spec = PruneSpec::new(n, m, tile_t, mode)?;
        spec.sparsity_ratio = ratio;
        Ok(spec)
    }

    pub fn select(&self, w: &Matrix) -> Result<Mask> {
        match self.mode {
            PruneMode::RowWise => select_mask_rowwise(w, self.n, self.m),
            PruneMode::ColumnWise => select_mask_columnwise(w, self.n, self.m, self.tile_t),
        }
    }
}

/// Kept units per full group for a sparsity ratio.
pub fn kept_for_ratio(ratio: f64, m: usize) -> usize {
    ((1.0 - ratio) * m as f64).round() as usize
}

/// Units kept in a group of `width` columns. A trailing group narrower than
/// `m` keeps `round(n*width/m)`, at least one.
pub fn group_keep(n: usize, m: usize, width: usize) -> usize {
    if width >= m {
        return n;
    }
    if width == 0 || n == 0 {
        return 0;
    }
    // round-half-up of n*width/m in integers
    let k = (2 * n * width + m) / (2 * m);
    k.clamp(1, width)
}

fn check_nm(n: usize, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::prune("group size m must be at least 1"));
    }
    if n == 0 || n > m {
        return Err(Error::prune(format!("need 1 <= n <= m, got n={n}, m={m}")));
    }
    Ok(())
}

/// Keep/drop flags over a `rows x cols` weight matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    /// Pattern the mask was selected with; `n == m` for hand-built masks.
    pub n: usize,
    pub m: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            n: cols.max(1),
            m: cols.max(1),
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut keep = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                keep.push(f(r, c));
            }
        }
        Mask {
            rows,
            cols,
            n: cols.max(1),
            m: cols.max(1),
            keep,
        }
    }

    /// Mask of the nonzero entries of `w`.
    pub fn nonzero(w: &Matrix) -> Self {
        Mask::from_fn(w.rows, w.cols, |r, c| w.get(r, c) != 0.0)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.keep[r * self.cols + c] = keep;
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_in_row(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.get(r, c)).collect()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        1.0 - self.kept() as f64 / self.keep.len() as f64
    }

    /// True when every column segment of every `tile_t`-row tile is all-kept or all-pruned.
    pub fn is_column_consistent(&self, tile_t: usize) -> bool {
        tile_t > 0
            && (0..self.rows).step_by(tile_t).all(|r0| {
                let r1 = (r0 + tile_t).min(self.rows);
                (0..self.cols).all(|c| (r0 + 1..r1).all(|r| self.get(r, c) == self.get(r0, c)))
            })
    }

    pub fn apply(&self, w: &Matrix) -> Result<Matrix> {
        apply_mask(w, self)
    }
}

pub fn apply_mask(w: &Matrix, mask: &Mask) -> Result<Matrix> {
    if (w.rows, w.cols) != (mask.rows, mask.cols) {
        return Err(Error::shape(format!(
            "mask is {}x{} but weights are {}x{}",
            mask.rows, mask.cols, w.rows, w.cols
        )));
    }
    let data = w
        .data
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Matrix::new(w.rows, w.cols, data)
}

/// Indices of the `k` largest scores, ascending. Ties keep the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: equal scores stay in index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Column windows `[start, end)` of width `m` covering `cols`.
fn groups(cols: usize, m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..cols).step_by(m).map(move |s| (s, (s + m).min(cols)))
}

/// Classic N:M: per row, per group of `m` consecutive weights, keep the `n`
/// largest magnitudes.
pub fn select_mask_rowwise(w: &Matrix, n: usize, m: usize) -> Result<Mask> {
    check_nm(n, m)?;
    let mut mask = Mask {
        rows: w.rows,
        cols: w.cols,
        n,
        m,
        keep: vec![false; w.rows * w.cols],
    };
    for r in 0..w.rows {
        let row = w.row(r);
        for (start, end) in groups(w.cols, m) {
            let scores: Vec<f64> = row[start..end].iter().map(|v| v.abs() as f64).collect();
            for j in top_k(&scores, group_keep(n, m, end - start)) {
                mask.set(r, start + j, true);
            }
        }
    }
    Ok(mask)
}

/// Tile-level column-wise N:M: within each `tile_t`-row tile, each column
/// segment is one unit scored by its L1 norm over the tile's existing rows.
pub fn select_mask_columnwise(w: &Matrix, n: usize, m: usize, tile_t: usize) -> Result<Mask> {
    check_nm(n, m)?;
    if tile_t == 0 {
        return Err(Error::prune("tile height must be at least 1"));
    }
    let mut mask = Mask {
        rows: w.rows,
        cols: w.cols,
        n,
        m,
        keep: vec![false; w.rows * w.cols],
    };
    let mut norms = vec![0.0f64; w.cols];
    for r0 in (0..w.rows).step_by(tile_t) {
        let r1 = (r0 + tile_t).min(w.rows);
        norms.iter_mut().for_each(|v| *v = 0.0);
        for r in r0..r1 {
            for (acc, v) in norms.iter_mut().zip(w.row(r)) {
                *acc += v.abs() as f64;
            }
        }
        for (start, end) in groups(w.cols, m) {
            for j in top_k(&norms[start..end], group_keep(n, m, end - start)) {
                for r in r0..r1 {
                    mask.set(r, start + j, true);
                }
            }
        }
    }
    Ok(mask)
}

/// One row-tile of a [`SparseWeight`]: kept column positions and their
/// `tile_t`-tall value blocks, column after column.
#[derive(Clone, Copy, Debug)]
pub struct SparseTile<'a> {
    pub tile_t: usize,
    pub col_index: &'a [u32],
    pub values: &'a [f32],
}

impl<'a> SparseTile<'a> {
    pub fn kept(&self) -> usize {
        self.col_index.len()
    }

    /// Values of the `j`-th kept column, one per tile row.
    #[inline]
    pub fn column(&self, j: usize) -> &'a [f32] {
        &self.values[j * self.tile_t..(j + 1) * self.tile_t]
    }
}

/// Column-wise N:M compressed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeight {
    pub rows: usize,
    pub cols: usize,
    pub tile_t: usize,
    pub n: usize,
    pub m: usize,
    /// `tile_ptr[i]..tile_ptr[i + 1]` indexes tile `i`'s entries of `col_index`.
    tile_ptr: Vec<usize>,
    col_index: Vec<u32>,
    values: Vec<f32>,
}

impl SparseWeight {
    /// Packs the kept column segments of `w`. Rows past the end of the last
    /// tile are stored as zeros so every block is `tile_t` tall.
    pub fn compress(w: &Matrix, mask: &Mask, tile_t: usize) -> Result<Self> {
        if tile_t == 0 {
            return Err(Error::prune("tile height must be at least 1"));
        }
        if (w.rows, w.cols) != (mask.rows, mask.cols) {
            return Err(Error::shape(format!(
                "mask is {}x{} but weights are {}x{}",
                mask.rows, mask.cols, w.rows, w.cols
            )));
        }
        if !mask.is_column_consistent(tile_t) {
            return Err(Error::prune(format!(
                "mask is not column-consistent for tile height {tile_t}"
            )));
        }
        let mut tile_ptr = vec![0];
        let mut col_index = Vec::new();
        let mut values = Vec::new();
        for r0 in (0..w.rows).step_by(tile_t) {
            let r1 = (r0 + tile_t).min(w.rows);
            for c in (0..w.cols).filter(|&c| mask.get(r0, c)) {
                col_index.push(c as u32);
                values.extend((r0..r1).map(|r| w.get(r, c)));
                values.extend(std::iter::repeat_n(0.0, tile_t - (r1 - r0)));
            }
            tile_ptr.push(col_index.len());
        }
        Ok(SparseWeight {
            rows: w.rows,
            cols: w.cols,
            tile_t,
            n: mask.n,
            m: mask.m,
            tile_ptr,
            col_index,
            values,
        })
    }

    /// Prunes `w` with `spec` and compresses the result at the spec's tile height.
    pub fn prune(w: &Matrix, spec: &PruneSpec) -> Result<Self> {
        let mask = select_mask_columnwise(w, spec.n, spec.m, spec.tile_t)?;
        SparseWeight::compress(w, &mask, spec.tile_t)
    }

    /// Keeps every column: the `n == m` case.
    pub fn dense(w: &Matrix, tile_t: usize) -> Result<Self> {
        SparseWeight::compress(w, &Mask::full(w.rows, w.cols), tile_t)
    }

    pub fn num_tiles(&self) -> usize {
        self.tile_ptr.len() - 1
    }

    pub fn tile(&self, i: usize) -> SparseTile<'_> {
        let (a, b) = (self.tile_ptr[i], self.tile_ptr[i + 1]);
        SparseTile {
            tile_t: self.tile_t,
            col_index: &self.col_index[a..b],
            values: &self.values[a * self.tile_t..b * self.tile_t],
        }
    }

    pub fn tiles(&self) -> impl Iterator<Item = SparseTile<'_>> {
        (0..self.num_tiles()).map(|i| self.tile(i))
    }

    pub fn col_index(&self) -> &[u32] {
        &self.col_index
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Kept columns summed over all tiles.
    pub fn kept_columns_total(&self) -> usize {
        self.col_index.len()
    }

    /// Fraction of real (unpadded) weights that were pruned.
    pub fn sparsity(&self) -> f64 {
        let total = self.rows * self.cols;
        if total == 0 {
            return 0.0;
        }
        let kept: usize = (0..self.num_tiles())
            .map(|i| self.tile(i).kept() * self.rows_in_tile(i))
            .sum();
        1.0 - kept as f64 / total as f64
    }

    pub fn rows_in_tile(&self, i: usize) -> usize {
        (self.rows - i * self.tile_t).min(self.tile_t)
    }

    /// Kept counts per tile, per group of `m` columns.
    pub fn group_kept_counts(&self) -> Vec<Vec<usize>> {
        self.tiles()
            .map(|tile| {
                groups(self.cols, self.m)
                    .map(|(s, e)| {
                        tile.col_index
                            .iter()
                            .filter(|&&c| (s..e).contains(&(c as usize)))
                            .count()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn mask(&self) -> Mask {
        let mut mask = Mask {
            rows: self.rows,
            cols: self.cols,
            n: self.n,
            m: self.m,
            keep: vec![false; self.rows * self.cols],
        };
        for (i, tile) in self.tiles().enumerate() {
            let r0 = i * self.tile_t;
            for &c in tile.col_index {
                for r in r0..r0 + self.rows_in_tile(i) {
                    mask.set(r, c as usize, true);
                }
            }
        }
        mask
    }

    pub fn decompress(&self) -> Matrix {
        let mut w = Matrix::zeros(self.rows, self.cols);
        for (i, tile) in self.tiles().enumerate() {
            let r0 = i * self.tile_t;
            for (j, &c) in tile.col_index.iter().enumerate() {
                let column = tile.column(j);
                for (dr, &v) in column.iter().enumerate().take(self.rows_in_tile(i)) {
                    w.set(r0 + dr, c as usize, v);
                }
            }
        }
        w
    }

    /// Structural invariants: tile count, strictly increasing in-range
    /// indices, value length and zeroed padding rows.
    pub fn validate(&self) -> Result<()> {
        if self.tile_t == 0 {
            return Err(Error::format("tile height is zero"));
        }
        if self.num_tiles() != self.rows.div_ceil(self.tile_t) {
            return Err(Error::format(format!(
                "{} tiles for {} rows at tile height {}",
                self.num_tiles(),
                self.rows,
                self.tile_t
            )));
        }
        if self.values.len() != self.col_index.len() * self.tile_t {
            return Err(Error::format("value length does not match kept columns"));
        }
        for i in 0..self.num_tiles() {
            let tile = self.tile(i);
            if tile.col_index.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::format(format!("tile {i} indices not strictly increasing")));
            }
            if tile.col_index.iter().any(|&c| c as usize >= self.cols) {
                return Err(Error::format(format!("tile {i} index out of range")));
            }
            let live = self.rows_in_tile(i);
            for j in 0..tile.kept() {
                if tile.column(j)[live..].iter().any(|&v| v != 0.0) {
                    return Err(Error::format(format!("tile {i} has nonzero padding rows")));
                }
            }
        }
        Ok(())
    }

    /// Every full group keeps exactly `n` columns; a trailing partial group keeps
    /// [`group_keep`] columns.
    pub fn check_nm(&self) -> Result<()> {
        for (i, counts) in self.group_kept_counts().iter().enumerate() {
            for ((s, e), &count) in groups(self.cols, self.m).zip(counts) {
                let want = group_keep(self.n, self.m, e - s);
                if count != want {
                    return Err(Error::prune(format!(
                        "tile {i}, columns {s}..{e}: {count} kept, expected {want}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&SPARSE_MAGIC)?;
        for v in [
            SPARSE_VERSION as usize,
            self.rows,
            self.cols,
            self.tile_t,
            self.n,
            self.m,
        ] {
            let v = u32::try_from(v).map_err(|_| Error::format("header field exceeds u32"))?;
            out.write_all(&v.to_le_bytes())?;
        }
        for tile in self.tiles() {
            out.write_all(&(tile.kept() as u32).to_le_bytes())?;
            for &c in tile.col_index {
                out.write_all(&c.to_le_bytes())?;
            }
            write_f32s(&mut out, tile.values)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if magic != SPARSE_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected \"CWSW\"")));
        }
        let version = read_u32(&mut input, "version")?;
        if version != SPARSE_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = read_u32(&mut input, "header")? as usize;
        }
        let [rows, cols, tile_t, n, m] = header;
        if tile_t == 0 {
            return Err(Error::format("tile height is zero"));
        }
        let mut tile_ptr = vec![0];
        let mut col_index = Vec::new();
        let mut values = Vec::new();
        for _ in 0..rows.div_ceil(tile_t) {
            let kept = read_u32(&mut input, "tile header")? as usize;
            if kept > cols {
                return Err(Error::format(format!("{kept} kept columns but only {cols} columns")));
            }
            for _ in 0..kept {
                col_index.push(read_u32(&mut input, "indices")?);
            }
            values.extend(read_f32s(&mut input, kept * tile_t)?);
            tile_ptr.push(col_index.len());
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after last tile"));
        }
        let sw = SparseWeight {
            rows,
            cols,
            tile_t,
            n,
            m,
            tile_ptr,
            col_index,
            values,
        };
        sw.validate()?;
        Ok(sw)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        SparseWeight::read_from(BufReader::new(File::open(path)?))
    }
}

/// Row-wise compressed weights (CSR): kept positions of each row with values.
/// Used by the conventional N:M kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSparseWeight {
    pub rows: usize,
    pub cols: usize,
    row_ptr: Vec<usize>,
    col_index: Vec<u32>,
    values: Vec<f32>,
}

impl RowSparseWeight {
    pub fn compress(w: &Matrix, mask: &Mask) -> Result<Self> {
        if (w.rows, w.cols) != (mask.rows, mask.cols) {
            return Err(Error::shape(format!(
                "mask is {}x{} but weights are {}x{}",
                mask.rows, mask.cols, w.rows, w.cols
            )));
        }
        let mut row_ptr = vec![0];
        let mut col_index = Vec::new();
        let mut values = Vec::new();
        for r in 0..w.rows {
            for c in (0..w.cols).filter(|&c| mask.get(r, c)) {
                col_index.push(c as u32);
                values.push(w.get(r, c));
            }
            row_ptr.push(col_index.len());
        }
        Ok(RowSparseWeight {
            rows: w.rows,
            cols: w.cols,
            row_ptr,
            col_index,
            values,
        })
    }

    /// Same kept positions as a column-wise weight, stored row by row.
    pub fn from_columnwise(sw: &SparseWeight) -> Self {
        RowSparseWeight::compress(&sw.decompress(), &sw.mask()).expect("shapes agree")
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_index[a..b], &self.values[a..b])
    }

    pub fn nnz(&self) -> usize {
        self.col_index.len()
    }

    pub fn decompress(&self) -> Matrix {
        let mut w = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                w.set(r, c as usize, v);
            }
        }
        w
    }
}
