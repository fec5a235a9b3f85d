//! Dense f32 tensors, NHWC/CNHW layout conversion and the `CWNM` file format.
//!
//! A 4-D tensor always reports its extents in logical `[N, C, H, W]` order; the
//! layout tag only decides how those extents are linearized in `data`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"CWNM";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Nhwc,
    Cnhw,
    #[serde(rename = "rowmajor2d")]
    RowMajor2D,
}

impl Layout {
    pub fn tag(self) -> u8 {
        match self {
            Layout::Nhwc => 0,
            Layout::Cnhw => 1,
            Layout::RowMajor2D => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Layout::Nhwc),
            1 => Ok(Layout::Cnhw),
            2 => Ok(Layout::RowMajor2D),
            other => Err(Error::Layout(format!("unknown layout tag {other}"))),
        }
    }

    pub fn is_4d(self) -> bool {
        matches!(self, Layout::Nhwc | Layout::Cnhw)
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Nhwc => "NHWC",
            Layout::Cnhw => "CNHW",
            Layout::RowMajor2D => "RowMajor2D",
        })
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nhwc" => Ok(Layout::Nhwc),
            "cnhw" => Ok(Layout::Cnhw),
            "rowmajor2d" | "matrix" => Ok(Layout::RowMajor2D),
            _ => Err(Error::Layout(format!("unknown layout '{s}'"))),
        }
    }
}

/// Extents of a 4-D feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear offset of logical element `(n, c, h, w)` under `layout`.
    #[inline]
    pub fn offset(&self, layout: Layout, n: usize, c: usize, h: usize, w: usize) -> usize {
        match layout {
            Layout::Nhwc => ((n * self.h + h) * self.w + w) * self.c + c,
            Layout::Cnhw => ((c * self.n + n) * self.h + h) * self.w + w,
            Layout::RowMajor2D => panic!("RowMajor2D has no 4-D linearization"),
        }
    }

    fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    layout: Layout,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, layout: Layout, data: Vec<f32>) -> Result<Self> {
        match (layout, dims.len()) {
            (Layout::RowMajor2D, 2) | (Layout::Nhwc, 4) | (Layout::Cnhw, 4) => {}
            (layout, nd) => {
                return Err(Error::shape(format!(
                    "{layout} tensor needs {} dims, got {nd}",
                    if layout.is_4d() { 4 } else { 2 }
                )))
            }
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} hold {expected} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, layout, data })
    }

    pub fn zeros(dims: Vec<usize>, layout: Layout) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims, layout, vec![0.0; len])
    }

    /// Builds a 4-D tensor by evaluating `f(n, c, h, w)` at every logical index.
    pub fn from_fn4(dims: Dims4, layout: Layout, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Result<Self> {
        if !layout.is_4d() {
            return Err(Error::Layout(format!("{layout} is not a 4-D layout")));
        }
        let mut data = vec![0.0; dims.len()];
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data[dims.offset(layout, n, c, h, w)] = f(n, c, h, w);
                    }
                }
            }
        }
        Tensor::new(dims.to_vec(), layout, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<Dims4> {
        match self.dims[..] {
            [n, c, h, w] if self.layout.is_4d() => Ok(Dims4 { n, c, h, w }),
            _ => Err(Error::shape(format!(
                "expected a 4-D tensor, got {:?} ({})",
                self.dims, self.layout
            ))),
        }
    }

    /// Element at logical `(n, c, h, w)`. Panics on 2-D tensors or out-of-range indices.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let d = self.dims4().expect("4-D tensor");
        self.data[d.offset(self.layout, n, c, h, w)]
    }

    /// Re-linearizes a 4-D tensor into `target`. Values are moved, never recomputed.
    pub fn convert_layout(&self, target: Layout) -> Result<Tensor> {
        let dims = self.dims4()?;
        if !target.is_4d() {
            return Err(Error::Layout(format!("cannot convert a 4-D tensor to {target}")));
        }
        if target == self.layout {
            return Ok(self.clone());
        }
        let mut data = vec![0.0; self.data.len()];
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data[dims.offset(target, n, c, h, w)] = self.data[dims.offset(self.layout, n, c, h, w)];
                    }
                }
            }
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            layout: target,
            data,
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::format("too many dimensions"));
        }
        out.write_all(&TENSOR_MAGIC)?;
        out.write_all(&TENSOR_VERSION.to_le_bytes())?;
        out.write_all(&[DTYPE_F32, self.layout.tag(), self.dims.len() as u8, 0])?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        write_f32s(&mut out, &self.data)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected \"CWNM\"")));
        }
        let version = read_u32(&mut input, "version")?;
        if version != TENSOR_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let mut head = [0u8; 4];
        read_exact(&mut input, &mut head, "header")?;
        let [dtype, layout, ndims, _reserved] = head;
        if dtype != DTYPE_F32 {
            return Err(Error::format(format!("unsupported dtype {dtype}")));
        }
        let layout = Layout::from_tag(layout).map_err(|e| Error::format(e.to_string()))?;
        let mut dims = Vec::with_capacity(ndims as usize);
        for _ in 0..ndims {
            dims.push(read_u32(&mut input, "dims")? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dimension product overflows"))?;
        let data = read_f32s(&mut input, len)?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after payload"));
        }
        Tensor::new(dims, layout, data).map_err(|e| Error::format(e.to_string()))
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    t.write_to(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    Tensor::read_from(BufReader::new(File::open(path)?))
}

/// Row-major 2-D f32 matrix. Both the weight matrix and the GEMM data matrix use it.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor {
            dims: vec![self.rows, self.cols],
            layout: Layout::RowMajor2D,
            data: self.data,
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.layout != Layout::RowMajor2D {
            return Err(Error::Layout(format!("expected a RowMajor2D tensor, got {}", t.layout)));
        }
        Matrix::new(t.dims[0], t.dims[1], t.data)
    }

    /// Weight matrix from a `RowMajor2D` tensor, or from 4-D filters
    /// `[cout, cin, kh, kw]` flattened to `cout x (cin*kh*kw)`.
    pub fn from_weight_tensor(t: Tensor) -> Result<Self> {
        if t.layout == Layout::RowMajor2D {
            return Matrix::from_tensor(t);
        }
        let d = t.dims4()?;
        let cols = d.c * d.h * d.w;
        Ok(Matrix::from_fn(d.n, cols, |r, k| {
            t.at(r, k / (d.h * d.w), k / d.w % d.h, k % d.w)
        }))
    }
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(input: &mut R, len: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    read_exact(input, &mut bytes, "payload")?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub(crate) fn write_f32s<W: Write>(out: &mut W, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{seeded, uniform_tensor};

    #[test]
    fn nhwc_to_nhwc_is_identity() {
        let t = uniform_tensor(Dims4::new(2, 3, 4, 5), Layout::Nhwc, &mut seeded(1));
        assert_eq!(t.convert_layout(Layout::Nhwc).unwrap(), t);
    }

    #[test]
    fn single_element_tensor() {
        let t = Tensor::new(vec![1, 1, 1, 1], Layout::Nhwc, vec![7.5]).unwrap();
        for target in [Layout::Nhwc, Layout::Cnhw] {
            let c = t.convert_layout(target).unwrap();
            assert_eq!(c.layout(), target);
            assert_eq!(c.data(), &[7.5]);
        }
    }

    #[test]
    fn round_trip_preserves_every_logical_index() {
        let dims = Dims4::new(2, 3, 4, 5);
        let t = uniform_tensor(dims, Layout::Nhwc, &mut seeded(7));
        let cnhw = t.convert_layout(Layout::Cnhw).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        assert_eq!(t.at(n, c, h, w).to_bits(), cnhw.at(n, c, h, w).to_bits());
                    }
                }
            }
        }
        let back = cnhw.convert_layout(Layout::Nhwc).unwrap();
        assert_eq!(back.data().len(), 120);
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn offsets_are_bijective() {
        let dims = Dims4::new(2, 3, 2, 4);
        for layout in [Layout::Nhwc, Layout::Cnhw] {
            let mut seen = vec![false; dims.len()];
            for n in 0..dims.n {
                for c in 0..dims.c {
                    for h in 0..dims.h {
                        for w in 0..dims.w {
                            let o = dims.offset(layout, n, c, h, w);
                            assert!(!seen[o]);
                            seen[o] = true;
                        }
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn convert_rejects_matrices_and_2d_targets() {
        let m = Matrix::zeros(2, 2).into_tensor();
        assert!(matches!(m.convert_layout(Layout::Cnhw), Err(Error::Shape(_))));
        let t = Tensor::zeros(vec![1, 1, 1, 1], Layout::Nhwc).unwrap();
        assert!(matches!(t.convert_layout(Layout::RowMajor2D), Err(Error::Layout(_))));
    }

    #[test]
    fn file_round_trip_zero_tensor() {
        let t = Tensor::zeros(vec![1, 1, 1, 1], Layout::Nhwc).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 16 + 4);
        assert_eq!(Tensor::read_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], Layout::RowMajor2D, vec![1.0, -0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let expected: Vec<u8> = [
            &b"CWNM"[..],
            &1u32.to_le_bytes(),
            &[0, 2, 2, 0],
            &1u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &1.0f32.to_le_bytes(),
            &(-0.0f32).to_le_bytes(),
        ]
        .concat();
        assert_eq!(buf, expected);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let t = Tensor::zeros(vec![1, 1, 1, 1], Layout::Cnhw).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(Tensor::read_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let t = Tensor::zeros(vec![1, 2, 1, 1], Layout::Cnhw).unwrap();
        let mut good = Vec::new();
        t.write_to(&mut good).unwrap();

        let mut version = good.clone();
        version[4] = 2;
        let mut dtype = good.clone();
        dtype[8] = 1;
        let mut layout = good.clone();
        layout[9] = 9;
        let mut ndims = good.clone();
        ndims[10] = 2;
        let truncated = &good[..good.len() - 1];
        let mut trailing = good.clone();
        trailing.push(0);

        for bad in [&version[..], &dtype, &layout, &ndims, truncated, &trailing] {
            assert!(matches!(Tensor::read_from(bad), Err(Error::Format(_))));
        }
    }

    #[test]
    fn file_round_trip_on_disk() {
        let dir = std::env::temp_dir().join(format!("cwnm-tensor-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.cwnm");
        let t = uniform_tensor(Dims4::new(4, 8, 7, 7), Layout::Cnhw, &mut seeded(3));
        write_tensor(&t, &path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let back = read_tensor(&path).unwrap();
        let mut bytes_b = Vec::new();
        back.write_to(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        std::fs::remove_dir_all(&dir).ok();
    }
}
