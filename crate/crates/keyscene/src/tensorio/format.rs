//! Dense feature tensors and the `CMDT` binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CMDT" | version u8 | dtype u8 | rank u32 | shape rank*u32 | payload f32*
//! ```
//!
//! Version 1 stores `f32` payloads only (dtype code 1). In memory values are
//! held as `f64` so downstream numerics (gradient checks in particular) run at
//! full double precision; writing rounds to `f32`, so a tensor round-trips
//! bit-exactly exactly when its values are `f32`-representable, which holds
//! for everything this crate generates.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

const MAGIC: [u8; 4] = *b"CMDT";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

/// Dense row-major tensor. Dimensions are all >= 1 and the flat data length
/// always equals the shape product.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    ///
    /// Panics if the shape product does not match the data length or any
    /// dimension is zero; both are programmer errors, parsed input goes
    /// through [`tensor_from_bytes`] which reports them as format errors.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dimension in {shape:?}");
        let expect: usize = shape.iter().product();
        assert_eq!(expect, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Shape `[1]` tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "no rows");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} tensor"),
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Rounds every value to the nearest `f32`, the precision the on-disk
    /// format stores. Generators apply this so in-memory data equals what a
    /// reader of the written file sees.
    pub fn round_to_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }
}

/// Why a `CMDT` read or write failed.
#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    BadMagic { found: [u8; 4] },
    UnsupportedVersion { found: u8 },
    UnsupportedDtype { found: u8 },
    /// The byte stream ended inside the named field.
    Truncated { field: &'static str },
    ZeroDimension { axis: usize },
    TooLarge { rank: u32, elements: u64 },
    /// Header shape and payload length disagree (short or trailing bytes).
    PayloadMismatch { expected: u64, found: u64 },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "i/o error: {e}"),
            FormatError::BadMagic { found } => {
                write!(f, "bad magic {:?}, expected \"CMDT\"", String::from_utf8_lossy(found))
            }
            FormatError::UnsupportedVersion { found } => {
                write!(f, "unsupported container version {found}, expected {VERSION}")
            }
            FormatError::UnsupportedDtype { found } => {
                write!(f, "unsupported dtype code {found}, expected {DTYPE_F32} (f32)")
            }
            FormatError::Truncated { field } => write!(f, "file truncated inside {field}"),
            FormatError::ZeroDimension { axis } => write!(f, "zero-sized dimension at axis {axis}"),
            FormatError::TooLarge { rank, elements } => {
                write!(f, "implausible header: rank {rank}, {elements} elements")
            }
            FormatError::PayloadMismatch { expected, found } => {
                write!(f, "header implies {expected} payload values but file holds {found}")
            }
        }
    }
}

impl std::error::Error for FormatError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            FormatError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

/// Serializes a tensor to `CMDT` bytes.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses `CMDT` bytes into a tensor.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, field: &'static str| -> Result<&[u8], FormatError> {
        if bytes.len() < *pos + n {
            return Err(FormatError::Truncated { field });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(FormatError::BadMagic { found });
    }
    let version = take(&mut pos, 1, "version")?[0];
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let dtype = take(&mut pos, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype { found: dtype });
    }
    let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(FormatError::TooLarge { rank, elements: 0 });
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut elements: u64 = 1;
    for axis in 0..rank {
        let d = u32::from_le_bytes(take(&mut pos, 4, "shape")?.try_into().unwrap());
        if d == 0 {
            return Err(FormatError::ZeroDimension { axis: axis as usize });
        }
        elements = elements.saturating_mul(d as u64);
        shape.push(d as usize);
    }
    if elements > MAX_ELEMENTS {
        return Err(FormatError::TooLarge { rank, elements });
    }

    let payload = &bytes[pos..];
    if payload.len() % 4 != 0 {
        return Err(FormatError::Truncated { field: "payload" });
    }
    let found = (payload.len() / 4) as u64;
    if found != elements {
        return Err(FormatError::PayloadMismatch { expected: elements, found });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::new(shape, data))
}

/// Writes `t` to `path` in the `CMDT` container format.
pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), FormatError> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

/// Reads a `CMDT` file.
pub fn read_tensor(path: &Path) -> Result<Tensor, FormatError> {
    tensor_from_bytes(&fs::read(path)?)
}
