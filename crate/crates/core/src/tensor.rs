//! Patch-feature grids and the `.pft` file format.
//!
//! A [`FeatureTensor`] is an `H x W x C` grid stored row-major with the
//! channel index varying fastest, so the feature vector of each cell is one
//! contiguous slice. Score maps and masks reuse the same type with `C = 1`.
//!
//! File layout (little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 0-7   | magic `PROTOFT1`                |
//! | 8-11  | `u32` height                    |
//! | 12-15 | `u32` width                     |
//! | 16-19 | `u32` channels                  |
//! | 20-23 | `u32` dtype code (1 = `f32`)    |
//! | 24-   | `H*W*C` `f32` values            |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"PROTOFT1";
pub const DTYPE_F32: u32 = 1;
const HEADER_LEN: usize = 24;

/// Default norm below which a cell is treated as the zero vector.
pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    /// Builds a grid by evaluating `f(i, j, c)` at every index.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(f(i, j, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.data[(i * self.width + j) * self.channels + c]
    }

    /// Feature vector of cell `(i, j)`.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        self.row(i * self.width + j)
    }

    /// Feature vector of the cell with flat index `idx = i * W + j`.
    #[inline]
    pub fn row(&self, idx: usize) -> &[f32] {
        let start = idx * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(TENSOR_MAGIC);
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn header_dims(bytes: &[u8]) -> Result<(usize, usize, usize)> {
        if &bytes[0..8] != TENSOR_MAGIC {
            return Err(Error::format(0, "bad magic, expected PROTOFT1"));
        }
        let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let mut dims = [0usize; 3];
        for (k, (off, name)) in [(8, "height"), (12, "width"), (16, "channels")]
            .into_iter()
            .enumerate()
        {
            let v = word(off);
            if v == 0 {
                return Err(Error::format(off, format!("{name} must be positive")));
            }
            dims[k] = v as usize;
        }
        let dtype = word(20);
        if dtype != DTYPE_F32 {
            return Err(Error::format(20, format!("unsupported dtype code {dtype}")));
        }
        Ok((dims[0], dims[1], dims[2]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let (height, width, channels) = Self::header_dims(bytes)?;
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::format(8, "dimension product overflows"))?;
        let expected = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format(8, "dimension product overflows"))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::format(expected, "trailing bytes after payload"));
        }
        let mut data = Vec::with_capacity(count);
        for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(HEADER_LEN + 4 * k, "non-finite value"));
            }
            data.push(v);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }
}

pub fn write_tensor(t: &FeatureTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureTensor::from_bytes(&bytes)
}

/// Reads and validates only the header of a `.pft` file, returning
/// `(height, width, channels)`. The file length is checked against the
/// declared payload.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    use std::io::Read;

    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    if len < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: len,
        });
    }
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let probe = FeatureTensor::header_dims(&header)?;
    let expected = (probe.0 as u128 * probe.1 as u128 * probe.2 as u128 * 4 + HEADER_LEN as u128)
        .min(usize::MAX as u128) as usize;
    if len < expected {
        return Err(Error::Truncated {
            expected,
            actual: len,
        });
    }
    if len > expected {
        return Err(Error::format(expected, "trailing bytes after payload"));
    }
    Ok(probe)
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub tensor: FeatureTensor,
    /// Flat indices of cells whose input norm fell below epsilon; these are
    /// left as zero vectors.
    pub zero_cells: Vec<usize>,
}

impl Normalized {
    pub fn zero_count(&self) -> usize {
        self.zero_cells.len()
    }
}

/// Normalizes a single vector in place. Returns `false` (and zeroes the
/// vector) when its norm is below `epsilon`.
pub fn normalize_in_place(v: &mut [f32], epsilon: f64) -> bool {
    let norm = v
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm < epsilon {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x = ((*x as f64) / norm) as f32);
    true
}

pub fn l2_normalize(t: &FeatureTensor, epsilon: f64) -> Normalized {
    let mut data = t.data.clone();
    let mut zero_cells = Vec::new();
    for (idx, cell) in data.chunks_exact_mut(t.channels).enumerate() {
        if !normalize_in_place(cell, epsilon) {
            zero_cells.push(idx);
        }
    }
    Normalized {
        tensor: FeatureTensor { data, ..*t },
        zero_cells,
    }
}

/// Source sampling position for one output coordinate: the two neighbouring
/// source indices and the weight of the second.
#[inline]
fn source_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize with half-pixel-center alignment and border clamping.
pub fn bilinear_resize(t: &FeatureTensor, out_h: usize, out_w: usize) -> Result<FeatureTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == t.height && out_w == t.width {
        return Ok(t.clone());
    }
    let c = t.channels;
    let cols: Vec<_> = (0..out_w).map(|x| source_taps(x, t.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = source_taps(y, t.height, out_h);
        for &(x0, x1, fx) in &cols {
            let (a, b) = (t.cell(y0, x0), t.cell(y0, x1));
            let (d, e) = (t.cell(y1, x0), t.cell(y1, x1));
            for k in 0..c {
                let top = (1.0 - fx) * a[k] as f64 + fx * b[k] as f64;
                let bottom = (1.0 - fx) * d[k] as f64 + fx * e[k] as f64;
                data.push(((1.0 - fy) * top + fy * bottom) as f32);
            }
        }
    }
    FeatureTensor::new(out_h, out_w, c, data)
}

/// Nearest-neighbour resize using the same half-pixel alignment.
pub fn nearest_resize(t: &FeatureTensor, out_h: usize, out_w: usize) -> Result<FeatureTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let pick = |dst: usize, in_len: usize, out_len: usize| {
        (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let mut data = Vec::with_capacity(out_h * out_w * t.channels);
    for y in 0..out_h {
        let sy = pick(y, t.height, out_h);
        for x in 0..out_w {
            data.extend_from_slice(t.cell(sy, pick(x, t.width, out_w)));
        }
    }
    FeatureTensor::new(out_h, out_w, t.channels, data)
}

/// Feature maps of one image taken from several backbone stages.
#[derive(Debug, Clone)]
pub struct LevelSet {
    levels: Vec<FeatureTensor>,
}

impl LevelSet {
    pub fn new(levels: Vec<FeatureTensor>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Invalid("level set is empty".into()))?;
        let (h, w) = (first.height, first.width);
        for (idx, level) in levels.iter().enumerate().skip(1) {
            if level.height > h || level.width > w {
                return Err(Error::Shape(format!(
                    "level {idx} is {}x{}, larger than the first level {h}x{w}",
                    level.height, level.width
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureTensor] {
        &self.levels
    }

    pub fn target_resolution(&self) -> (usize, usize) {
        (self.levels[0].height, self.levels[0].width)
    }
}

/// Resizes every level to the first level's grid and concatenates channels
/// in level order.
pub fn aggregate_levels(ls: &LevelSet) -> Result<FeatureTensor> {
    let (h, w) = ls.target_resolution();
    let resized = ls
        .levels
        .iter()
        .map(|l| bilinear_resize(l, h, w))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = resized.iter().map(|l| l.channels).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for idx in 0..h * w {
        for level in &resized {
            data.extend_from_slice(level.row(idx));
        }
    }
    FeatureTensor::new(h, w, total, data)
}
