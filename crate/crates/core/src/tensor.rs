//! Dense single-precision grids and the `RDT1` binary tensor format.
//!
//! Layout of an `RDT1` file (all integers and floats little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "RDT1"
//! 4       4           rank (u32, 1..=3)
//! 8       4 * rank    dims (u32 each)
//! ...     4 * prod    payload (f32, row-major, last axis fastest)
//! ```
//!
//! Depth maps are rank 2 (H, W), feature maps and cost volumes rank 3
//! (C, H, W) / (D, H, W). The format does not distinguish them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RDT1";
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic: expected \"RDT1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("rank {0} out of range (expected 1..=3)")]
    BadRank(u32),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing data: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid shape {0:?}: need 1..=3 positive extents")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {expected} values, got {found}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected rank {expected}, got shape {shape:?}")]
    WrongRank { expected: usize, shape: Vec<usize> },
    #[error("empty grid")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TensorError {
    /// Stable short identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::BadMagic(_) => "bad-magic",
            TensorError::BadRank(_) => "bad-rank",
            TensorError::Truncated { .. } => "truncated",
            TensorError::TrailingBytes { .. } => "trailing-bytes",
            TensorError::NonFinite { .. } => "non-finite",
            TensorError::InvalidShape(_) => "invalid-shape",
            TensorError::LengthMismatch { .. } => "length-mismatch",
            TensorError::ShapeMismatch(..) => "shape-mismatch",
            TensorError::WrongRank { .. } => "wrong-rank",
            TensorError::Empty => "empty",
            TensorError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major `f32` tensor of rank 1 to 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    /// Builds an H×W grid from `f(y, x)`.
    pub fn from_fn2(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(vec![height, width], data)
    }

    /// Builds a C×H×W grid from `f(c, y, x)`.
    pub fn from_fn3(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(vec![channels, height, width], data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(H, W)` of a rank-2 grid.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(TensorError::WrongRank {
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// `(C, H, W)` of a rank-3 grid.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::WrongRank {
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Views a rank-2 grid as a single-channel rank-3 one; rank-3 passes through.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::WrongRank {
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.shape[1] + x]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn ensure_same_shape(&self, other: &Grid) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(self.shape.clone(), other.shape.clone()));
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid> {
        self.ensure_same_shape(other)?;
        Ok(Grid {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f32) -> Grid {
        self.map(|v| v * k)
    }

    /// Slice `i` along the leading axis of a rank-3 grid, as a rank-2 grid.
    pub fn slice(&self, i: usize) -> Result<Grid> {
        let (_, h, w) = self.dims3()?;
        let plane = h * w;
        Grid::new(vec![h, w], self.data[i * plane..(i + 1) * plane].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Min, max and mean, accumulated in `f64` in storage order.
pub fn elementwise_stats(grid: &Grid) -> Result<Stats> {
    let data = grid.data();
    if data.is_empty() {
        return Err(TensorError::Empty);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in data {
        let v = f64::from(v);
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    Ok(Stats {
        min,
        max,
        mean: sum / data.len() as f64,
    })
}

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * grid.rank() + 4 * grid.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(grid.rank() as u32).to_le_bytes());
    for &d in grid.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Grid> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(TensorError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    need(8)?;
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(TensorError::BadRank(rank));
    }
    let header = 8 + 4 * rank as usize;
    need(header)?;
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidShape(shape.clone()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| TensorError::InvalidShape(shape.clone()))?;
    need(expected)?;
    if bytes.len() > expected {
        return Err(TensorError::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = Grid::new(shape, data)?;
    grid.ensure_finite()?;
    Ok(grid)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Writes `grid` atomically (temp file in the same directory, then rename).
pub fn write_tensor(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, &encode(grid)).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_two_by_two() {
        let mut bytes = b"RDT1".to_vec();
        for v in [2u32, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [0.0f32, 1.0, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let g = decode(&bytes).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_42_is_sixteen_bytes() {
        let g = Grid::new(vec![1], vec![42.0]).unwrap();
        let bytes = encode(&g);
        assert_eq!(
            bytes,
            [b'R', b'D', b'T', b'1', 1, 0, 0, 0, 1, 0, 0, 0, 0x00, 0x00, 0x28, 0x42]
        );
    }

    #[test]
    fn each_violation_has_its_own_code() {
        let good = encode(&Grid::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap());

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&bad).unwrap_err().code(), "bad-magic");

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&4u32.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "bad-rank");
        bad[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "bad-rank");

        assert_eq!(decode(&good[..good.len() - 1]).unwrap_err().code(), "truncated");
        assert_eq!(decode(&good[..6]).unwrap_err().code(), "truncated");

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(decode(&bad).unwrap_err().code(), "trailing-bytes");

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "non-finite");
        bad[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "non-finite");

        let mut bad = good;
        bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode(&bad).unwrap_err().code(), "invalid-shape");
    }

    #[test]
    fn empty_shape_is_rejected() {
        assert_eq!(Grid::new(vec![], vec![]).unwrap_err().code(), "invalid-shape");
        assert_eq!(Grid::new(vec![0, 3], vec![]).unwrap_err().code(), "invalid-shape");
        assert_eq!(Grid::new(vec![1, 1, 1, 1], vec![0.0]).unwrap_err().code(), "invalid-shape");
        assert_eq!(Grid::new(vec![2, 2], vec![0.0; 3]).unwrap_err().code(), "length-mismatch");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.rdt");
        let g = Grid::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        write_tensor(&g, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), g);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_tensor("/nonexistent/dir/x.rdt").unwrap_err();
        assert_eq!(err.code(), "io");
    }

    #[test]
    fn stats_small_cases() {
        let g = Grid::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            elementwise_stats(&g).unwrap(),
            Stats {
                min: 1.0,
                max: 3.0,
                mean: 2.0
            }
        );
        let c = Grid::filled(vec![4, 5], -2.5).unwrap();
        let s = elementwise_stats(&c).unwrap();
        assert_eq!((s.min, s.max, s.mean), (-2.5, -2.5, -2.5));
    }

    #[test]
    fn stats_mean_matches_compensated_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..100).map(|_| rng.random_range(-50.0..50.0)).collect();
        let g = Grid::new(vec![100], data.clone()).unwrap();

        // Neumaier summation over the sorted values as an independent reference.
        let mut sorted: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
        sorted.sort_by(f64::total_cmp);
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in sorted {
            let t = sum + v;
            comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
            sum = t;
        }
        let reference = (sum + comp) / 100.0;
        let mean = elementwise_stats(&g).unwrap().mean;
        assert!(((mean - reference) / reference).abs() < 1e-12);
    }
}
