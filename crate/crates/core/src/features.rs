//! The frames-by-dim feature matrix and its on-disk format.
//!
//! Features stand in for spectrogram frames. In memory they are f64 (the
//! training path is 64-bit); on disk they are little-endian f32 with a
//! small self-describing header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FSEQ";
const VERSION: u32 = 1;

/// A `frames x dim` matrix of per-frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(pub Array2<f64>);

impl FeatureSequence {
    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self(Array2::zeros((frames, dim)))
    }

    pub fn n_frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n_frames() == 0
    }

    /// Rows `[start, end)` as a new sequence.
    pub fn slice_frames(&self, start: usize, end: usize) -> Self {
        Self(self.0.slice(ndarray::s![start..end, ..]).to_owned())
    }

    /// Stack `self` on top of `other`.
    pub fn concat(&self, other: &FeatureSequence) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        let stacked = ndarray::concatenate(ndarray::Axis(0), &[self.0.view(), other.0.view()])
            .expect("dims checked above");
        Ok(Self(stacked))
    }

    pub fn max_abs_diff(&self, other: &FeatureSequence) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.n_frames() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.0.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::CorpusFormat(format!(
                "{}: bad feature-file magic",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::CorpusFormat(format!(
                "{}: unsupported feature-file version {version}",
                path.display()
            )));
        }
        let frames = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(frames * dim);
        let mut buf = [0u8; 4];
        for _ in 0..frames * dim {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        let arr = Array2::from_shape_vec((frames, dim), data)
            .map_err(|e| Error::CorpusFormat(format!("{}: {e}", path.display())))?;
        Ok(Self(arr))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
