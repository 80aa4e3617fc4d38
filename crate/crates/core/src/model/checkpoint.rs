//! Self-describing checkpoint container.
//!
//! Layout: magic, format version, JSON-encoded model configuration, the
//! named parameter tensors in canonical order, and a SHA-256 checksum over
//! everything that precedes it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{ModelConfig, ParameterSet, TensorView};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParameterSet) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut w = HashingWriter {
        inner: file,
        hasher: Sha256::new(),
    };
    w.write(MAGIC)?;
    w.write(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(config)?;
    w.write(&(header.len() as u32).to_le_bytes())?;
    w.write(&header)?;

    let mut tensors: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
    params.visit(&mut |name, view| {
        let (shape, data): (Vec<u64>, Vec<f64>) = match view {
            TensorView::V(a) => (vec![a.len() as u64], a.iter().copied().collect()),
            TensorView::M(a) => (
                vec![a.nrows() as u64, a.ncols() as u64],
                a.iter().copied().collect(),
            ),
        };
        tensors.push((name, shape, data));
    });
    w.write(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        w.write(&(name.len() as u32).to_le_bytes())?;
        w.write(name.as_bytes())?;
        w.write(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write(&d.to_le_bytes())?;
        }
        for v in data {
            w.write(&v.to_le_bytes())?;
        }
    }
    let digest = w.hasher.finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf)?;
        self.hasher.update(&buf[..]);
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParameterSet)> {
    let file = BufReader::new(File::open(path)?);
    let mut r = HashingReader {
        inner: file,
        hasher: Sha256::new(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let header_len = r.read_u32()? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let config: ModelConfig = serde_json::from_slice(&header)?;
    config.validate().map_err(|e| Error::Checkpoint(format!("{e}")))?;

    let n_tensors = r.read_u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.read_u32()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = r.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.read_f64()?);
        }
        tensors.push((name, shape, data));
    }
    let computed = r.hasher.finalize();
    let mut stored = [0u8; 32];
    r.inner.read_exact(&mut stored)?;
    if computed.as_slice() != stored {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }

    // expected names and shapes come from a zeroed parameter set
    let mut params = ParameterSet::zeros(&config);
    let mut expected: Vec<String> = Vec::new();
    params.visit(&mut |name, _| expected.push(name));
    if expected.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} tensors, found {}",
            path.display(),
            expected.len(),
            tensors.len()
        )));
    }
    for (slot, (name, shape, data)) in expected.iter().zip(&tensors) {
        if slot != name {
            return Err(Error::Checkpoint(format!(
                "{}: tensor order mismatch: expected {slot}, found {name}",
                path.display()
            )));
        }
        let _ = shape;
        let _ = data;
    }
    // fill in canonical order; shapes must match the config-derived ones
    {
        let slices = params.flat_slices_mut();
        let mut it = tensors.iter();
        for slice in slices {
            let (name, _shape, data) = it.next().expect("counts checked");
            if data.len() != slice.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor {name} has {} values, expected {}",
                    path.display(),
                    data.len(),
                    slice.len()
                )));
            }
            slice.copy_from_slice(data);
        }
    }
    // shape sanity for matrices
    let mut idx = 0;
    let mut shape_err = None;
    params.visit(&mut |name, view| {
        let want: Vec<usize> = match view {
            TensorView::V(a) => vec![a.len()],
            TensorView::M(a) => vec![a.nrows(), a.ncols()],
        };
        if tensors[idx].1 != want && shape_err.is_none() {
            shape_err = Some(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                tensors[idx].1, want
            ));
        }
        idx += 1;
    });
    if let Some(e) = shape_err {
        return Err(Error::Checkpoint(format!("{}: {e}", path.display())));
    }
    Ok((config, params))
}
