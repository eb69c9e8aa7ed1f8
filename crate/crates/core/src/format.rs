//! Binary tensor container shared by feature archives and checkpoints.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "SCVF"  u32 version=1  u32 layer_count  u32 c1  u32 h  u32 w
//! repeated layer_count times: u32 layer_index, c1·h·w × f32 (channel-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"SCVF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBlock {
    pub layer_index: u32,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub c1: u32,
    pub h: u32,
    pub w: u32,
    pub blocks: Vec<TensorBlock>,
}

impl TensorFile {
    pub fn block_len(&self) -> usize {
        self.c1 as usize * self.h as usize * self.w as usize
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.block_len();
        let mut out = Vec::with_capacity(24 + self.blocks.len() * (4 + 4 * n));
        out.extend_from_slice(TENSOR_MAGIC);
        for v in [FORMAT_VERSION, self.blocks.len() as u32, self.c1, self.h, self.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.blocks {
            if b.values.len() != n {
                return Err(Error::Format(format!(
                    "block for layer {} holds {} values, expected {n}",
                    b.layer_index,
                    b.values.len()
                )));
            }
            out.extend_from_slice(&b.layer_index.to_le_bytes());
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format("bad magic, expected SCVF".into()));
        }
        let version = read_u32(&mut bytes)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let layer_count = read_u32(&mut bytes)?;
        let c1 = read_u32(&mut bytes)?;
        let h = read_u32(&mut bytes)?;
        let w = read_u32(&mut bytes)?;
        let n = c1 as usize * h as usize * w as usize;
        let mut blocks = Vec::with_capacity(layer_count as usize);
        for _ in 0..layer_count {
            let layer_index = read_u32(&mut bytes)?;
            let mut raw = vec![0u8; 4 * n];
            read_exact(&mut bytes, &mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(TensorBlock { layer_index, values });
        }
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { c1, h, w, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Writes a matrix as a single-block file with `c1 = rows`, `h = 1`, `w = cols`.
pub fn write_matrix<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    TensorFile {
        c1: m.nrows() as u32,
        h: 1,
        w: m.ncols() as u32,
        blocks: vec![TensorBlock {
            layer_index: 0,
            values: m.iter().map(|v| v.as_f32()).collect(),
        }],
    }
    .write(path)
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let f = TensorFile::read(path)?;
    if f.blocks.len() != 1 || f.h != 1 {
        return Err(Error::Format(format!(
            "{}: expected one block with h = 1, found {} blocks and h = {}",
            path.display(),
            f.blocks.len(),
            f.h
        )));
    }
    let values: Vec<T> = f.blocks[0].values.iter().map(|&v| T::lit(v as f64)).collect();
    Ok(Array2::from_shape_vec((f.c1 as usize, f.w as usize), values).expect("block length checked"))
}

pub(crate) fn read_exact(src: &mut &[u8], dst: &mut [u8]) -> Result<()> {
    src.read_exact(dst)
        .map_err(|_| Error::Format("unexpected end of file".into()))
}

pub(crate) fn read_u32(src: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(src: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(src: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(src, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
