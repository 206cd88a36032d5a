//! `ARTT` binary tensor files.
//!
//! Layout: magic `ARTT`, version `u32 = 1`, dtype `u8` (0 = f32, 1 = f64),
//! rank `u32`, `rank` dims as `u32`, then the row-major little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{ArtError, Result};

pub const MAGIC: &[u8; 4] = b"ARTT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code()])?;
    let rank = u32::try_from(t.rank()).map_err(|_| ArtError::Format("rank overflow".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| ArtError::Format("dim overflow".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        Dtype::F64 => {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for x in t.data() {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Tensor, Dtype)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ArtError::Format(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(ArtError::Format(format!("unsupported version {}", version)));
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = match code[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return Err(ArtError::Format(format!("unknown dtype code {}", c))),
    };
    let rank = read_u32(r)? as usize;
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        Dtype::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ArtError::Format("trailing bytes after payload".into()));
    }
    let t = Tensor::new(dims, data).map_err(|e| ArtError::Format(e.to_string()))?;
    Ok((t, dtype))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r).map(|(t, _)| t)
}
