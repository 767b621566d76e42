//! Flat binary tensor checkpoints.
//!
//! Layout: the magic `FLOWMC01`, then for every tensor the name length, the
//! UTF-8 name, the rank, each dimension (all `u64` little-endian) and the
//! row-major `f64` little-endian values.

use std::io::{Read, Write};

use crate::error::{FlowError, Result};

pub const MAGIC: &[u8; 8] = b"FLOWMC01";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data)
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    for t in tensors {
        w.write_all(&(t.name.len() as u64).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u64).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(FlowError::Format("truncated checkpoint".into()))
            };
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn expect_u64<R: Read>(r: &mut R) -> Result<u64> {
    read_u64(r)?.ok_or_else(|| FlowError::Format("truncated checkpoint".into()))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| FlowError::Format("missing checkpoint magic".into()))?;
    if &magic != MAGIC {
        return Err(FlowError::Format("bad checkpoint magic".into()));
    }
    let mut tensors = Vec::new();
    while let Some(name_len) = read_u64(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|_| FlowError::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| FlowError::Format("tensor name is not UTF-8".into()))?;
        let rank = expect_u64(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| expect_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| FlowError::Format(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    Ok(tensors)
}

pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| FlowError::Format(format!("checkpoint has no tensor {name}")))
}
