//! `MTE1` array container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"MTE1" | ndim: u32 | dims: [u64; ndim] | payload: [f64; prod(dims)]
//! ```
//!
//! The payload uses the same lexicographic order as [`Tensor3`] and row-major
//! [`Matrix`] storage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Tensor3};

pub const MAGIC: &[u8; 4] = b"MTE1";

/// Upper bound on `ndim` accepted when reading, to reject garbage headers early.
const MAX_NDIM: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r, c, self.data),
            _ => Err(Error::Format(format!("expected 2-d array, got dims {:?}", self.dims))),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor3> {
        match self.dims[..] {
            [a, b, c] => Tensor3::from_vec([a, b, c], self.data),
            _ => Err(Error::Format(format!("expected 3-d array, got dims {:?}", self.dims))),
        }
    }
}

impl From<&Matrix> for Array {
    fn from(m: &Matrix) -> Self {
        Array {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

impl From<&Tensor3> for Array {
    fn from(t: &Tensor3) -> Self {
        Array {
            dims: t.dims().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn write_array<W: Write>(mut w: W, array: &Array) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(array.dims.len() as u32).to_le_bytes())?;
    for d in &array.dims {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in &array.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array<R: Read>(mut r: R) -> Result<Array> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4);
    if ndim > MAX_NDIM {
        return Err(Error::Format(format!("ndim {ndim} too large")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut b8)?;
        dims.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("dim overflow".into()))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != n * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            payload.len(),
            n * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array { dims, data })
}

pub fn save(path: &Path, array: &Array) -> Result<()> {
    write_array(BufWriter::new(File::create(path)?), array)
}

pub fn load(path: &Path) -> Result<Array> {
    read_array(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let a = Array::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        let mut expected = b"MTE1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_array(&buf[..]).unwrap(), a);
    }

    #[test]
    fn rejects_corruption() {
        let a = Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        assert!(read_array(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_array(&bad[..]).is_err());
        assert!(Array::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(a.into_matrix().is_err());
    }
}
