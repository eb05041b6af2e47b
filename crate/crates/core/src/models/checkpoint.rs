//! Binary model checkpoints.
//!
//! Layout: magic `XFI1`, `u32` layer count `n`, `n + 1` `u32` dims, then for
//! each layer its weight (row-major) and bias as `f64`. All integers and
//! floats little-endian. The activation is not stored; loading yields tanh.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Layer, MlpModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"XFI1";

pub fn write<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for &d in model.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for p in model.params() {
        for v in p.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(model: &MlpModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write(model, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 8, "parameters")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MlpModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic at byte 0".into()));
    }
    let n = c.u32("layer count")?;
    if n == 0 || n > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {n}")));
    }
    let dims = (0..=n).map(|_| c.u32("dims")).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n);
    for w in dims.windows(2) {
        let weight = c.matrix(w[0], w[1])?;
        let bias = c.matrix(1, w[1])?;
        layers.push(Layer { weight, bias });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes at byte {}", bytes.len() - c.pos, c.pos)));
    }
    MlpModel::from_layers(Activation::Tanh, layers)
}

pub fn read<R: Read>(mut r: R) -> Result<MlpModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn save(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MlpModel> {
    from_bytes(&std::fs::read(path)?)
}
