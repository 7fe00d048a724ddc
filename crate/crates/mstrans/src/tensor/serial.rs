//! Flat binary tensor format shared by checkpoints and attention dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   8 bytes  "MSTEN001"
//! rank    u32
//! extents u64 * rank
//! values  f64 * product(extents)   (row-major)
//! ```
//!
//! Round-trips are bit-exact.

use super::Tensor;
use crate::{Error, Result};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"MSTEN001";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, path: &str) -> Result<Tensor> {
    let bad = |detail: String| Error::Format { path: path.to_string(), detail };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(format!("unreasonable tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let e = u64::from_le_bytes(b8) as usize;
        if e == 0 {
            return Err(bad("zero extent".into()));
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    if numel > (1 << 32) {
        return Err(bad(format!("tensor too large: {numel} elements")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_tensor(&mut f, t).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&mut f, &path.display().to_string())
}
