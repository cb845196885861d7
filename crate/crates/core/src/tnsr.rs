//! TNSR binary tensor files.
//!
//! Layout: `"TNSR"`, version `0x01`, dtype `0x00` (f32), rank byte, three
//! zero pad bytes, then `rank` little-endian `u64` dims and the row-major
//! little-endian `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;
const HEADER_LEN: usize = 10;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(tensor));
    encode_into(tensor, &mut out);
    out
}

pub fn encoded_len(tensor: &Tensor) -> usize {
    HEADER_LEN + 8 * tensor.dims().len() + 4 * tensor.len()
}

pub fn encode_into(tensor: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(tensor.dims().len() as u8);
    out.extend_from_slice(&[0, 0, 0]);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes a complete TNSR buffer; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (tensor, used) = decode_prefix(bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(
            used as u64,
            format!("{} trailing bytes after tensor payload", bytes.len() - used),
        ));
    }
    Ok(tensor)
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed. `base` offsets reported error positions when
/// the blob is embedded in a larger file.
pub fn decode_prefix(bytes: &[u8], base: u64) -> Result<(Tensor, usize)> {
    let err = |at: usize, msg: String| Error::format(base + at as u64, msg);
    if bytes.len() < HEADER_LEN {
        return Err(err(bytes.len(), "truncated TNSR header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}, expected \"TNSR\"", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(err(4, format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(err(5, format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(err(6, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    if bytes[7..10] != [0, 0, 0] {
        return Err(err(7, "nonzero pad bytes".into()));
    }
    let dims_end = HEADER_LEN + 8 * rank;
    if bytes.len() < dims_end {
        return Err(err(bytes.len(), "truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for k in 0..rank {
        let at = HEADER_LEN + 8 * k;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if d == 0 {
            return Err(err(at, "zero-length dimension".into()));
        }
        let d = usize::try_from(d).map_err(|_| err(at, format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| err(at, "tensor size overflows".into()))?;
        dims.push(d);
    }
    let end = dims_end + 4 * count;
    if bytes.len() < end {
        return Err(err(
            bytes.len(),
            format!("truncated payload: need {} bytes, have {}", end - dims_end, bytes.len() - dims_end),
        ));
    }
    let data = bytes[dims_end..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(dims, data)?, end))
}

pub fn write_tnsr(path: &Path, tensor: &Tensor) -> Result<()> {
    std::fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tnsr(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
