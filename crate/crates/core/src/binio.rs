//! Little-endian container shared by the `ILMP`, `ILMF` and `ILMW` files:
//! four magic bytes, three `u32` dimensions, then packed `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 4 + 3 * 4;

pub(crate) fn encode(magic: &[u8; 4], dims: [u32; 3], payload: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in payload {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes a container. `expected_len` maps the header dims to the number of
/// floats that must follow; any other payload length is rejected.
pub(crate) fn decode(
    bytes: &[u8],
    magic: &[u8; 4],
    what: &'static str,
    expected_len: impl Fn([u32; 3]) -> Option<usize>,
) -> Result<([u32; 3], Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(what, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            what,
            format!("bad magic {:?}, expected {:?}", &bytes[..4], std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let mut dims = [0u32; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"));
    }
    let n = expected_len(dims).ok_or_else(|| Error::format(what, format!("dimensions {dims:?} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != n.checked_mul(4) {
        return Err(Error::format(
            what,
            format!("payload is {} bytes, header {dims:?} requires {} floats", body.len(), n),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok((dims, values))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn dim_u32(v: usize, what: &'static str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(what, format!("dimension {v} exceeds u32")))
}

pub(crate) fn product(dims: [u32; 3]) -> Option<usize> {
    (dims[0] as usize)
        .checked_mul(dims[1] as usize)?
        .checked_mul(dims[2] as usize)
}
