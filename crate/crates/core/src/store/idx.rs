//! IDX files as distributed with MNIST: big-endian, `[0, 0, dtype, ndim]` magic.

use std::path::Path;

use super::StoreError;

/// An unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray, StoreError> {
    parse_idx(&std::fs::read(path)?)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::Truncated);
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(StoreError::BadMagic([bytes[0], bytes[1], bytes[2], bytes[3]]));
    }
    if bytes[2] != 0x08 {
        return Err(StoreError::Corrupt(format!(
            "IDX dtype 0x{:02x} unsupported, only unsigned bytes",
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    let head = 4 + 4 * ndim;
    if bytes.len() < head {
        return Err(StoreError::Truncated);
    }
    let dims: Vec<usize> = bytes[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    match (bytes.len() - head).cmp(&n) {
        std::cmp::Ordering::Less => Err(StoreError::Truncated),
        std::cmp::Ordering::Greater => Err(StoreError::Corrupt("trailing bytes after IDX payload".into())),
        std::cmp::Ordering::Equal => Ok(IdxArray {
            dims,
            data: bytes[head..].to_vec(),
        }),
    }
}
