//! Reader and writer for the IDX binary format (MNIST-style).
//!
//! Header: two zero bytes, a type byte (`0x08` = unsigned byte), a rank byte,
//! then one big-endian `u32` per dimension, followed by the raw data. Image
//! files have magic `0x00000803` (rank 3), label files `0x00000801` (rank 1).

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("idx parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("idx io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(offset: usize, message: impl Into<String>) -> IdxError {
    IdxError::Parse { offset, message: message.into() }
}

/// A decoded unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(offset, "truncated header"))
}

pub fn decode(bytes: &[u8], expected_magic: u32) -> Result<IdxArray, IdxError> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(parse_err(0, format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "dimension product overflows"))?;
    let body = &bytes[header..];
    if body.len() < len {
        return Err(parse_err(
            bytes.len(),
            format!("truncated data: expected {len} bytes after header, found {}", body.len()),
        ));
    }
    if body.len() > len {
        return Err(parse_err(header + len, format!("{} trailing bytes", body.len() - len)));
    }
    Ok(IdxArray { dims, data: body.to_vec() })
}

pub fn encode(array: &IdxArray) -> Vec<u8> {
    let magic = 0x0800 | array.dims.len() as u32;
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend(magic.to_be_bytes());
    for &d in &array.dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(&array.data);
    out
}

pub fn read_idx(path: impl AsRef<Path>, expected_magic: u32) -> Result<IdxArray, IdxError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IdxError::Io { path: path.display().to_string(), source })?;
    decode(&bytes, expected_magic)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<(), IdxError> {
    let path = path.as_ref();
    fs::write(path, encode(array)).map_err(|source| IdxError::Io { path: path.display().to_string(), source })
}

/// Reads an image/label file pair, checking that the counts agree.
pub fn read_image_set(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(IdxArray, IdxArray), IdxError> {
    let img = read_idx(images, IMAGES_MAGIC)?;
    let lab = read_idx(labels, LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(parse_err(
            4,
            format!("{} images but {} labels", img.dims[0], lab.dims[0]),
        ));
    }
    Ok((img, lab))
}
