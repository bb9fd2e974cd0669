//! ACTD activation dumps.
//!
//! Little-endian layout:
//!
//! | bytes        | field                                  |
//! |--------------|----------------------------------------|
//! | 4            | magic `ACTD`                           |
//! | 4            | version (u32, currently 1)             |
//! | 4            | dtype code (u32, 1 = f32)              |
//! | 4            | ndim (u32)                             |
//! | 8 × ndim     | dims (u64 each)                        |
//! | 4            | split (u32, 0 = train, 1 = test)       |
//! | 4            | layer-name length in bytes (u32)       |
//! | name length  | layer name, UTF-8                      |
//! | 4 × Πdims    | payload, row-major f32                 |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;

pub const MAGIC: &[u8; 4] = b"ACTD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self, StoreError> {
        match code {
            1 => Ok(DType::F32),
            other => Err(StoreError::UnknownDType(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Test,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self, StoreError> {
        match code {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(StoreError::Corrupt(format!("unknown split code {other}"))),
        }
    }
}

/// A dense tensor captured from one layer (or a label vector).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub layer_name: String,
    pub split: Split,
}

impl TensorDump {
    pub fn new(layer_name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, StoreError> {
        let t = Self {
            dtype: DType::F32,
            shape,
            data,
            layer_name: layer_name.into(),
            split: Split::Test,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.shape.is_empty() {
            return Err(StoreError::EmptyShape);
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(StoreError::ShapeMismatch {
                expected,
                got: self.data.len(),
            });
        }
        Ok(())
    }

    /// Number of samples (the leading dimension).
    pub fn samples(&self) -> usize {
        self.shape[0]
    }

    /// Values per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn header_len(&self) -> usize {
        header_len(self.shape.len(), self.layer_name.len())
    }

    /// Sample blocks of at most `batch` samples, in order.
    pub fn batches(&self, batch: usize) -> Result<impl Iterator<Item = (&[f32], Range<usize>)>, StoreError> {
        if batch == 0 {
            return Err(StoreError::ZeroBatch);
        }
        let per = self.sample_len();
        let n = self.samples();
        Ok((0..n).step_by(batch).map(move |start| {
            let end = (start + batch).min(n);
            (&self.data[start * per..end * per], start..end)
        }))
    }
}

fn header_len(ndim: usize, name_len: usize) -> usize {
    16 + 8 * ndim + 8 + name_len
}

fn encode_header(t: &TensorDump) -> Vec<u8> {
    let mut h = Vec::with_capacity(t.header_len());
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&t.dtype.code().to_le_bytes());
    h.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        h.extend_from_slice(&(d as u64).to_le_bytes());
    }
    h.extend_from_slice(&t.split.code().to_le_bytes());
    h.extend_from_slice(&(t.layer_name.len() as u32).to_le_bytes());
    h.extend_from_slice(t.layer_name.as_bytes());
    h
}

pub fn write_dump(t: &TensorDump, path: impl AsRef<Path>) -> Result<(), StoreError> {
    t.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(t))?;
    for chunk in t.data.chunks(4096) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything in a dump except the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub split: Split,
    pub layer_name: String,
}

impl DumpHeader {
    pub fn samples(&self) -> usize {
        self.shape[0]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.shape.iter().product()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> StoreError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        StoreError::Truncated
    } else {
        StoreError::Io(e)
    }
}

fn read_header(r: &mut impl Read) -> Result<DumpHeader, StoreError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(StoreError::Version(version));
    }
    let dtype = DType::from_code(read_u32(r)?)?;
    let ndim = read_u32(r)? as usize;
    if ndim == 0 {
        return Err(StoreError::EmptyShape);
    }
    if ndim > 16 {
        return Err(StoreError::Corrupt(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| StoreError::Corrupt("dimension overflow".into()))?);
    }
    let split = Split::from_code(read_u32(r)?)?;
    let name_len = read_u32(r)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(truncated)?;
    let layer_name = String::from_utf8(name).map_err(|_| StoreError::Corrupt("layer name is not UTF-8".into()))?;
    Ok(DumpHeader {
        dtype,
        shape,
        split,
        layer_name,
    })
}

fn decode_f32(bytes: &[u8], out: &mut Vec<f32>) {
    out.extend(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
    );
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<TensorDump, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let n = header.payload_len();
    let mut bytes = Vec::with_capacity(n * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() < n * 4 {
        return Err(StoreError::Truncated);
    }
    if bytes.len() > n * 4 {
        return Err(StoreError::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - n * 4
        )));
    }
    let mut data = Vec::with_capacity(n);
    decode_f32(&bytes, &mut data);
    Ok(TensorDump {
        dtype: header.dtype,
        shape: header.shape,
        data,
        layer_name: header.layer_name,
        split: header.split,
    })
}

/// Reads a dump's header without touching the payload.
pub fn read_header_only(path: impl AsRef<Path>) -> Result<DumpHeader, StoreError> {
    read_header(&mut BufReader::new(File::open(path)?))
}

/// Streams a dump from disk in sample blocks.
pub struct DumpReader {
    header: DumpHeader,
    reader: BufReader<File>,
}

impl DumpReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let mut reader = BufReader::new(File::open(path)?);
        let header = read_header(&mut reader)?;
        Ok(Self { header, reader })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    /// Blocks of up to `batch` samples; the last one may be short.
    pub fn batches(self, batch: usize) -> Result<DumpBatches, StoreError> {
        if batch == 0 {
            return Err(StoreError::ZeroBatch);
        }
        Ok(DumpBatches {
            next: 0,
            batch,
            reader: self,
            buf: Vec::new(),
        })
    }
}

pub struct DumpBatches {
    reader: DumpReader,
    next: usize,
    batch: usize,
    buf: Vec<u8>,
}

impl Iterator for DumpBatches {
    type Item = Result<(Vec<f32>, Range<usize>), StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.reader.header.samples();
        if self.next >= n {
            return None;
        }
        let start = self.next;
        let end = (start + self.batch).min(n);
        self.next = end;
        let values = (end - start) * self.reader.header.sample_len();
        self.buf.resize(values * 4, 0);
        if let Err(e) = self.reader.reader.read_exact(&mut self.buf) {
            self.next = n;
            return Some(Err(truncated(e)));
        }
        let mut out = Vec::with_capacity(values);
        decode_f32(&self.buf, &mut out);
        Some(Ok((out, start..end)))
    }
}
