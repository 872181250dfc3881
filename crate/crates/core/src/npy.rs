//! Reading and writing the NPY v1.0 binary array format.
//!
//! Only the subset needed for embedding matrices is supported: C-order,
//! little-endian `<f4` / `<f8`, one or two dimensions. Writing always emits
//! `<f4` with the header padded so the data starts on a 64-byte boundary.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::EmbeddingMatrix;
use crate::error::{Error, Result};

/// The NPY magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const ALIGN: usize = 64;

/// Element type found in an NPY header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    F8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::F8 => 8,
        }
    }
}

/// Parsed header of an NPY file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset of the payload.
    pub data_offset: usize,
}

/// Reads a 2-D float array, narrowing `<f8` to 32 bits.
pub fn read_array(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only the header; used to build manifests without loading payloads.
pub fn read_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    // 64 KiB is far more than any header this module writes or accepts.
    (&mut file)
        .take(1 << 16)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf)
}

pub fn write_array(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(matrix.rows(), matrix.dim(), matrix.values());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

/// Decodes an in-memory NPY file.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let header = parse_header(bytes)?;
    let count = header
        .rows
        .checked_mul(header.cols)
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let need = count * header.dtype.size();
    let payload = &bytes[header.data_offset..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape ({}, {}) needs {need}",
            payload.len(),
            header.rows,
            header.cols
        )));
    }
    let values: Vec<f32> = match header.dtype {
        Dtype::F4 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F8 => payload
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b) as f32
            })
            .collect(),
    };
    EmbeddingMatrix::new(header.rows, header.cols, values)
}

/// Encodes a row-major `<f4` matrix as NPY v1.0.
pub fn encode(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(rows * cols, values.len());
    let mut out = encode_header(rows, cols);
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Magic, version, length and padded dict for an `<f4` C-order matrix.
pub fn encode_header(rows: usize, cols: usize) -> Vec<u8> {
    let mut dict = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({rows}, {cols}), }}"
    );
    // magic(6) + version(2) + length(2) + dict + padding + '\n'
    let unpadded = 10 + dict.len() + 1;
    let total = unpadded.div_ceil(ALIGN) * ALIGN;
    dict.extend(std::iter::repeat_n(' ', total - unpadded));
    dict.push('\n');
    let header_len = u16::try_from(dict.len()).expect("header fits in u16");

    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn parse_header(bytes: &[u8]) -> Result<NpyHeader> {
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err(Error::Format("missing NPY magic".into()));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated header length".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        v => return Err(Error::Format(format!("unsupported NPY version {v}"))),
    };
    let end = start + header_len;
    if bytes.len() < end {
        return Err(Error::Format("truncated header".into()));
    }
    let text = std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let dict = parse_dict(text)?;

    let dtype = match dict.descr.as_str() {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => {
            return Err(Error::UnsupportedDtype(format!(
                "element type {other:?}, expected '<f4' or '<f8'"
            )))
        }
    };
    if dict.fortran_order {
        return Err(Error::Format("Fortran-order arrays are not supported".into()));
    }
    let (rows, cols) = match dict.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(Error::UnsupportedDtype(format!(
                "{}-dimensional array, expected 2",
                other.len()
            )))
        }
    };
    Ok(NpyHeader {
        dtype,
        rows,
        cols,
        data_offset: end,
    })
}

struct HeaderDict {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the restricted Python-literal dict numpy writes.
fn parse_dict(text: &str) -> Result<HeaderDict> {
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::Format("header is not a dict literal".into()))?;

    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest)?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| Error::Format(format!("expected ':' after key {key:?}")))?
            .trim_start();
        rest = match key.as_str() {
            "descr" => {
                let (v, r) = take_quoted(after)?;
                descr = Some(v);
                r
            }
            "fortran_order" => {
                if let Some(r) = after.strip_prefix("False") {
                    fortran_order = Some(false);
                    r
                } else if let Some(r) = after.strip_prefix("True") {
                    fortran_order = Some(true);
                    r
                } else {
                    return Err(Error::Format("fortran_order must be True or False".into()));
                }
            }
            "shape" => {
                let after = after
                    .strip_prefix('(')
                    .ok_or_else(|| Error::Format("shape must be a tuple".into()))?;
                let close = after
                    .find(')')
                    .ok_or_else(|| Error::Format("unterminated shape tuple".into()))?;
                let dims = after[..close]
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Format(format!("bad shape entry {s:?}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape = Some(dims);
                &after[close + 1..]
            }
            other => return Err(Error::Format(format!("unexpected header key {other:?}"))),
        };
        rest = rest.trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }

    Ok(HeaderDict {
        descr: descr.ok_or_else(|| Error::Format("header lacks 'descr'".into()))?,
        fortran_order: fortran_order
            .ok_or_else(|| Error::Format("header lacks 'fortran_order'".into()))?,
        shape: shape.ok_or_else(|| Error::Format("header lacks 'shape'".into()))?,
    })
}

fn take_quoted(s: &str) -> Result<(String, &str)> {
    let quote = s
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Format(format!("expected quoted string at {s:?}")))?;
    let inner = &s[1..];
    let close = inner
        .find(quote)
        .ok_or_else(|| Error::Format("unterminated string".into()))?;
    Ok((inner[..close].to_string(), &inner[close + 1..]))
}
