//! `.npy` version 1.0 reader and writer for complex sample matrices.
//!
//! Files are written as little-endian `complex64`, C order, with the header
//! padded so the payload starts on a 64-byte boundary. Reading also accepts
//! version 2.0 headers and `complex128` payloads (down-converted).

use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use thiserror::Error;

use crate::iq::ComplexMatrix;

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("{}: not an .npy file (bad magic)", path.display())]
    BadMagic { path: PathBuf },

    #[error("{}: unsupported .npy version {major}.{minor}", path.display())]
    UnsupportedVersion { path: PathBuf, major: u8, minor: u8 },

    #[error("{}: unsupported dtype {descr:?} (expected '<c8' or '<c16')", path.display())]
    UnsupportedDtype { path: PathBuf, descr: String },

    #[error("{}: Fortran-ordered arrays are not supported", path.display())]
    FortranOrder { path: PathBuf },

    #[error("{}: malformed header: {msg}", path.display())]
    BadHeader { path: PathBuf, msg: String },

    #[error("{}: truncated payload, expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: refusing to write non-finite samples", path.display())]
    NonFinite { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Element type found in a file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Complex64,
    Complex128,
}

impl Dtype {
    fn bytes(self) -> usize {
        match self {
            Dtype::Complex64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

/// Header bytes (magic through padding) for a `rows × cols` complex64 array.
pub fn header_bytes(rows: usize, cols: usize) -> Vec<u8> {
    let dict = format!("{{'descr': '<c8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let total = unpadded.div_ceil(ALIGN) * ALIGN;
    let header_len = total - MAGIC.len() - 4;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.resize(total - 1, b' ');
    out.push(b'\n');
    out
}

pub fn encode(m: &ComplexMatrix) -> Vec<u8> {
    let mut out = header_bytes(m.rows(), m.cols());
    out.reserve(m.data().len() * 8);
    for c in m.data() {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
    out
}

/// Writes `m` to `path` through a temporary file and rename.
pub fn write_npy(path: &Path, m: &ComplexMatrix) -> Result<(), NpyError> {
    if !m.is_finite() {
        return Err(NpyError::NonFinite { path: path.into() });
    }
    let io = |source| NpyError::Io {
        path: path.into(),
        source,
    };
    let tmp = path.with_extension("npy.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(m)).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_npy(path: &Path) -> Result<ComplexMatrix, NpyError> {
    let bytes = std::fs::read(path).map_err(|source| NpyError::Io {
        path: path.into(),
        source,
    })?;
    decode(&bytes, path)
}

/// Parses the preamble. Returns the header and the payload offset.
pub fn parse_header(bytes: &[u8], path: &Path) -> Result<(Header, usize), NpyError> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC {
        return Err(NpyError::BadMagic { path: path.into() });
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (len_bytes, hlen) = match (major, minor) {
        (1, 0) if bytes.len() >= 10 => (2, u16::from_le_bytes([bytes[8], bytes[9]]) as usize),
        (2, 0) if bytes.len() >= 12 => (
            4,
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
        ),
        (1, 0) | (2, 0) => {
            return Err(NpyError::BadHeader {
                path: path.into(),
                msg: "file ends inside the preamble".into(),
            })
        }
        _ => {
            return Err(NpyError::UnsupportedVersion {
                path: path.into(),
                major,
                minor,
            })
        }
    };
    let start = 8 + len_bytes;
    let end = start + hlen;
    if bytes.len() < end {
        return Err(NpyError::BadHeader {
            path: path.into(),
            msg: format!("header claims {hlen} bytes, file has {}", bytes.len() - start),
        });
    }
    let text = std::str::from_utf8(&bytes[start..end]).map_err(|_| NpyError::BadHeader {
        path: path.into(),
        msg: "header is not UTF-8".into(),
    })?;
    Ok((parse_dict(text, path)?, end))
}

fn parse_dict(text: &str, path: &Path) -> Result<Header, NpyError> {
    let bad = |msg: &str| NpyError::BadHeader {
        path: path.into(),
        msg: msg.into(),
    };
    let after = |key: &str| -> Result<&str, NpyError> {
        let k = text
            .find(&format!("'{key}'"))
            .ok_or_else(|| bad(&format!("missing key {key}")))?;
        let rest = &text[k + key.len() + 2..];
        let colon = rest.find(':').ok_or_else(|| bad(&format!("no value for {key}")))?;
        Ok(rest[colon + 1..].trim_start())
    };

    let descr_v = after("descr")?;
    let quote = descr_v
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| bad("descr is not a string"))?;
    let close = descr_v[1..].find(quote).ok_or_else(|| bad("unterminated descr"))?;
    let descr = &descr_v[1..1 + close];
    let dtype = match descr {
        "<c8" => Dtype::Complex64,
        "<c16" => Dtype::Complex128,
        other => {
            return Err(NpyError::UnsupportedDtype {
                path: path.into(),
                descr: other.into(),
            })
        }
    };

    let fo = after("fortran_order")?;
    if fo.starts_with("True") {
        return Err(NpyError::FortranOrder { path: path.into() });
    } else if !fo.starts_with("False") {
        return Err(bad("fortran_order is not a boolean"));
    }

    let sv = after("shape")?;
    if !sv.starts_with('(') {
        return Err(bad("shape is not a tuple"));
    }
    let close = sv.find(')').ok_or_else(|| bad("unterminated shape"))?;
    let shape = sv[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad(&format!("bad shape entry {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Header { dtype, shape })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ComplexMatrix, NpyError> {
    let (header, offset) = parse_header(bytes, path)?;
    let (rows, cols) = match header.shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => {
            return Err(NpyError::BadHeader {
                path: path.into(),
                msg: format!("expected a 1-D or 2-D array, got shape {other:?}"),
            })
        }
    };
    let n = rows * cols;
    let expected = n * header.dtype.bytes();
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            path: path.into(),
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<Complex32> = match header.dtype {
        Dtype::Complex64 => payload[..expected]
            .chunks_exact(8)
            .map(|b| {
                Complex32::new(
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                    f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                )
            })
            .collect(),
        Dtype::Complex128 => {
            log::warn!("{}: converting complex128 samples to complex64", path.display());
            payload[..expected]
                .chunks_exact(16)
                .map(|b| {
                    let re = f64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
                    let im = f64::from_le_bytes(b[8..].try_into().expect("8 bytes"));
                    Complex32::new(re as f32, im as f32)
                })
                .collect()
        }
    };
    ComplexMatrix::new(rows, cols, data).map_err(|e| NpyError::BadHeader {
        path: path.into(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("mem.npy")
    }

    #[test]
    fn header_alignment_and_text() {
        let h = header_bytes(4, 1_000_000);
        assert_eq!(h.len() % 64, 0);
        let text = std::str::from_utf8(&h[10..]).unwrap();
        assert!(text.contains("(4, 1000000)"));
        assert!(text.contains("'descr': '<c8'"));
        assert!(text.ends_with('\n'));
        assert_eq!(u16::from_le_bytes([h[8], h[9]]) as usize, h.len() - 10);
    }

    #[test]
    fn in_memory_round_trip() {
        let data = (0..6).map(|i| Complex32::new(i as f32 * 0.5, -(i as f32))).collect();
        let m = ComplexMatrix::new(2, 3, data).unwrap();
        assert_eq!(decode(&encode(&m), &p()).unwrap(), m);
    }

    #[test]
    fn distinct_errors() {
        let m = ComplexMatrix::zeros(2, 4);
        let good = encode(&m);

        let mut b = good.clone();
        b[1] = b'X';
        assert!(matches!(decode(&b, &p()), Err(NpyError::BadMagic { .. })));

        let mut b = good.clone();
        b[6] = 3;
        assert!(matches!(
            decode(&b, &p()),
            Err(NpyError::UnsupportedVersion { major: 3, .. })
        ));

        let mut b = good.clone();
        let pos = b.windows(3).position(|w| w == b"<c8").unwrap();
        b[pos + 1..pos + 3].copy_from_slice(b"f8");
        assert!(matches!(decode(&b, &p()), Err(NpyError::UnsupportedDtype { .. })));

        let b = &good[..good.len() - 5];
        match decode(b, &p()) {
            Err(NpyError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 64);
                assert_eq!(actual, 59);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn complex128_is_downconverted() {
        let dict = "{'descr': '<c16', 'fortran_order': False, 'shape': (1, 2), }";
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&[1, 0]);
        let mut d = dict.to_string();
        while (10 + d.len() + 1) % 64 != 0 {
            d.push(' ');
        }
        d.push('\n');
        b.extend_from_slice(&(d.len() as u16).to_le_bytes());
        b.extend_from_slice(d.as_bytes());
        for v in [1.5f64, -2.0, 0.25, 8.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let m = decode(&b, &p()).unwrap();
        assert_eq!(m.data(), &[Complex32::new(1.5, -2.0), Complex32::new(0.25, 8.0)]);
    }

    #[test]
    fn fortran_order_rejected() {
        let dict = "{'descr': '<c8', 'fortran_order': True, 'shape': (1, 1), }\n";
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&[1, 0]);
        b.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        b.extend_from_slice(dict.as_bytes());
        b.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&b, &p()), Err(NpyError::FortranOrder { .. })));
    }
}
