//! Probe parameter file.
//!
//! ```text
//!  0  magic     8 bytes "HALPROBE"
//!  8  version   u32 LE  1
//! 12  backbone  u8      0 = gated, 1 = standard
//! 13  d, h, C   3 x u32 LE
//! 25  gate (h x d, gated only), up (h x d), down (C x h): row-major f32 LE
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Backbone, ProbeParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const PROBE_MAGIC: [u8; 8] = *b"HALPROBE";
pub const PROBE_VERSION: u32 = 1;
const HEADER_LEN: usize = 25;

/// Writes `params`, rounding each weight to `f32`. Returns the byte count.
pub fn save_params<W: Write>(params: &ProbeParams, sink: W) -> Result<u64> {
    let mut sink = BufWriter::new(sink);
    let dim = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::invalid(format!("dimension {v} does not fit the file format")))
    };
    sink.write_all(&PROBE_MAGIC)?;
    sink.write_all(&PROBE_VERSION.to_le_bytes())?;
    sink.write_all(&[match params.backbone() {
        Backbone::Gated => 0u8,
        Backbone::Standard => 1u8,
    }])?;
    sink.write_all(&dim(params.input_dim())?)?;
    sink.write_all(&dim(params.hidden_dim())?)?;
    sink.write_all(&dim(params.output_dim())?)?;
    let mut written = HEADER_LEN as u64;
    for (_, m) in params.matrices() {
        for &v in m.as_slice() {
            sink.write_all(&(v as f32).to_le_bytes())?;
        }
        written += 4 * m.as_slice().len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

pub fn save_params_path(params: &ProbeParams, path: impl AsRef<Path>) -> Result<u64> {
    save_params(params, File::create(path)?)
}

pub fn load_params<R: Read>(mut source: R) -> Result<ProbeParams> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        if bytes.len() < 8 && !PROBE_MAGIC.starts_with(&bytes) || bytes.len() >= 8 && bytes[..8] != PROBE_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"HALPROBE\""));
        }
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..8] != PROBE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HALPROBE\""));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != PROBE_VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let backbone = match bytes[12] {
        0 => Backbone::Gated,
        1 => Backbone::Standard,
        b => return Err(Error::format(12, format!("unknown backbone code {b}"))),
    };
    let field = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (d, h, c) = (field(13), field(17), field(21));
    if d == 0 || h == 0 || c == 0 {
        return Err(Error::format(13, format!("zero dimension in d={d}, h={h}, C={c}")));
    }
    let gate_len = if backbone == Backbone::Gated { h * d } else { 0 };
    let values = gate_len + h * d + c * h;
    let expected = HEADER_LEN as u64 + 4 * values as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::TruncatedFile {
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::format(
            expected,
            format!("{} trailing bytes after {expected}", actual - expected),
        ));
    }
    let mut offset = HEADER_LEN;
    let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
        let n = rows * cols;
        let chunk = &bytes[offset..offset + 4 * n];
        let start = offset;
        offset += 4 * n;
        let mut data = Vec::with_capacity(n);
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format((start + 4 * i) as u64, "non-finite weight"));
            }
            data.push(f64::from(v));
        }
        Matrix::from_vec(rows, cols, data)
    };
    let gate = match backbone {
        Backbone::Gated => Some(take(h, d)?),
        Backbone::Standard => None,
    };
    let up = take(h, d)?;
    let down = take(c, h)?;
    ProbeParams::from_matrices(backbone, gate, up, down)
}

pub fn load_params_path(path: impl AsRef<Path>) -> Result<ProbeParams> {
    load_params(std::io::BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::random_params;

    fn saved(p: &ProbeParams) -> Vec<u8> {
        let mut out = Vec::new();
        let n = save_params(p, &mut out).unwrap();
        assert_eq!(n as usize, out.len());
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        for backbone in [Backbone::Gated, Backbone::Standard] {
            let p = random_params(7, 5, 2, backbone, 11).unwrap();
            let back = load_params(&saved(&p)[..]).unwrap();
            assert!(back.bitwise_eq(&p));
        }
    }

    #[test]
    fn header_layout() {
        let p = random_params(3, 4, 1, Backbone::Standard, 0).unwrap();
        let b = saved(&p);
        assert_eq!(&b[..8], b"HALPROBE");
        assert_eq!(b[12], 1);
        assert_eq!(&b[13..17], &3u32.to_le_bytes());
        assert_eq!(&b[17..21], &4u32.to_le_bytes());
        assert_eq!(&b[21..25], &1u32.to_le_bytes());
        assert_eq!(b.len(), 25 + 4 * (4 * 3 + 4));
    }

    #[test]
    fn standard_file_loads_without_gate() {
        let p = random_params(3, 4, 2, Backbone::Standard, 0).unwrap();
        let back = load_params(&saved(&p)[..]).unwrap();
        assert!(back.gate().is_none());
        assert_eq!(back.backbone(), Backbone::Standard);
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let p = random_params(3, 4, 2, Backbone::Gated, 0).unwrap();
        let b = saved(&p);
        match load_params(&b[..b.len() - 3]) {
            Err(Error::TruncatedFile { expected, actual }) => {
                assert_eq!(expected, b.len() as u64);
                assert_eq!(actual, b.len() as u64 - 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_params(&b[..10]), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn bad_magic_and_version() {
        let p = random_params(2, 2, 2, Backbone::Gated, 0).unwrap();
        let mut b = saved(&p);
        b[0] = b'X';
        assert!(matches!(load_params(&b[..]), Err(Error::Format { offset: 0, .. })));
        let mut b = saved(&p);
        b[8] = 9;
        assert!(matches!(load_params(&b[..]), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let p = random_params(2, 2, 2, Backbone::Gated, 0).unwrap();
        let mut b = saved(&p);
        b.extend_from_slice(&[0, 0, 0, 0]);
        assert!(load_params(&b[..]).is_err());
    }
}
