//! The `.actv` activation file.
//!
//! ```text
//! header (28 bytes)
//!   0  magic        8 bytes  "HALPACT1"
//!   8  version      u32 LE   1
//!  12  hidden_dim   u32 LE   d >= 1
//!  16  record_count u64 LE
//!  24  reserved     4 bytes  zero
//! record (16 + 4d bytes), repeated record_count times
//!   0  record_id    u64 LE
//!   8  layer_index  u16 LE
//!  10  model_tag    u16 LE
//!  12  flags        u32 LE   0
//!  16  hidden       d x f32 LE
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ACTV_MAGIC: [u8; 8] = *b"HALPACT1";
pub const ACTV_VERSION: u32 = 1;
pub const ACTV_HEADER_LEN: u64 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationFileHeader {
    pub hidden_dim: u32,
    pub record_count: u64,
}

impl ActivationFileHeader {
    pub fn record_len(&self) -> u64 {
        16 + 4 * u64::from(self.hidden_dim)
    }

    /// Total file length implied by the header.
    pub fn file_len(&self) -> u64 {
        ACTV_HEADER_LEN + self.record_count * self.record_len()
    }

    fn encode(&self) -> [u8; ACTV_HEADER_LEN as usize] {
        let mut buf = [0u8; ACTV_HEADER_LEN as usize];
        buf[0..8].copy_from_slice(&ACTV_MAGIC);
        buf[8..12].copy_from_slice(&ACTV_VERSION.to_le_bytes());
        buf[12..16].copy_from_slice(&self.hidden_dim.to_le_bytes());
        buf[16..24].copy_from_slice(&self.record_count.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8; ACTV_HEADER_LEN as usize]) -> Result<Self> {
        if buf[0..8] != ACTV_MAGIC {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected \"HALPACT1\"",
                    String::from_utf8_lossy(&buf[0..8])
                ),
            ));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != ACTV_VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let hidden_dim = u32::from_le_bytes(buf[12..16].try_into().unwrap());
        if hidden_dim == 0 {
            return Err(Error::format(12, "hidden_dim must be at least 1"));
        }
        let record_count = u64::from_le_bytes(buf[16..24].try_into().unwrap());
        if buf[24..28] != [0; 4] {
            return Err(Error::format(24, "reserved header bytes are not zero"));
        }
        Ok(ActivationFileHeader {
            hidden_dim,
            record_count,
        })
    }
}

/// One last-token hidden state of one query at one layer of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub record_id: u64,
    pub layer_index: u16,
    /// Index into the manifest preamble's model list.
    pub model_tag: u16,
    pub hidden: Vec<f32>,
}

impl ActivationRecord {
    pub fn new(record_id: u64, layer_index: u16, model_tag: u16, hidden: Vec<f32>) -> Self {
        ActivationRecord {
            record_id,
            layer_index,
            model_tag,
            hidden,
        }
    }

    /// Identity of a record within a file: one query may appear once per layer.
    pub fn key(&self) -> (u64, u16) {
        (self.record_id, self.layer_index)
    }

    /// Bitwise equality, telling apart `-0.0`/`0.0` and NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.record_id == other.record_id
            && self.layer_index == other.layer_index
            && self.model_tag == other.model_tag
            && self.hidden.len() == other.hidden.len()
            && self
                .hidden
                .iter()
                .zip(&other.hidden)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Writes `records` as a complete `.actv` stream and returns the byte count.
///
/// Everything is validated before the first byte is written, so a rejected
/// call leaves the sink untouched.
pub fn write_activation_file<W: Write>(
    records: &[ActivationRecord],
    dim: usize,
    sink: W,
) -> Result<u64> {
    let hidden_dim = u32::try_from(dim)
        .ok()
        .filter(|&d| d >= 1)
        .ok_or_else(|| Error::invalid(format!("hidden_dim {dim} out of range")))?;
    let mut seen = HashSet::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.hidden.len() != dim {
            return Err(Error::Shape(format!(
                "record index {i} (id {}) has {} hidden values, expected {dim}",
                r.record_id,
                r.hidden.len()
            )));
        }
        if let Some(j) = r.hidden.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "record index {i} (id {}), hidden[{j}]",
                r.record_id
            )));
        }
        if !seen.insert(r.key()) {
            return Err(Error::DuplicateId(format!(
                "{} at layer {} (record index {i})",
                r.record_id, r.layer_index
            )));
        }
    }

    let header = ActivationFileHeader {
        hidden_dim,
        record_count: records.len() as u64,
    };
    let mut sink = BufWriter::new(sink);
    sink.write_all(&header.encode())?;
    let mut buf = Vec::with_capacity(header.record_len() as usize);
    for r in records {
        buf.clear();
        buf.extend_from_slice(&r.record_id.to_le_bytes());
        buf.extend_from_slice(&r.layer_index.to_le_bytes());
        buf.extend_from_slice(&r.model_tag.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for v in &r.hidden {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()?;
    Ok(header.file_len())
}

pub fn write_activation_path(
    records: &[ActivationRecord],
    dim: usize,
    path: impl AsRef<Path>,
) -> Result<u64> {
    write_activation_file(records, dim, File::create(path)?)
}

/// Streaming reader: holds one record buffer at a time.
pub struct ActivationReader<R> {
    source: R,
    header: ActivationFileHeader,
    next: u64,
    buf: Vec<u8>,
    done: bool,
}

/// Parses the header and returns a lazy record iterator.
pub fn read_activation_file<R: Read>(mut source: R) -> Result<ActivationReader<R>> {
    let mut head = [0u8; ACTV_HEADER_LEN as usize];
    let got = read_fully(&mut source, &mut head)?;
    if got < head.len() {
        // Judge whatever magic bytes are present before reporting truncation.
        if got >= 8 && head[0..8] != ACTV_MAGIC || got < 8 && !ACTV_MAGIC.starts_with(&head[..got])
        {
            return Err(Error::format(0, "bad magic"));
        }
        return Err(Error::format(
            got as u64,
            format!("header truncated: {got} of {ACTV_HEADER_LEN} bytes"),
        ));
    }
    let header = ActivationFileHeader::decode(&head)?;
    let buf = vec![0u8; header.record_len() as usize];
    Ok(ActivationReader {
        source,
        header,
        next: 0,
        buf,
        done: false,
    })
}

pub fn open_activation_path(
    path: impl AsRef<Path>,
) -> Result<ActivationReader<BufReader<File>>> {
    read_activation_file(BufReader::new(File::open(path)?))
}

impl<R: Read> ActivationReader<R> {
    pub fn header(&self) -> ActivationFileHeader {
        self.header
    }

    /// Drains the iterator, checking record-key uniqueness on the way.
    pub fn read_all(self) -> Result<Vec<ActivationRecord>> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(self.header.record_count.min(1 << 20) as usize);
        for r in self {
            let r = r?;
            if !seen.insert(r.key()) {
                return Err(Error::DuplicateId(format!(
                    "{} at layer {}",
                    r.record_id, r.layer_index
                )));
            }
            out.push(r);
        }
        Ok(out)
    }

    fn read_record(&mut self) -> Result<ActivationRecord> {
        let index = self.next;
        let offset = ACTV_HEADER_LEN + index * self.header.record_len();
        let got = read_fully(&mut self.source, &mut self.buf)?;
        if got < self.buf.len() {
            return Err(Error::Truncated {
                record: index,
                expected: self.buf.len() as u64,
                actual: got as u64,
            });
        }
        let b = &self.buf;
        let record_id = u64::from_le_bytes(b[0..8].try_into().unwrap());
        let layer_index = u16::from_le_bytes(b[8..10].try_into().unwrap());
        let model_tag = u16::from_le_bytes(b[10..12].try_into().unwrap());
        let flags = u32::from_le_bytes(b[12..16].try_into().unwrap());
        if flags != 0 {
            return Err(Error::format(
                offset + 12,
                format!("record {index}: nonzero flags {flags:#x}"),
            ));
        }
        let mut hidden = Vec::with_capacity(self.header.hidden_dim as usize);
        for (j, c) in b[16..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(
                    offset + 16 + 4 * j as u64,
                    format!("record {index}: non-finite hidden[{j}]"),
                ));
            }
            hidden.push(v);
        }
        Ok(ActivationRecord {
            record_id,
            layer_index,
            model_tag,
            hidden,
        })
    }

    fn check_trailing(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if read_fully(&mut self.source, &mut probe)? != 0 {
            return Err(Error::format(
                self.header.file_len(),
                "trailing bytes after the declared records",
            ));
        }
        Ok(())
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.header.record_count {
            self.done = true;
            return self.check_trailing().err().map(Err);
        }
        let r = self.read_record();
        self.next += 1;
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

/// Like `read_exact`, but reports how many bytes arrived before EOF.
fn read_fully<R: Read>(source: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
