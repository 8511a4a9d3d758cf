//! Byte-level message and checkpoint codec.
//!
//! Everything on the wire is little-endian and length-prefixed; decoding
//! checks a four-byte magic, a format version, and that no bytes trail the
//! payload. The client update message deliberately has no field that could
//! carry raw samples or labels — only token matrices, the probe, and counts.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::probe::LinearProbe;

pub(crate) const WIRE_VERSION: u16 = 1;
pub(crate) const BANK_MAGIC: &[u8; 4] = b"FGPB";
pub(crate) const PROBE_MAGIC: &[u8; 4] = b"FGLP";
const BROADCAST_MAGIC: &[u8; 4] = b"FGBC";
const UPDATE_MAGIC: &[u8; 4] = b"FGCU";

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for v in m.data() {
        put_f64(out, *v);
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? == magic {
            Ok(())
        } else {
            Err(Error::BadMagic)
        }
    }

    pub(crate) fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn take_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn take_matrix(&mut self) -> Result<Matrix> {
        let rows = self.take_u32()? as usize;
        let cols = self.take_u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.take_f64()?);
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::TrailingBytes)
        }
    }
}

fn check_version(r: &mut Reader) -> Result<()> {
    let version = r.take_u16()?;
    if version != WIRE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

fn put_matrix_list(out: &mut Vec<u8>, list: &[Matrix]) {
    put_u32(out, list.len() as u32);
    for m in list {
        put_matrix(out, m);
    }
}

fn take_matrix_list(r: &mut Reader) -> Result<Vec<Matrix>> {
    let n = r.take_u32()? as usize;
    (0..n).map(|_| r.take_matrix()).collect()
}

/// Server-to-client state at the start of a round: the aggregated global
/// token matrices (one per class slot) and the aggregated probe.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastMsg {
    pub round: u32,
    pub global: Vec<Matrix>,
    pub probe: LinearProbe,
}

impl BroadcastMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BROADCAST_MAGIC);
        put_u16(&mut out, WIRE_VERSION);
        put_u32(&mut out, self.round);
        put_matrix_list(&mut out, &self.global);
        self.probe.write_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(BROADCAST_MAGIC)?;
        check_version(&mut r)?;
        let round = r.take_u32()?;
        let global = take_matrix_list(&mut r)?;
        let probe = LinearProbe::read_from(&mut r)?;
        r.finish()?;
        Ok(BroadcastMsg { round, global, probe })
    }
}

/// Client-to-server result of a round: updated global tokens, updated probe,
/// and the example counts used to weight the aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateMsg {
    pub client: u32,
    pub round: u32,
    pub global: Vec<Matrix>,
    pub probe: LinearProbe,
    pub prompt_examples: u64,
    pub probe_examples: u64,
}

impl ClientUpdateMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(UPDATE_MAGIC);
        put_u16(&mut out, WIRE_VERSION);
        put_u32(&mut out, self.client);
        put_u32(&mut out, self.round);
        put_matrix_list(&mut out, &self.global);
        self.probe.write_into(&mut out);
        put_u64(&mut out, self.prompt_examples);
        put_u64(&mut out, self.probe_examples);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(UPDATE_MAGIC)?;
        check_version(&mut r)?;
        let client = r.take_u32()?;
        let round = r.take_u32()?;
        let global = take_matrix_list(&mut r)?;
        let probe = LinearProbe::read_from(&mut r)?;
        let prompt_examples = r.take_u64()?;
        let probe_examples = r.take_u64()?;
        r.finish()?;
        Ok(ClientUpdateMsg { client, round, global, probe, prompt_examples, probe_examples })
    }
}
