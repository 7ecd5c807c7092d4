//! Binary trace file, little-endian:
//!
//! ```text
//! "TTRC" u16 version=1 u16 flags=0 u32 header_len header_json
//! per record:
//!   u8 type=1 | u32 len + canonical id | 6×u16 rank (dp,tp,pp,vp,cp,sp)
//!   u16 replica_group_size | u32 len + module class | u8 dtype=0 | u8 ndim
//!   ndim×u64 dims | u16 pairs | per pair: global box then local box,
//!   each ndim×(u64 start, u64 stop) | u64 payload bytes | f32 payload
//! "CRTT"
//! ```

use std::path::Path;

use super::{RankMeta, Trace, TraceError, TraceRecord};
use crate::canonical::{BoxPair, CanonicalId, ShardMapping, SliceBox};

pub const MAGIC: &[u8; 4] = b"TTRC";
pub const TRAILER: &[u8; 4] = b"CRTT";
pub const VERSION: u16 = 1;
const RECORD_TENSOR: u8 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    put_str32(&mut out, &trace.header_json);
    for r in &trace.records {
        out.push(RECORD_TENSOR);
        put_str32(&mut out, &r.id.encode());
        for v in r.rank.as_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.replica_group_size.to_le_bytes());
        put_str32(&mut out, &r.module_class);
        out.push(DTYPE_F32);
        out.push(r.shape.len() as u8);
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(r.mapping.pairs.len() as u16).to_le_bytes());
        for p in &r.mapping.pairs {
            for b in [&p.global, &p.local] {
                for &(s, e) in &b.0 {
                    out.extend_from_slice(&(s as u64).to_le_bytes());
                    out.extend_from_slice(&(e as u64).to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&((r.payload.len() * 4) as u64).to_le_bytes());
        for v in &r.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(TRAILER);
    out
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> TraceError {
        TraceError::Format { offset: self.pos as u64, reason: reason.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        if self.buf.len() - self.pos < n {
            return Err(TraceError::Format { offset: self.buf.len() as u64, reason: "unexpected end of file".into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TraceError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, TraceError> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| TraceError::Format { offset: at as u64, reason: "value exceeds address space".into() })
    }

    fn str32(&mut self) -> Result<String, TraceError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| TraceError::Format { offset: at as u64, reason: "invalid UTF-8".into() })
    }
}

pub fn decode(buf: &[u8]) -> Result<Trace, TraceError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        r.pos -= 2;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let flags = r.u16()?;
    if flags != 0 {
        r.pos -= 2;
        return Err(r.fail(format!("unsupported flags {flags:#x}")));
    }
    let header_json = r.str32()?;
    let mut records = Vec::new();
    loop {
        let at = r.pos;
        if buf.len() - r.pos >= 4 && &buf[r.pos..r.pos + 4] == TRAILER {
            r.pos += 4;
            if r.pos != buf.len() {
                return Err(r.fail("trailing bytes after end marker"));
            }
            break;
        }
        if buf.len() - r.pos < 4 && TRAILER.starts_with(&buf[r.pos..]) {
            return Err(TraceError::Format { offset: buf.len() as u64, reason: "unexpected end of file".into() });
        }
        let ty = r.u8()?;
        if ty != RECORD_TENSOR {
            r.pos = at;
            return Err(r.fail(format!("unknown record type {ty}")));
        }
        records.push(read_record(&mut r)?);
    }
    Ok(Trace { header_json, records })
}

fn read_record(r: &mut Reader<'_>) -> Result<TraceRecord, TraceError> {
    let at = r.pos;
    let id_str = r.str32()?;
    let id: CanonicalId = id_str.parse().map_err(|_| TraceError::Format {
        offset: at as u64,
        reason: format!("malformed canonical id {id_str:?}"),
    })?;
    let mut rank = [0u16; 6];
    for v in &mut rank {
        *v = r.u16()?;
    }
    let replica_group_size = r.u16()?;
    let module_class = r.str32()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        r.pos -= 1;
        return Err(r.fail(format!("unsupported dtype tag {dtype}")));
    }
    let ndim = r.u8()? as usize;
    if ndim == 0 {
        return Err(r.fail("zero-dimensional record"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.usize()?);
    }
    let npairs = r.u16()? as usize;
    let mut pairs = Vec::with_capacity(npairs);
    for _ in 0..npairs {
        let mut boxes = [Vec::with_capacity(ndim), Vec::with_capacity(ndim)];
        for b in &mut boxes {
            for _ in 0..ndim {
                let s = r.usize()?;
                let e = r.usize()?;
                b.push((s, e));
            }
        }
        let [global, local] = boxes;
        pairs.push(BoxPair { local: SliceBox(local), global: SliceBox(global) });
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.fail("shape overflows"))?;
    let nbytes = r.usize()?;
    if nbytes != count * 4 {
        r.pos -= 8;
        return Err(r.fail(format!("payload length {nbytes} does not match shape {shape:?}")));
    }
    let bytes = r.take(nbytes)?;
    let payload = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let global_shape = global_extent(&pairs, &shape);
    Ok(TraceRecord {
        id,
        rank: RankMeta::from_array(rank),
        mapping: ShardMapping { local_shape: shape.clone(), global_shape, pairs },
        replica_group_size,
        module_class,
        shape,
        payload,
    })
}

/// The format stores only the boxes; the logical shape is their bounding extent.
fn global_extent(pairs: &[BoxPair], local: &[usize]) -> Vec<usize> {
    (0..local.len())
        .map(|d| pairs.iter().map(|p| p.global.0[d].1).max().unwrap_or(local[d]))
        .collect()
}

pub fn write_file(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    std::fs::write(path, encode(trace))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Trace, TraceError> {
    decode(&std::fs::read(path)?)
}
