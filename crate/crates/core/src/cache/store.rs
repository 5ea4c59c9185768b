//! On-disk cache layout, all integers little-endian:
//!
//! ```text
//! magic    "ICSH"
//! version  u32 (= 1)
//! clock    u64
//! buckets  u32, then per bucket:
//!   l1       [u8; 32]
//!   entries  u32, then per entry:
//!     op         u8   (0 fill, 1 inference, 2 evaluation, 3 crossover, 4 mutation)
//!     l2         [u8; 32]
//!     created_at u64
//!     last_hit   u64
//!     hit_count  u64
//!     dim        u32  (0 = no embedding), then dim × f64
//!     payload    u32 length, then bytes
//! checksum [u8; 32]  SHA-256 of everything before it
//! ```

use super::{Bucket, CacheError, Entry, OpKind, State};
use crate::model::{content_key, CacheKey};

const MAGIC: &[u8; 4] = b"ICSH";
pub(super) const VERSION: u32 = 1;

pub(super) fn encode(state: &State) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.clock.to_le_bytes());
    out.extend_from_slice(&(state.buckets.len() as u32).to_le_bytes());
    for (l1, bucket) in &state.buckets {
        out.extend_from_slice(l1.as_bytes());
        out.extend_from_slice(&(bucket.entries.len() as u32).to_le_bytes());
        for e in bucket.entries.values() {
            out.push(e.op.code());
            out.extend_from_slice(e.key.as_bytes());
            for v in [e.created_at, e.last_hit, e.hit_count] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let emb = e.embedding.as_deref().unwrap_or(&[]);
            out.extend_from_slice(&(emb.len() as u32).to_le_bytes());
            for x in emb {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.payload);
        }
    }
    let sum = content_key(&out);
    out.extend_from_slice(sum.as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CacheError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CacheError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CacheError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CacheError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn key(&mut self) -> Result<CacheKey, CacheError> {
        Ok(CacheKey::from_bytes(self.take(32)?.try_into().unwrap()))
    }
}

fn corrupt(msg: &str) -> CacheError {
    CacheError::Corrupt(msg.into())
}

pub(super) fn decode(bytes: &[u8]) -> Result<State, CacheError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CacheError::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < 8 + 32 {
        return Err(corrupt("truncated"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if content_key(body).as_bytes() != sum {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let mut state = State { clock: r.u64()?, ..State::default() };
    let n_buckets = r.u32()?;
    for _ in 0..n_buckets {
        let l1 = r.key()?;
        let mut bucket = Bucket::default();
        let n = r.u32()?;
        for _ in 0..n {
            let op = OpKind::from_code(r.u8()?).ok_or_else(|| corrupt("unknown op kind"))?;
            let key = r.key()?;
            let (created_at, last_hit, hit_count) = (r.u64()?, r.u64()?, r.u64()?);
            let dim = r.u32()? as usize;
            let embedding = if dim == 0 { None } else { Some((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?) };
            let len = r.u32()? as usize;
            let payload = r.take(len)?.to_vec();
            bucket.entries.insert((op, key), Entry { op, key, embedding, payload, created_at, last_hit, hit_count });
        }
        state.buckets.insert(l1, bucket);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(state)
}
