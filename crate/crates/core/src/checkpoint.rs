//! Named-tensor checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSAT"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 rank, rank × u32 extent,
//!           u8 dtype, payload }
//! u32 CRC32 of every preceding byte
//! ```
//!
//! dtype 0 is f32, 1 is f64 and 2 is raw bytes (used for the embedded
//! network configuration).

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CSAT";
pub const VERSION: u32 = 1;
pub const DTYPE_BYTES: u8 = 2;
/// Name of the record holding the network configuration as JSON.
pub const CONFIG_RECORD: &str = "__net_config__";

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_header(out: &mut Vec<u8>, name: &str, extents: &[usize], dtype: u8) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, extents.len())?;
    for &e in extents {
        put_u32(out, e)?;
    }
    out.push(dtype);
    Ok(())
}

/// Serialises parameters plus an optional configuration record.
pub fn encode<T: Scalar>(store: &ParamStore<T>, config: Option<&NetConfig>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, store.len() + usize::from(config.is_some()))?;
    if let Some(cfg) = config {
        let json = serde_json::to_vec(cfg)?;
        put_header(&mut out, CONFIG_RECORD, &[json.len()], DTYPE_BYTES)?;
        out.extend_from_slice(&json);
    }
    for (name, t) in store.iter() {
        put_header(&mut out, name, t.shape(), T::DTYPE)?;
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

fn read_values<T: Scalar>(r: &mut Reader<'_>, extents: Vec<usize>) -> Result<Tensor<T>> {
    let width = std::mem::size_of::<T>();
    let n: usize = extents.iter().product();
    let raw = r.take(
        n.checked_mul(width)
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
    )?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(extents, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses an archive, validating magic, version and checksum.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Record)>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("archive too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let extents = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let record = match r.take(1)?[0] {
            0 => Record::F32(read_values(&mut r, extents)?),
            1 => Record::F64(read_values(&mut r, extents)?),
            DTYPE_BYTES => Record::Bytes(r.take(extents.iter().product())?.to_vec()),
            d => return Err(Error::Checkpoint(format!("unknown dtype {d} for {name}"))),
        };
        out.push((name, record));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes before checksum".into()));
    }
    Ok(out)
}

/// Parameters and configuration restored from an archive.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Option<NetConfig>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut config = None;
        let mut params = ParamStore::new();
        for (name, record) in decode(bytes)? {
            match record {
                Record::Bytes(b) if name == CONFIG_RECORD => config = Some(serde_json::from_slice(&b)?),
                Record::F32(t) => {
                    params.add(name, t);
                }
                Record::F64(t) => {
                    params.add(name, t.cast());
                }
                Record::Bytes(_) => return Err(Error::Checkpoint(format!("unexpected byte record {name}"))),
            }
        }
        Ok(Self { config, params })
    }
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, config: Option<&NetConfig>) -> Result<()> {
    let bytes = encode(store, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
