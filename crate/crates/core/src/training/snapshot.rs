//! Binary snapshot files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SNAPNAV1"                  8 bytes
//! format version              u32
//! metadata length             u32
//! metadata                    JSON: snapshot id, variant, dims
//! period index                u32
//! iteration                   u64
//! validation SR               f64
//! config fingerprint          u64
//! parameter count             u64
//! parameters                  f32 × count, in layout block order, row-major
//! CRC-32 of all bytes above   u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Layout, PolicyDims, PolicyParams, Variant};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"SNAPNAV1";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters saved at one validation point.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub snapshot_id: String,
    pub params: PolicyParams,
    pub period_index: usize,
    pub iteration: usize,
    pub val_sr: f64,
    pub config_fingerprint: u64,
    pub format_version: u32,
}

impl Snapshot {
    pub fn variant(&self) -> Variant {
        self.params.variant
    }

    /// `{variant}_m{M}_p{period}`; sorts by variant, then period.
    pub fn make_id(variant: Variant, periods: usize, period_index: usize) -> String {
        format!("{variant}_m{periods:02}_p{period_index:02}")
    }
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    snapshot_id: String,
    variant: Variant,
    dims: PolicyDims,
}

pub fn encode_snapshot(s: &Snapshot) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        snapshot_id: s.snapshot_id.clone(),
        variant: s.params.variant,
        dims: s.params.dims,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(s.period_index as u32).to_le_bytes());
    out.extend_from_slice(&(s.iteration as u64).to_le_bytes());
    out.extend_from_slice(&s.val_sr.to_le_bytes());
    out.extend_from_slice(&s.config_fingerprint.to_le_bytes());
    let count = s.params.parameter_count();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (block, spec) in s.params.blocks.iter().zip(&s.params.layout().specs) {
        for &x in &block.data {
            let f = x as f32;
            if f as f64 != x {
                return Err(Error::SnapshotFormat(format!(
                    "block `{}` holds {x}, which is not exactly representable as f32",
                    spec.name
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::SnapshotFormat(format!("truncated: need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::SnapshotFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != FORMAT_VERSION {
        return Err(Error::SnapshotFormat(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if bytes.len() < r.pos + 4 {
        return Err(Error::SnapshotFormat("truncated: no checksum".into()));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: r.pos,
    };
    let meta_len = u32::from_le_bytes(r.array()?) as usize;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
    let period_index = u32::from_le_bytes(r.array()?) as usize;
    let iteration = u64::from_le_bytes(r.array()?) as usize;
    let val_sr = f64::from_le_bytes(r.array()?);
    let config_fingerprint = u64::from_le_bytes(r.array()?);
    let count = u64::from_le_bytes(r.array()?) as usize;

    meta.dims.validate()?;
    let layout = Layout::new(&meta.dims);
    if layout.parameter_count() != count {
        return Err(Error::SnapshotFormat(format!(
            "payload holds {count} parameters, dims imply {}",
            layout.parameter_count()
        )));
    }
    let mut blocks = Vec::with_capacity(layout.specs.len());
    for spec in &layout.specs {
        let raw = r.take(spec.rows * spec.cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        blocks.push(Matrix::from_vec(spec.rows, spec.cols, data));
    }
    if r.pos != body_len {
        return Err(Error::SnapshotFormat(format!(
            "{} trailing bytes after payload",
            body_len - r.pos
        )));
    }
    Ok(Snapshot {
        snapshot_id: meta.snapshot_id,
        params: PolicyParams::from_blocks(meta.variant, meta.dims, blocks)?,
        period_index,
        iteration,
        val_sr,
        config_fingerprint,
        format_version: version,
    })
}

pub fn save_snapshot(s: &Snapshot, path: &Path) -> Result<()> {
    let bytes = encode_snapshot(s)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes)
}
