//! Recorded query/key/value traces and the `KVTR` binary format.
//!
//! All integers and floats are little-endian. Layout (version 1):
//!
//! ```text
//! "KVTR"            4 bytes magic
//! version           u16 (= 1)
//! layers            u32
//! heads             u32
//! head_dim          u32
//! t_input           u32
//! t_response        u32
//! vocab             u32
//! section_count     u32
//! provenance_len    u32
//! provenance        provenance_len bytes, UTF-8
//! payload_len       u64   byte length of the section block
//! sections          section_count × section
//! checksum          u64   FNV-1a 64 over the section block
//!
//! section:
//!   name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = u32),
//!   rows u32, cols u32, rows·cols × 4 bytes row-major
//! ```
//!
//! Section names: `tokens.input` (1 × t_input, u32), `tokens.response`
//! (1 × t_response, u32), and per layer `l` / head `h`:
//! `L{l}.H{h}.q_input` (t_input × head_dim), `L{l}.H{h}.q_response`
//! (t_response × head_dim), `L{l}.H{h}.keys` and `L{l}.H{h}.values`
//! (t_input × head_dim), all f32. Queries and keys are the post-rotary
//! tensors attention consumes.
//!
//! Model weights use the same section encoding under magic `KVWT`; see
//! [`encode_weights`].

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{shape, Result};
use crate::grid::HeadGrid;
use crate::kvcache::QCache;
use crate::model::{ModelConfig, ModelState, TokenId};
use crate::tensor::Mat;

pub const TRACE_MAGIC: &[u8; 4] = b"KVTR";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"KVWT";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U32: u8 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncation: header declares {declared} bytes, {available} present")]
    Truncated { declared: u64, available: u64 },
    #[error("shape mismatch in {section}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { section: String, expected: (usize, usize), found: (usize, usize) },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    /// Stable short code per error class.
    pub fn code(&self) -> &'static str {
        match self {
            Self::BadMagic(_) => "bad_magic",
            Self::UnsupportedVersion(_) => "unsupported_version",
            Self::Truncated { .. } => "truncated",
            Self::ShapeMismatch { .. } => "shape_mismatch",
            Self::ChecksumMismatch { .. } => "checksum_mismatch",
            Self::Malformed(_) => "malformed",
            Self::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub t_input: usize,
    pub t_response: usize,
    pub vocab: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    pub meta: TraceMeta,
    pub input_queries: HeadGrid<Mat>,
    pub response_queries: HeadGrid<Mat>,
    pub keys: HeadGrid<Mat>,
    pub values: HeadGrid<Mat>,
    pub input_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
}

impl TraceBundle {
    /// Checks every tensor against `meta`.
    pub fn validate(&self) -> Result<(), TraceError> {
        let m = &self.meta;
        let check = |name: &str, grid: &HeadGrid<Mat>, rows: usize| -> Result<(), TraceError> {
            if grid.layers() != m.layers || grid.heads() != m.heads {
                return Err(TraceError::Malformed(format!("{name} grid is {}x{}", grid.layers(), grid.heads())));
            }
            for (l, h, t) in grid.iter() {
                if (t.rows(), t.cols()) != (rows, m.head_dim) {
                    return Err(TraceError::ShapeMismatch {
                        section: format!("L{l}.H{h}.{name}"),
                        expected: (rows, m.head_dim),
                        found: (t.rows(), t.cols()),
                    });
                }
            }
            Ok(())
        };
        check("q_input", &self.input_queries, m.t_input)?;
        check("q_response", &self.response_queries, m.t_response)?;
        check("keys", &self.keys, m.t_input)?;
        check("values", &self.values, m.t_input)?;
        for (name, toks, n) in [
            ("tokens.input", &self.input_tokens, m.t_input),
            ("tokens.response", &self.response_tokens, m.t_response),
        ] {
            if toks.len() != n {
                return Err(TraceError::ShapeMismatch {
                    section: name.into(),
                    expected: (1, n),
                    found: (1, toks.len()),
                });
            }
        }
        Ok(())
    }

    /// The first `steps` response queries as a Q-cache (positions `t_input..`).
    pub fn response_qcache(&self, steps: usize) -> Result<QCache> {
        let steps = steps.min(self.meta.t_response);
        let queries = self.response_queries.try_map(|_, _, q| q.slice_rows(0, steps))?;
        let t = self.meta.t_input;
        QCache::new(queries, (t..t + steps).collect(), t)
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

enum SectionData {
    F32(Mat),
    U32 { rows: usize, cols: usize, data: Vec<u32> },
}

fn put_section_header(out: &mut Vec<u8>, name: &str, dtype: u8, rows: usize, cols: usize) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, name: &str, m: &Mat) {
    put_section_header(out, name, DTYPE_F32, m.rows(), m.cols());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_u32(out: &mut Vec<u8>, name: &str, v: &[u32]) {
    put_section_header(out, name, DTYPE_U32, 1, v.len());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TraceError> {
        if self.buf.len() - self.pos < n {
            return Err(TraceError::Truncated {
                declared: (self.pos + n) as u64,
                available: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TraceError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, TraceError> {
        Ok(self.u32()? as usize)
    }
    fn string(&mut self, n: usize) -> Result<String, TraceError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| TraceError::Malformed(format!("utf-8: {e}")))
    }
}

fn read_section(c: &mut Cursor<'_>) -> Result<(String, SectionData), TraceError> {
    let name_len = c.u16()? as usize;
    let name = c.string(name_len)?;
    let dtype = c.u8()?;
    let rows = c.usize()?;
    let cols = c.usize()?;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TraceError::Malformed(format!("{name}: size overflow")))?;
    let raw = c.take(n)?;
    let data = match dtype {
        DTYPE_F32 => {
            let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
            let m = Mat::new(rows, cols, vals).map_err(|e| TraceError::Malformed(format!("{name}: {e}")))?;
            SectionData::F32(m)
        }
        DTYPE_U32 => SectionData::U32 {
            rows,
            cols,
            data: raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4"))).collect(),
        },
        other => return Err(TraceError::Malformed(format!("{name}: unknown dtype {other}"))),
    };
    Ok((name, data))
}

/// Splits framing shared by both file kinds: returns (header cursor state,
/// section map). `header` parses the kind-specific header and yields the
/// section count.
fn read_framed<'a, H>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    header: impl FnOnce(&mut Cursor<'a>) -> Result<(H, usize), TraceError>,
) -> Result<(H, HashMap<String, SectionData>), TraceError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let m: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if &m != magic {
        return Err(TraceError::BadMagic(m));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let (head, count) = header(&mut c)?;
    let payload_len = c.u64()?;
    let start = c.pos;
    let available = (bytes.len() - start) as u64;
    if payload_len.checked_add(8) != Some(available) {
        return Err(TraceError::Truncated {
            declared: payload_len.saturating_add(8),
            available,
        });
    }
    let payload = &bytes[start..start + payload_len as usize];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(TraceError::ChecksumMismatch { stored, computed });
    }
    let mut pc = Cursor { buf: payload, pos: 0 };
    let mut sections = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, data) = read_section(&mut pc)?;
        if sections.insert(name.clone(), data).is_some() {
            return Err(TraceError::Malformed(format!("duplicate section {name}")));
        }
    }
    if pc.pos != payload.len() {
        return Err(TraceError::Malformed(format!(
            "{} trailing payload bytes after {count} sections",
            payload.len() - pc.pos
        )));
    }
    Ok((head, sections))
}

fn frame(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + payload.len() + 22);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&fnv1a64(payload).to_le_bytes());
    out
}

fn take_f32(
    sections: &mut HashMap<String, SectionData>,
    name: &str,
    expected: (usize, usize),
) -> Result<Mat, TraceError> {
    match sections.remove(name) {
        Some(SectionData::F32(m)) => {
            if (m.rows(), m.cols()) != expected {
                return Err(TraceError::ShapeMismatch {
                    section: name.into(),
                    expected,
                    found: (m.rows(), m.cols()),
                });
            }
            Ok(m)
        }
        Some(SectionData::U32 { .. }) => Err(TraceError::Malformed(format!("{name}: expected f32 data"))),
        None => Err(TraceError::Malformed(format!("missing section {name}"))),
    }
}

fn take_u32(sections: &mut HashMap<String, SectionData>, name: &str, len: usize) -> Result<Vec<u32>, TraceError> {
    match sections.remove(name) {
        Some(SectionData::U32 { rows, cols, data }) => {
            if (rows, cols) != (1, len) {
                return Err(TraceError::ShapeMismatch { section: name.into(), expected: (1, len), found: (rows, cols) });
            }
            Ok(data)
        }
        Some(SectionData::F32(_)) => Err(TraceError::Malformed(format!("{name}: expected u32 data"))),
        None => Err(TraceError::Malformed(format!("missing section {name}"))),
    }
}

pub fn encode_trace(bundle: &TraceBundle) -> Result<Vec<u8>, TraceError> {
    bundle.validate()?;
    let m = &bundle.meta;
    let mut payload = Vec::new();
    put_u32(&mut payload, "tokens.input", &bundle.input_tokens);
    put_u32(&mut payload, "tokens.response", &bundle.response_tokens);
    for l in 0..m.layers {
        for h in 0..m.heads {
            put_f32(&mut payload, &format!("L{l}.H{h}.q_input"), bundle.input_queries.get(l, h));
            put_f32(&mut payload, &format!("L{l}.H{h}.q_response"), bundle.response_queries.get(l, h));
            put_f32(&mut payload, &format!("L{l}.H{h}.keys"), bundle.keys.get(l, h));
            put_f32(&mut payload, &format!("L{l}.H{h}.values"), bundle.values.get(l, h));
        }
    }
    let mut header = Vec::new();
    let sections = 2 + 4 * m.layers * m.heads;
    for v in [m.layers, m.heads, m.head_dim, m.t_input, m.t_response, m.vocab, sections, m.provenance.len()] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    header.extend_from_slice(m.provenance.as_bytes());
    Ok(frame(TRACE_MAGIC, &header, &payload))
}

pub fn decode_trace(bytes: &[u8]) -> Result<TraceBundle, TraceError> {
    let (meta, mut sections) = read_framed(bytes, TRACE_MAGIC, |c| {
        let layers = c.usize()?;
        let heads = c.usize()?;
        let head_dim = c.usize()?;
        let t_input = c.usize()?;
        let t_response = c.usize()?;
        let vocab = c.usize()?;
        let count = c.usize()?;
        let prov_len = c.usize()?;
        let provenance = c.string(prov_len)?;
        Ok((TraceMeta { layers, heads, head_dim, t_input, t_response, vocab, provenance }, count))
    })?;
    let input_tokens = take_u32(&mut sections, "tokens.input", meta.t_input)?;
    let response_tokens = take_u32(&mut sections, "tokens.response", meta.t_response)?;
    let d = meta.head_dim;
    let mut grid = |suffix: &str, rows: usize| {
        HeadGrid::try_from_fn(meta.layers, meta.heads, |l, h| {
            take_f32(&mut sections, &format!("L{l}.H{h}.{suffix}"), (rows, d))
        })
    };
    let input_queries = grid("q_input", meta.t_input)?;
    let response_queries = grid("q_response", meta.t_response)?;
    let keys = grid("keys", meta.t_input)?;
    let values = grid("values", meta.t_input)?;
    if let Some(extra) = sections.keys().next() {
        return Err(TraceError::Malformed(format!("unexpected section {extra}")));
    }
    Ok(TraceBundle { meta, input_queries, response_queries, keys, values, input_tokens, response_tokens })
}

pub fn write_trace(bundle: &TraceBundle, path: impl AsRef<Path>) -> Result<(), TraceError> {
    std::fs::write(path, encode_trace(bundle)?)?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceBundle, TraceError> {
    decode_trace(&std::fs::read(path)?)
}

/// Weights under magic `KVWT`: header `vocab, layers, heads, head_dim,
/// mlp_mult, max_pos, rope_enabled, section_count` (u32 each), `seed` (u64),
/// then the framed section block with tensors named as in the model layout.
pub fn encode_weights(model: &ModelState) -> Vec<u8> {
    let c = model.config();
    let tensors = model.named_tensors();
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        put_f32(&mut payload, name, m);
    }
    let mut header = Vec::new();
    for v in [c.vocab, c.layers, c.heads, c.head_dim, c.mlp_mult, c.max_pos, c.rope_enabled as usize, tensors.len()] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    header.extend_from_slice(&c.seed.to_le_bytes());
    frame(WEIGHTS_MAGIC, &header, &payload)
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelState, TraceError> {
    let (config, sections) = read_framed(bytes, WEIGHTS_MAGIC, |c| {
        let vocab = c.usize()?;
        let layers = c.usize()?;
        let heads = c.usize()?;
        let head_dim = c.usize()?;
        let mlp_mult = c.usize()?;
        let max_pos = c.usize()?;
        let rope_enabled = c.u32()? != 0;
        let count = c.usize()?;
        let seed = c.u64()?;
        Ok((ModelConfig { vocab, layers, heads, head_dim, mlp_mult, max_pos, seed, rope_enabled }, count))
    })?;
    let mut tensors = Vec::with_capacity(sections.len());
    for (name, data) in sections {
        match data {
            SectionData::F32(m) => tensors.push((name, m)),
            SectionData::U32 { .. } => return Err(TraceError::Malformed(format!("{name}: expected f32 data"))),
        }
    }
    ModelState::from_named_tensors(config, tensors).map_err(|e| match e {
        crate::Error::Shape(s) => TraceError::Malformed(format!("shape: {s}")),
        other => TraceError::Malformed(other.to_string()),
    })
}

pub fn write_weights(model: &ModelState, path: impl AsRef<Path>) -> Result<(), TraceError> {
    std::fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ModelState, TraceError> {
    decode_weights(&std::fs::read(path)?)
}

/// Records a toy-model run as a trace: prefill queries/keys/values plus the
/// queries of `response_len` greedily generated tokens over the full cache.
pub fn record_model_trace(model: &ModelState, prompt: &[TokenId], response_len: usize) -> Result<TraceBundle> {
    let pre = model.prefill(prompt)?;
    let (tokens, outs) = model.generate_full(&pre, response_len)?;
    let c = model.config();
    let response_queries = HeadGrid::try_from_fn(c.layers, c.heads, |l, h| {
        let rows: Vec<&[f32]> = outs.iter().map(|o| o.queries.get(l, h).as_slice()).collect();
        if rows.is_empty() {
            Ok(Mat::zeros(0, c.head_dim))
        } else {
            Mat::from_rows(&rows)
        }
    })?;
    let bundle = TraceBundle {
        meta: TraceMeta {
            layers: c.layers,
            heads: c.heads,
            head_dim: c.head_dim,
            t_input: prompt.len(),
            t_response: response_len,
            vocab: c.vocab,
            provenance: format!("toy-model seed={} L={} H={} d_h={}", c.seed, c.layers, c.heads, c.head_dim),
        },
        input_queries: pre.queries.clone(),
        response_queries,
        keys: pre.cache.keys().clone(),
        values: pre.cache.values().clone(),
        input_tokens: prompt.to_vec(),
        response_tokens: tokens,
    };
    bundle.validate().map_err(|e| shape(e.to_string()))?;
    Ok(bundle)
}
