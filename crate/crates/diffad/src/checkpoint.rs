//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DIFFADCK" | u32 version | u32 header length | header (JSON)
//! u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | u32 dims[rank] | f32 values
//! SHA-256 of everything above (32 bytes)
//! ```

use std::path::Path;

use diffad_core::numerics::Tensor;
use diffad_core::unet::{UNetConfig, UNetModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 8] = b"DIFFADCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Every field of [`UNetConfig`], in a serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfigRecord {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
    pub attention_levels: Vec<bool>,
    pub mid_attention: bool,
    pub patch_size: usize,
    pub timesteps: usize,
}

impl From<&UNetConfig> for UNetConfigRecord {
    fn from(c: &UNetConfig) -> Self {
        UNetConfigRecord {
            in_channels: c.in_channels,
            base_channels: c.base_channels,
            channel_multipliers: c.channel_multipliers.clone(),
            time_embed_dim: c.time_embed_dim,
            groups: c.groups,
            attention_levels: c.attention_levels.clone(),
            mid_attention: c.mid_attention,
            patch_size: c.patch_size,
            timesteps: c.timesteps,
        }
    }
}

impl From<&UNetConfigRecord> for UNetConfig {
    fn from(r: &UNetConfigRecord) -> Self {
        UNetConfig {
            in_channels: r.in_channels,
            base_channels: r.base_channels,
            channel_multipliers: r.channel_multipliers.clone(),
            time_embed_dim: r.time_embed_dim,
            groups: r.groups,
            attention_levels: r.attention_levels.clone(),
            mid_attention: r.mid_attention,
            patch_size: r.patch_size,
            timesteps: r.timesteps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub unet: UNetConfigRecord,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Seed the weights were initialized from.
    pub init_seed: u64,
    pub train_seed: u64,
    pub steps: u64,
    pub epochs_completed: usize,
}

pub fn encode(header: &CheckpointHeader, model: &UNetModel) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("checkpoint header always serializes");
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.parameter_count() + 64 * model.parameters().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for (name, t) in model.named_parameters() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("unexpected end of file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(CheckpointHeader, UNetModel), String> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint file (bad magic)".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch; the file is truncated or corrupted".into());
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        ));
    }
    let header_len = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("bad header: {e}"))?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("bad tensor name: {e}"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
        named.push((name, t));
    }
    if r.pos != body.len() {
        return Err(format!("{} trailing bytes after the last tensor", body.len() - r.pos));
    }
    let model = UNetModel::from_named(UNetConfig::from(&header.unet), named).map_err(|e| e.to_string())?;
    Ok((header, model))
}

pub fn save(path: &Path, header: &CheckpointHeader, model: &UNetModel) -> Result<()> {
    write_atomic(path, &encode(header, model))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, UNetModel)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|m| CliError::format(path, m))
}
