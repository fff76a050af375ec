//! Network config files and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic  b"DRCK"        4 bytes
//! version u32           = 1
//! config_hash [u8; 8]   first 8 bytes of SHA-256 over the config text
//! config_len u32, config text (TOML, UTF-8)
//! n_arrays u32, then n_arrays × u32 array lengths
//! parameter values as f32, arrays in declared order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{MultiscaleConfig, Network, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRCK";
const VERSION: u32 = 1;

pub fn config_hash(config_text: &str) -> [u8; 8] {
    let digest = Sha256::digest(config_text.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

pub fn config_hash_hex(config: &MultiscaleConfig) -> String {
    config_hash(&config.to_toml())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn read_config(path: &Path) -> Result<MultiscaleConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MultiscaleConfig::from_toml(&text)
}

pub fn write_config(path: &Path, config: &MultiscaleConfig) -> Result<()> {
    fs::write(path, config.to_toml()).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(network: &Network, params: &NetworkParams) -> Result<Vec<u8>> {
    if !params.same_layout(&network.zero_params()) {
        return Err(Error::Checkpoint("parameters do not match the network layout".into()));
    }
    let text = network.config().to_toml();
    let mut out = Vec::with_capacity(64 + text.len() + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash(&text));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.num_arrays() as u32).to_le_bytes());
    for a in params.arrays() {
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
    }
    for a in params.arrays() {
        for &v in a {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file and a rename so a reader never sees a partial file.
pub fn save_checkpoint(path: &Path, network: &Network, params: &NetworkParams) -> Result<()> {
    let bytes = encode_checkpoint(network, params)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, NetworkParams)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash: [u8; 8] = cur.take(8)?.try_into().unwrap();
    let len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    if config_hash(text) != hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let network = Network::new(MultiscaleConfig::from_toml(text)?)?;
    let n = cur.u32()? as usize;
    if n != network.array_sizes().len() {
        return Err(Error::Checkpoint(format!(
            "{n} arrays stored, network declares {}",
            network.array_sizes().len()
        )));
    }
    let mut lens = Vec::with_capacity(n);
    for _ in 0..n {
        lens.push(cur.u32()? as usize);
    }
    if lens != network.array_sizes() {
        return Err(Error::Checkpoint("array sizes do not match the config".into()));
    }
    let mut params = network.zero_params();
    for (a, &len) in params.arrays_mut().iter_mut().zip(&lens) {
        let raw = cur.take(4 * len)?;
        for (v, c) in a.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((network, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, NetworkParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
