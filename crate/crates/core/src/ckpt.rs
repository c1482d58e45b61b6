//! Versioned checkpoint container: magic string, format version, a key-value
//! config block, then named little-endian f32 arrays with explicit shapes,
//! closed by a CRC-32 of everything after the magic. Round-trips are
//! byte-exact.

use crate::error::{Result, SdError};
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 11] = b"SDFLOW-CKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Ordered key-value configuration block.
    pub config: Vec<(String, String)>,
    /// Ordered named arrays.
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint { config: Vec::new(), arrays: Vec::new() }
    }

    pub fn set_config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn get_config(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn config_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get_config(key)
            .ok_or_else(|| SdError::Parse(format!("missing config key {key:?}")))?;
        raw.parse()
            .map_err(|_| SdError::Parse(format!("config key {key:?} has unparseable value {raw:?}")))
    }

    pub fn add_array(&mut self, name: &str, t: Tensor<f32>) {
        assert!(!self.arrays.iter().any(|(n, _)| n == name), "duplicate array name {name:?}");
        self.arrays.push((name.to_string(), t));
    }

    pub fn get_array(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&VERSION.to_le_bytes());
        let mut config_block = String::new();
        for (k, v) in &self.config {
            config_block.push_str(k);
            config_block.push('=');
            config_block.push_str(v);
            config_block.push('\n');
        }
        body.extend_from_slice(&(config_block.len() as u32).to_le_bytes());
        body.extend_from_slice(config_block.as_bytes());
        body.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&body);
        let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(SdError::Io("checkpoint truncated before header".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(SdError::Io("bad magic: not a checkpoint file".into()));
        }
        let body = &bytes[MAGIC.len()..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32(body) != stored_crc {
            return Err(SdError::Io("checksum failure: checkpoint payload corrupted".into()));
        }

        let mut cur = Cursor { data: body, pos: 0 };
        let version = cur.u32()?;
        if version != VERSION {
            return Err(SdError::Io(format!("unknown checkpoint version {version}")));
        }
        let config_len = cur.u32()? as usize;
        let config_raw = cur.take(config_len)?;
        let config_text = std::str::from_utf8(config_raw)
            .map_err(|_| SdError::Parse("config block is not utf-8".into()))?;
        let mut config = Vec::new();
        for line in config_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SdError::Parse(format!("malformed config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }

        let n_arrays = cur.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays);
        for _ in 0..n_arrays {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| SdError::Parse("array name is not utf-8".into()))?
                .to_string();
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let mut data = Vec::with_capacity(numel);
            for chunk in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != body.len() {
            return Err(SdError::Io("trailing bytes after last array".into()));
        }
        Ok(Checkpoint { config, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| SdError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| SdError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(SdError::Io("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// CRC-32 (IEEE), table-driven.
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, e) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *e = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
