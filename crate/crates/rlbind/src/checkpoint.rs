//! Bit-exact binary checkpoint container.
//!
//! Layout: magic bytes `RLBD`, `u32` little-endian version (currently 1),
//! `u32` little-endian manifest byte length, the UTF-8 manifest, then every
//! tensor's values as contiguous little-endian `f64`s in manifest order.
//!
//! The manifest is line-oriented. A line starting with `# ` carries one
//! metadata entry (`# key value`); any other line names a tensor followed by
//! its extents (`enc.layer0.weight 64 32`). Order is preserved on both kinds,
//! so serialize → parse → serialize reproduces the input bytes exactly —
//! checkpoints can be compared by hash.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLBD";
pub const VERSION: u32 = 1;

/// Named tensors plus string metadata, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a metadata entry. Keys must be single tokens; values must not
    /// contain newlines.
    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(bad(format!("invalid metadata key {key:?}")));
        }
        if value.contains('\n') {
            return Err(bad(format!("metadata value for {key:?} contains a newline")));
        }
        self.meta.push((key.to_string(), value.to_string()));
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn meta_entries(&self) -> &[(String, String)] {
        &self.meta
    }

    /// Append a named tensor. Names must be single tokens not starting
    /// with `#`, unique within the checkpoint.
    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) || name.starts_with('#') {
            return Err(bad(format!("invalid tensor name {name:?}")));
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(bad(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    fn manifest(&self) -> String {
        let mut m = String::new();
        for (k, v) in &self.meta {
            m.push_str("# ");
            m.push_str(k);
            m.push(' ');
            m.push_str(v);
            m.push('\n');
        }
        for (name, t) in &self.tensors {
            m.push_str(name);
            for &e in t.shape() {
                m.push(' ');
                m.push_str(&e.to_string());
            }
            m.push('\n');
        }
        m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = self.manifest();
        let mlen: u32 = manifest
            .len()
            .try_into()
            .map_err(|_| bad("manifest exceeds u32 length"))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&mlen.to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(bad("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[0..4],
                MAGIC
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 12 + mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest = std::str::from_utf8(&bytes[12..12 + mlen])
            .map_err(|e| bad(format!("manifest is not UTF-8: {e}")))?;

        let mut ckpt = Checkpoint::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in manifest.lines() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("malformed metadata line {line:?}")))?;
                ckpt.set_meta(k, v)?;
                continue;
            }
            let mut toks = line.split(' ');
            let name = toks.next().expect("split yields at least one token");
            let shape: Vec<usize> = toks
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| bad(format!("bad extent {t:?} in line {line:?}")))
                })
                .collect::<Result<_>>()?;
            if shape.is_empty() {
                return Err(bad(format!("tensor line {line:?} has no extents")));
            }
            shapes.push((name.to_string(), shape));
        }

        let mut offset = 12 + mlen;
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(n * 8)
                .ok_or_else(|| bad("payload length overflow"))?;
            if bytes.len() < end {
                return Err(bad(format!("truncated payload for tensor {name:?}")));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| bad(format!("tensor {name:?} invalid: {e}")))?;
            ckpt.push(&name, t)?;
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!(
                "{} trailing bytes after payload",
                bytes.len() - offset
            )));
        }
        Ok(ckpt)
    }

    /// Write atomically: serialize to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Write a file atomically: a sibling `.tmp` first, fsync, then rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
