//! CKPT named-tensor container.
//!
//! Layout: `"CKPT"`, version `0x01`, little-endian `u32` entry count, then per
//! entry a `u16` name length, the UTF-8 name and a TNSR blob. A trailing
//! little-endian `u32` holds the CRC32 of every preceding byte.
//!
//! Text entries (configs, label maps) are stored as rank-1 tensors whose
//! elements are the UTF-8 bytes, so every entry stays a plain f32 TNSR blob.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tnsr;

pub const MAGIC: &[u8; 4] = b"CKPT";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("entry name too long ({} bytes)", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate checkpoint entry {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) -> Result<()> {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        // Tensors cannot be empty; "" is stored as a lone NUL byte.
        let data = if bytes.is_empty() { vec![0.0] } else { bytes };
        self.push(name, Tensor::new(vec![data.len()], data)?)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format(0, format!("checkpoint entry {name:?} missing")))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.require(name)?;
        let mut bytes = Vec::with_capacity(t.len());
        for &v in t.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::format(0, format!("entry {name:?} is not a text blob")));
            }
            bytes.push(v as u8);
        }
        if bytes == [0] {
            bytes.clear();
        }
        String::from_utf8(bytes)
            .map_err(|_| Error::format(0, format!("entry {name:?} is not valid UTF-8")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            tnsr::encode_into(tensor, &mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 1 + 4 + 4 {
            return Err(Error::format(bytes.len() as u64, "truncated CKPT file"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"CKPT\""));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(4, format!("unsupported version {:#04x}", bytes[4])));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end as u64,
                format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"),
            ));
        }
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = &bytes[..body_end];
        let mut pos = 9;
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            if pos + 2 > body.len() {
                return Err(Error::format(pos as u64, "truncated entry header"));
            }
            let len = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
            let name_at = pos + 2;
            if name_at + len > body.len() {
                return Err(Error::format(name_at as u64, "truncated entry name"));
            }
            let name = std::str::from_utf8(&body[name_at..name_at + len])
                .map_err(|_| Error::format(name_at as u64, "entry name is not UTF-8"))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::format(name_at as u64, format!("duplicate entry {name:?}")));
            }
            let blob_at = name_at + len;
            let (tensor, used) = tnsr::decode_prefix(&body[blob_at..], blob_at as u64)?;
            entries.push((name, tensor));
            pos = blob_at + used;
        }
        if pos != body.len() {
            return Err(Error::format(pos as u64, "unexpected bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
