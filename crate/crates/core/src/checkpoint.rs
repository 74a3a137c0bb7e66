//! Binary checkpoint files.
//!
//! Layout:
//!
//! ```text
//! percept-ckpt 1 <header_len>\n
//! <header_len bytes of TOML: step, arch, array names and lengths>
//! <each array in header order, little-endian f64>
//! ```
//!
//! Floats are stored by bit pattern, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ArchConfig, PolicyParams};

const MAGIC: &str = "percept-ckpt";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    arch: ArchConfig,
    arrays: Vec<ArrayInfo>,
}

/// Named flat arrays plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub arch: ArchConfig,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    /// Checkpoint holding only policy parameters under the name `params`.
    pub fn from_params(params: &PolicyParams, step: u64) -> Self {
        Self {
            step,
            arch: *params.arch(),
            arrays: vec![("params".into(), params.values().to_vec())],
        }
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    /// Policy parameters stored under `name`, checked against the architecture.
    pub fn params(&self, name: &str) -> Result<PolicyParams> {
        let values = self.array(name)?.to_vec();
        PolicyParams::from_values(self.arch, values).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            step: self.step,
            arch: self.arch,
            arrays: self
                .arrays
                .iter()
                .map(|(name, v)| ArrayInfo {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "{MAGIC} {VERSION} {}", text.len())?;
            w.write_all(text.as_bytes())?;
            for (_, values) in &self.arrays {
                for v in values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            let f = w.into_inner().map_err(|e| e.into_error())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
        let mut r = BufReader::new(f);
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));

        let mut first = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte).map_err(|_| bad("truncated preamble"))?;
            if byte[0] == b'\n' {
                break;
            }
            first.push(byte[0]);
            if first.len() > 64 {
                return Err(bad("not a checkpoint file"));
            }
        }
        let first = String::from_utf8(first).map_err(|_| bad("not a checkpoint file"))?;
        let parts: Vec<&str> = first.split(' ').collect();
        if parts.len() != 3 || parts[0] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        if parts[1] != VERSION.to_string() {
            return Err(bad(&format!("unsupported version {}", parts[1])));
        }
        let header_len: usize = parts[2].parse().map_err(|_| bad("bad header length"))?;
        let mut text = vec![0u8; header_len];
        r.read_exact(&mut text).map_err(|_| bad("truncated header"))?;
        let text = String::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(&text).map_err(|e| bad(&e.to_string()))?;

        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut buf = [0u8; 8];
        for info in header.arrays {
            let mut values = Vec::with_capacity(info.len);
            for _ in 0..info.len {
                r.read_exact(&mut buf)
                    .map_err(|_| bad(&format!("array {:?} truncated", info.name)))?;
                values.push(f64::from_le_bytes(buf));
            }
            arrays.push((info.name, values));
        }
        if r.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            step: header.step,
            arch: header.arch,
            arrays,
        })
    }
}

/// Loads policy parameters and checks them against `expected` when given.
pub fn load_params(path: &Path, expected: Option<&ArchConfig>) -> Result<PolicyParams> {
    let ckpt = Checkpoint::load(path)?;
    if let Some(arch) = expected {
        if *arch != ckpt.arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                ckpt.arch, arch
            )));
        }
    }
    ckpt.params("params")
}
