//! Single-file container for every artifact: magic bytes, a length-prefixed JSON
//! manifest and a raw little-endian `f64` payload made of named blocks.
//!
//! ```text
//! b"EQFLOWv1" | u64 LE manifest length | manifest JSON | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EQFLOWv1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub endianness: String,
    pub blocks: Vec<BlockSpec>,
    pub payload_sha256: String,
    pub meta: serde_json::Value,
}

/// Decoded container: manifest plus one `Vec<f64>` per block, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub blocks: Vec<Vec<f64>>,
}

impl Container {
    pub fn new<M: Serialize>(kind: &str, meta: &M, blocks: Vec<(BlockSpec, Vec<f64>)>) -> Result<Self> {
        for (spec, data) in &blocks {
            if spec.len() != data.len() {
                return Err(Error::shape(format!("{} values in block {}", spec.len(), spec.name), data.len()));
            }
        }
        let (specs, data): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            endianness: "little".into(),
            blocks: specs,
            payload_sha256: String::new(),
            meta: serde_json::to_value(meta)?,
        };
        let mut c = Container { manifest, blocks: data };
        c.manifest.payload_sha256 = hex::encode(Sha256::digest(c.payload_bytes()));
        Ok(c)
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let total: usize = self.blocks.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(total * 8);
        for v in self.blocks.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        Ok(serde_json::from_value(self.manifest.meta.clone())?)
    }

    /// Block by name together with its shape.
    pub fn block(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.manifest
            .blocks
            .iter()
            .zip(&self.blocks)
            .find(|(s, _)| s.name == name)
            .map(|(s, d)| (s.shape.as_slice(), d.as_slice()))
    }

    pub fn require_block(&self, path: &Path, name: &str) -> Result<(&[usize], &[f64])> {
        self.block(name).ok_or_else(|| format_error(path, format!("missing block {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload = self.payload_bytes();
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// SHA-256 of the serialized file, used to tie derived artifacts to their inputs.
    pub fn file_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_error(path, "not an eqflow container (bad magic bytes)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if mlen > body.len() {
            return Err(format_error(path, format!("manifest length {mlen} exceeds file size")));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| format_error(path, format!("malformed manifest: {e}")))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(format_error(path, format!("unsupported schema version {}", manifest.schema_version)));
        }
        if manifest.endianness != "little" {
            return Err(format_error(path, format!("unsupported endianness {:?}", manifest.endianness)));
        }
        let payload = &body[mlen..];
        let expected: usize = manifest.blocks.iter().map(BlockSpec::len).sum::<usize>() * 8;
        if payload.len() != expected {
            return Err(format_error(
                path,
                format!("payload has {} bytes, manifest blocks need {expected}", payload.len()),
            ));
        }
        let found = hex::encode(Sha256::digest(payload));
        if found != manifest.payload_sha256 {
            return Err(Error::HashMismatch { expected: manifest.payload_sha256.clone(), found });
        }
        let mut blocks = Vec::with_capacity(manifest.blocks.len());
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for spec in &manifest.blocks {
            blocks.push(chunks.by_ref().take(spec.len()).collect());
        }
        Ok(Container { manifest, blocks })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(path, &bytes)
    }

    /// Writes via a temporary sibling file and a rename, so readers never observe a
    /// partially written artifact.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Checks the manifest kind before handing the container to a typed reader.
    pub fn expect_kind(self, path: &Path, kind: &str) -> Result<Self> {
        if self.manifest.kind != kind {
            return Err(format_error(path, format!("expected a {kind} file, found {}", self.manifest.kind)));
        }
        Ok(self)
    }
}

pub(crate) fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
