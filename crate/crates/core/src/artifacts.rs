//! On-disk artifacts: JSON documents, CSV tables and a binary container for
//! dense response blocks, all written deterministically and recorded with
//! their SHA-256 in `manifest.json`.
//!
//! Binary block layout (little endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `RHFBLOCK`                           |
//! | 4     | format version (`u32`, currently 1)        |
//! | 8     | `n_G` (`u64`)                              |
//! | 24    | `q` in reciprocal fractional coordinates   |
//! | 4     | kind (`u32`: 0 χ₀, 1 ε, 2 W, 3 v_c)        |
//! | 16·n² | row-major entries, `(re, im)` as `f64`     |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::response::{BlochKind, BlochMatrix};
use crate::C64;

pub const MAGIC: &[u8; 8] = b"RHFBLOCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 24 + 4;

pub const MANIFEST: &str = "manifest.json";

/// One recorded artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Checksums of every artifact in an output directory, keyed by relative
/// path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An output directory with a checksum manifest.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.path(MANIFEST);
        if !path.is_file() {
            return Ok(Manifest::default());
        }
        let text = fs::read(&path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Artifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Write raw bytes and record their checksum under `step`.
    pub fn write_bytes(&self, name: &str, step: &str, bytes: &[u8]) -> Result<String> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let digest = sha256_hex(bytes);
        let mut manifest = self.manifest()?;
        manifest.artifacts.insert(
            name.to_string(),
            ManifestEntry {
                step: step.to_string(),
                sha256: digest.clone(),
                bytes: bytes.len() as u64,
            },
        );
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        fs::write(self.path(MANIFEST), text)?;
        Ok(digest)
    }

    /// Drop manifest entries whose names start with `prefix` (used before
    /// re-writing a family of files such as the χ₀ blocks).
    pub fn forget(&self, prefix: &str) -> Result<()> {
        let mut manifest = self.manifest()?;
        let stale: Vec<String> = manifest
            .artifacts
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        if stale.is_empty() {
            return Ok(());
        }
        for k in stale {
            manifest.artifacts.remove(&k);
            let _ = fs::remove_file(self.path(&k));
        }
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, step: &str, value: &T) -> Result<String> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write_bytes(name, step, &text)
    }

    /// Read a JSON artifact produced by `producer`, or fail naming it.
    pub fn read_json<T: DeserializeOwned>(&self, name: &str, producer: &str) -> Result<T> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                step: producer.to_string(),
            });
        }
        let text = fs::read(&path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Artifact {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Serialize `rows` as CSV with a header derived from the row type.
    pub fn write_csv<T: Serialize>(&self, name: &str, step: &str, rows: &[T]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Artifact {
                path: name.to_string(),
                message: e.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Artifact {
            path: name.to_string(),
            message: e.to_string(),
        })?;
        self.write_bytes(name, step, &bytes)
    }

    pub fn write_block(&self, name: &str, step: &str, block: &BlochMatrix) -> Result<String> {
        self.write_bytes(name, step, &encode_block(block))
    }

    /// Read a binary block, verifying it against the manifest checksum.
    pub fn read_block(&self, name: &str, producer: &str, lattice: &Lattice) -> Result<BlochMatrix> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                step: producer.to_string(),
            });
        }
        let bytes = fs::read(&path)?;
        if let Some(entry) = self.manifest()?.artifacts.get(name) {
            if entry.sha256 != sha256_hex(&bytes) {
                return Err(Error::Artifact {
                    path: path.display().to_string(),
                    message: "checksum does not match manifest".into(),
                });
            }
        }
        decode_block(&bytes, lattice).map_err(|message| Error::Artifact {
            path: path.display().to_string(),
            message,
        })
    }
}

/// Binary encoding of a block (layout in the module docs).
pub fn encode_block(block: &BlochMatrix) -> Vec<u8> {
    let n = block.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * n * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for x in block.q_frac.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&block.kind.code().to_le_bytes());
    for i in 0..n {
        for j in 0..n {
            let z = block.data[(i, j)];
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_block`].
pub fn decode_block(bytes: &[u8], lattice: &Lattice) -> std::result::Result<BlochMatrix, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let q_frac = Vector3::new(f64_at(20), f64_at(28), f64_at(36));
    let kind = BlochKind::from_code(u32_at(44))
        .ok_or_else(|| format!("unknown block kind {}", u32_at(44)))?;
    let expected = n
        .checked_mul(n)
        .and_then(|m| m.checked_mul(16))
        .and_then(|m| m.checked_add(HEADER_LEN))
        .ok_or("size overflow")?;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes for n_G = {n}, found {}",
            bytes.len()
        ));
    }
    let data = Mat::from_fn(n, n, |i, j| {
        let o = HEADER_LEN + 16 * (i * n + j);
        C64::new(f64_at(o), f64_at(o + 8))
    });
    Ok(BlochMatrix {
        q_frac,
        q: lattice.reciprocal_from_fractional(&q_frac),
        kind,
        data,
        raw_hermiticity: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_round_trip_is_bit_exact() {
        let lattice = Lattice::cubic(3.0).unwrap();
        let block = BlochMatrix {
            q_frac: Vector3::new(0.25, -0.125, 0.5),
            q: lattice.reciprocal_from_fractional(&Vector3::new(0.25, -0.125, 0.5)),
            kind: BlochKind::W,
            data: Mat::from_fn(3, 3, |i, j| C64::new(i as f64 + 0.1, j as f64 - 1.0 / 3.0)),
            raw_hermiticity: 0.0,
        };
        let bytes = encode_block(&block);
        assert_eq!(bytes.len(), HEADER_LEN + 16 * 9);
        let back = decode_block(&bytes, &lattice).unwrap();
        assert_eq!(back.kind, BlochKind::W);
        assert_eq!(back.q_frac, block.q_frac);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(back.data[(i, j)], block.data[(i, j)]);
            }
        }
    }

    #[test]
    fn corrupted_blocks_are_rejected() {
        let lattice = Lattice::cubic(3.0).unwrap();
        let block = BlochMatrix {
            q_frac: Vector3::zeros(),
            q: Vector3::zeros(),
            kind: BlochKind::Chi0,
            data: Mat::zeros(2, 2),
            raw_hermiticity: 0.0,
        };
        let mut bytes = encode_block(&block);
        bytes.pop();
        assert!(decode_block(&bytes, &lattice).is_err());
        let mut bytes = encode_block(&block);
        bytes[0] = b'X';
        assert!(decode_block(&bytes, &lattice).is_err());
    }
}
