//! Common binary checkpoint layout.
//!
//! ```text
//! magic "CHRNCKPT" | u32 version | u64 header_len | header (JSON)
//! u32 tensor_count | per tensor: u32 name_len, name, u8 dtype, u32 ndim,
//!                    u64 dims.., u64 byte_len, bytes
//! 32-byte SHA-256 of everything above
//! ```
//! All integers are little-endian. Tensors are written in name order.

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamTable, TensorBlob};

pub const MAGIC: &[u8; 8] = b"CHRNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingProgress {
    pub stage: Option<String>,
    pub epoch: usize,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    component: String,
    config: serde_json::Value,
    progress: TrainingProgress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub config: serde_json::Value,
    pub progress: TrainingProgress,
    pub params: ParamTable,
}

impl Checkpoint {
    pub fn new(component: &str, config: serde_json::Value, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            component: component.to_string(),
            config,
            progress: TrainingProgress::default(),
            params: store.to_table()?,
        })
    }

    /// Adds every tensor of `store` under `prefix.`.
    pub fn merge(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (k, v) in store.to_table()? {
            self.params.insert(format!("{prefix}.{k}"), v);
        }
        Ok(())
    }

    /// Tensors whose name starts with `prefix.`, with the prefix removed.
    pub fn sub_table(&self, prefix: &str) -> ParamTable {
        let p = format!("{prefix}.");
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            component: self.component.clone(),
            config: self.config.clone(),
            progress: self.progress.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, blob) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match blob.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
                other => return Err(Error::checkpoint(format!("unsupported dtype {other:?}"))),
            });
            out.extend_from_slice(&(blob.shape.len() as u32).to_le_bytes());
            for d in &blob.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(blob.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob.bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::checkpoint("file too short for magic, version and checksum"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::checkpoint("bad magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(format!(
                "version mismatch: file has {version}, reader supports {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::checkpoint("checksum mismatch (truncated or corrupt file)"));
        }
        let hlen = r.u64("header_len")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::checkpoint(format!("header: {e}")))?;
        let n = r.u32("tensor_count")?;
        let mut params = ParamTable::new();
        for _ in 0..n {
            let name_len = r.u32("name_len")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::checkpoint("tensor name is not utf-8"))?;
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::checkpoint(format!("tensor {name}: unknown dtype tag {d}"))),
            };
            let ndim = r.u32("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = r.u64("byte_len")? as usize;
            let expect = shape.iter().product::<usize>() * dtype.size_in_bytes();
            if len != expect {
                return Err(Error::checkpoint(format!(
                    "tensor {name}: byte_len {len} does not match shape {shape:?}"
                )));
            }
            let data = r.take(len, "bytes")?.to_vec();
            params.insert(
                name,
                TensorBlob {
                    dtype,
                    shape,
                    bytes: data,
                },
            );
        }
        if r.pos != body.len() {
            return Err(Error::checkpoint("trailing bytes after tensor table"));
        }
        Ok(Self {
            component: header.component,
            config: header.config,
            progress: header.progress,
            params,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the component id.
    pub fn load_as(path: &Path, component: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.expect_component(component)?;
        Ok(ck)
    }

    pub fn expect_component(&self, component: &str) -> Result<()> {
        if self.component != component {
            return Err(Error::checkpoint(format!(
                "component id mismatch: file holds {:?}, expected {component:?}",
                self.component
            )));
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(format!("truncated while reading {field}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(DType::F32);
        s.init("layer.w", &[3, 5], Init::Normal(1.0), &mut rng).unwrap();
        s.init("layer.b", &[5], Init::Zeros, &mut rng).unwrap();
        let mut ck = Checkpoint::new("data-encoder", serde_json::json!({"width": 5}), &s).unwrap();
        ck.progress.loss_curve = vec![1.0, 0.5];
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn component_guard() {
        let err = sample().expect_component("lm").unwrap_err().to_string();
        assert!(err.contains("component id mismatch"));
    }
}
