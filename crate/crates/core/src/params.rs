//! Named, seeded parameter storage shared by every trainable component.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Raw little-endian tensor bytes as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorBlob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            other => return Err(Error::checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(Self {
            dtype: t.dtype(),
            shape: t.dims().to_vec(),
            bytes,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            DType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(Error::checkpoint(format!("unsupported dtype {other:?}"))),
        };
        Ok(t)
    }
}

pub type ParamTable = BTreeMap<String, TensorBlob>;

/// An ordered map of trainable variables.
///
/// Layers keep clones of the variables' tensors; a clone shares storage with
/// its `Var`, so optimizer updates are visible to every holder.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.insert(name, t)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn to_table(&self) -> Result<ParamTable> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), TensorBlob::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every variable in place from `table`; names and shapes must match.
    pub fn load_table(&self, table: &ParamTable) -> Result<()> {
        for name in table.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::checkpoint(format!("unexpected parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let blob = table
                .get(name)
                .ok_or_else(|| Error::checkpoint(format!("missing parameter {name}")))?;
            if blob.shape != var.dims() {
                return Err(Error::checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    blob.shape,
                    var.dims()
                )));
            }
            let t = blob.to_tensor()?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw bytes; equal hashes mean bitwise-equal parameters.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, blob) in self.to_table()? {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in &blob.shape {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(&blob.bytes);
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// A prefixed view used while building layers.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.init(&full, shape, init, self.rng)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut s = ParamStore::new(DType::F32);
            let mut sc = Scope::new(&mut s, &mut rng);
            sc.sub("a").param("w", &[3, 4], Init::Normal(0.1)).unwrap();
            s
        };
        assert_eq!(build().hash().unwrap(), build().hash().unwrap());
    }

    #[test]
    fn load_table_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::new(DType::F64);
        a.init("w", &[2, 2], Init::Ones, &mut rng).unwrap();
        let mut b = ParamStore::new(DType::F64);
        b.init("w", &[2, 3], Init::Ones, &mut rng).unwrap();
        assert!(b.load_table(&a.to_table().unwrap()).is_err());
    }

    #[test]
    fn clones_share_storage_with_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new(DType::F64);
        let t = s.init("w", &[2], Init::Zeros, &mut rng).unwrap();
        s.var("w").unwrap().set(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
    }
}
