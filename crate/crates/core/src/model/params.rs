//! Named parameter storage with deterministic per-name initialization.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug)]
struct Inner {
    seed: u64,
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

/// Shared handle to a model's parameters. Values depend only on the store
/// seed and each parameter's full name, so adding or removing a submodule
/// never changes the initialization of the others.
#[derive(Debug, Clone)]
pub struct ParamStore(Arc<Mutex<Inner>>);

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore(Arc::new(Mutex::new(Inner {
            seed,
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
        })))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn seed(&self) -> u64 {
        self.lock().seed
    }

    pub fn root(&self) -> Builder {
        Builder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    /// Fetch or create a parameter.
    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(inner.seed, name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).map_err(|e| Error::Invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        inner.vars.insert(name.to_string(), v);
        Ok(out)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.lock().vars.get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().vars.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Parameters under `prefix` (a dotted path), in name order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Var> {
        let dotted = format!("{prefix}.");
        self.lock()
            .vars
            .iter()
            .filter(|(k, _)| k.as_str() == prefix || k.starts_with(&dotted))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Exclude every parameter under `prefix` from [`ParamStore::trainable`].
    pub fn freeze(&self, prefix: &str) {
        let dotted = format!("{prefix}.");
        let mut inner = self.lock();
        let names: Vec<String> = inner
            .vars
            .keys()
            .filter(|k| k.as_str() == prefix || k.starts_with(&dotted))
            .cloned()
            .collect();
        inner.frozen.extend(names);
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.lock().frozen.contains(name)
    }

    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.lock();
        inner
            .vars
            .iter()
            .filter(|(k, _)| !inner.frozen.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Overwrite a parameter's value, keeping its identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let inner = self.lock();
        let v = inner
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        if v.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: {:?} vs {:?}",
                v.dims(),
                value.dims()
            )));
        }
        v.set(&value.to_dtype(inner.dtype)?)?;
        Ok(())
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let inner = self.lock();
        let mut vars = BTreeMap::new();
        for (k, v) in &inner.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore(Arc::new(Mutex::new(Inner {
            seed: inner.seed,
            dtype: inner.dtype,
            device: inner.device.clone(),
            vars,
            frozen: inner.frozen.clone(),
        }))))
    }
}

/// A [`ParamStore`] view rooted at a dotted name prefix.
#[derive(Debug, Clone)]
pub struct Builder {
    store: ParamStore,
    prefix: String,
}

impl Builder {
    pub fn pp(&self, name: impl std::fmt::Display) -> Builder {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&self.pp(name).prefix, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_name() {
        let a = ParamStore::new(3, DType::F32);
        let b = ParamStore::new(3, DType::F32);
        a.get("x", &[4], Init::Normal(1.0)).unwrap();
        let ay = a.get("y", &[4], Init::Normal(1.0)).unwrap();
        let by = b.get("y", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(ay.to_vec1::<f32>().unwrap(), by.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn get_returns_same_variable() {
        let s = ParamStore::new(0, DType::F64);
        let b = s.root().pp("layer");
        let w1 = b.get("w", &[2, 2], Init::Uniform(0.5)).unwrap();
        let w2 = b.get("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(w1.id(), w2.id());
        assert!(b.get("w", &[3], Init::Zeros).is_err());
        assert_eq!(s.names(), vec!["layer.w".to_string()]);
    }

    #[test]
    fn freeze_by_prefix() {
        let s = ParamStore::new(0, DType::F32);
        s.get("prompt.det", &[2], Init::Zeros).unwrap();
        s.get("prompt_block.w", &[2], Init::Zeros).unwrap();
        s.freeze("prompt");
        let names: Vec<String> = s.trainable().into_iter().map(|(k, _)| k).collect();
        assert_eq!(names, vec!["prompt_block.w".to_string()]);
    }
}
