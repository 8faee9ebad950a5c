//! Single-file checkpoints: parameters, optimizer moments, and a JSON header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::optim::AdamW;
use crate::model::params::ParamStore;

const META_KEY: &str = "uniperc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    /// Free-form extras such as a teacher's validation metric.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

fn bytes_of(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            t.flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
        _ => (
            Dtype::F32,
            t.to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn tensor_of(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint dtype {other:?}"
            )))
        }
    };
    Ok(t)
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    opt: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut entries: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, var) in store.all() {
        let (dt, b) = bytes_of(var.as_tensor())?;
        entries.push((format!("param/{name}"), dt, var.dims().to_vec(), b));
    }
    if let Some(opt) = opt {
        let (m, v) = opt.moments();
        for (prefix, map) in [("adam_m", m), ("adam_v", v)] {
            for (name, t) in map {
                let (dt, b) = bytes_of(t)?;
                entries.push((format!("{prefix}/{name}"), dt, t.dims().to_vec(), b));
            }
        }
    }
    let views: Vec<(String, TensorView<'_>)> = entries
        .iter()
        .map(|(n, dt, s, b)| Ok((n.clone(), TensorView::new(*dt, s.clone(), b)?)))
        .collect::<Result<_>>()?;
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(views, Some(info))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let buf = std::fs::read(path)?;
    let (_, md) = SafeTensors::read_metadata(&buf)?;
    let text = md
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Invalid(format!("{} has no checkpoint header", path.display())))?;
    Ok(serde_json::from_str(text)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let meta = read_meta(path)?;
    let buf = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&buf)?;
    let mut ck = Checkpoint {
        meta,
        params: BTreeMap::new(),
        adam_m: BTreeMap::new(),
        adam_v: BTreeMap::new(),
    };
    for (name, view) in st.tensors() {
        let t = tensor_of(&view)?;
        if let Some(n) = name.strip_prefix("param/") {
            ck.params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_m/") {
            ck.adam_m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_v/") {
            ck.adam_v.insert(n.to_string(), t);
        }
    }
    Ok(ck)
}

impl Checkpoint {
    /// Copy parameter values into `store`. Every store parameter must be
    /// present in the checkpoint; extra checkpoint entries are ignored.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        for name in store.names() {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(&name, t)?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut AdamW, dtype: DType) -> Result<()> {
        let names: Vec<String> = opt.param_names().map(str::to_string).collect();
        for name in names {
            if let (Some(m), Some(v)) = (self.adam_m.get(&name), self.adam_v.get(&name)) {
                opt.set_moments(&name, m.to_dtype(dtype)?, v.to_dtype(dtype)?);
            }
        }
        opt.step = self.meta.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::optim::OptimizerConfig;
    use crate::model::params::Init;

    #[test]
    fn round_trip_with_moments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let s = ParamStore::new(4, DType::F32);
        s.get("a.w", &[2, 3], Init::Normal(1.0)).unwrap();
        s.get("b", &[4], Init::Uniform(1.0)).unwrap();
        let mut opt = AdamW::new(s.trainable(), OptimizerConfig::default()).unwrap();
        let loss = s
            .var("b")
            .unwrap()
            .as_tensor()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            step: 1,
            seed: 4,
            task: Some("sem".into()),
            manifest_hash: Some("def".into()),
            extra: BTreeMap::new(),
        };
        save(&path, &s, Some(&opt), &meta).unwrap();
        assert_eq!(read_meta(&path).unwrap(), meta);

        let s2 = ParamStore::new(99, DType::F32);
        s2.get("a.w", &[2, 3], Init::Zeros).unwrap();
        s2.get("b", &[4], Init::Zeros).unwrap();
        let ck = load(&path).unwrap();
        ck.restore_params(&s2).unwrap();
        for n in s.names() {
            let a = s
                .var(&n)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            let b = s2
                .var(&n)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            assert_eq!(a, b);
        }
        let mut opt2 = AdamW::new(s2.trainable(), OptimizerConfig::default()).unwrap();
        ck.restore_optimizer(&mut opt2, DType::F32).unwrap();
        assert_eq!(opt2.step, 1);
        let m1 = opt.moments().0["b"].to_vec1::<f32>().unwrap();
        let m2 = opt2.moments().0["b"].to_vec1::<f32>().unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn missing_parameter_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let s = ParamStore::new(0, DType::F32);
        s.get("a", &[1], Init::Zeros).unwrap();
        let meta = CheckpointMeta {
            config_hash: "x".into(),
            step: 0,
            seed: 0,
            task: None,
            manifest_hash: None,
            extra: BTreeMap::new(),
        };
        save(&path, &s, None, &meta).unwrap();
        let s2 = ParamStore::new(0, DType::F32);
        s2.get("zzz", &[1], Init::Zeros).unwrap();
        assert!(load(&path).unwrap().restore_params(&s2).is_err());
    }
}
