//! Prompt banks: per-category averages of normalized exemplar embeddings,
//! stored as a raw f32 blob plus a JSON sidecar.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::prompting::encoder::ExemplarEncoder;
use crate::prompting::exemplars::{build_exemplar_set, ExemplarSet};
use crate::tasks::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSidecar {
    pub task: TaskKind,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub encoder_id: String,
    pub exemplar_manifest_hash: String,
    pub n: usize,
    /// Categories absent from the exemplar pool; their rows are zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<usize>,
}

/// Prompt rows for one task, `K × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub meta: BankSidecar,
    pub rows: Array2<f32>,
}

/// `p_k = (1/n) Σ_i v_i / ‖v_i‖` over the exemplars of each category; categories
/// without exemplars stay zero.
pub fn encode_prompts(set: &ExemplarSet, encoder: &dyn ExemplarEncoder) -> Result<Array2<f32>> {
    let k = set.per_category.len();
    let d = encoder.dim();
    let mut rows = Array2::zeros((k, d));
    for (c, exemplars) in set.per_category.iter().enumerate() {
        if exemplars.is_empty() {
            continue;
        }
        if exemplars.len() != set.n {
            return Err(Error::Invalid(format!(
                "{} category {c} has {} exemplars, expected {}",
                set.task,
                exemplars.len(),
                set.n
            )));
        }
        let imgs: Vec<_> = exemplars.iter().map(|e| &e.image).collect();
        let emb = encoder.embed(&imgs)?;
        let mut acc = vec![0.0f64; d];
        for (i, v) in emb.rows().into_iter().enumerate() {
            let norm = v
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroEmbedding {
                    category: c,
                    exemplar: i,
                });
            }
            for (a, &x) in acc.iter_mut().zip(v.iter()) {
                *a += x as f64 / norm;
            }
        }
        for (j, a) in acc.into_iter().enumerate() {
            rows[[c, j]] = (a / set.n as f64) as f32;
        }
    }
    Ok(rows)
}

/// Hash of the exemplar selection: task, n, and the ordered source ids per
/// category.
pub fn exemplar_manifest_hash(set: &ExemplarSet) -> String {
    let mut h = Sha256::new();
    h.update(set.task.name().as_bytes());
    h.update((set.n as u64).to_le_bytes());
    for (c, ex) in set.per_category.iter().enumerate() {
        h.update((c as u64).to_le_bytes());
        for e in ex {
            h.update(e.source_id.as_bytes());
            h.update([0u8]);
        }
    }
    hex::encode(h.finalize())
}

/// Fails if any exemplar comes from outside `train_ids`.
pub fn audit_leakage(set: &ExemplarSet, train_ids: &HashSet<String>) -> Result<()> {
    match set.source_ids().find(|id| !train_ids.contains(*id)) {
        Some(id) => Err(Error::Invalid(format!(
            "{} exemplar `{id}` is not a training sample",
            set.task
        ))),
        None => Ok(()),
    }
}

/// Render exemplars from `pool`, encode them, and package the bank.
pub fn build_prompt_bank(
    pool: &[&Sample],
    task: TaskKind,
    n: usize,
    alpha: f32,
    seed: u64,
    encoder: &dyn ExemplarEncoder,
) -> Result<(PromptBank, ExemplarSet)> {
    if n == 0 {
        return Err(Error::Config("exemplar count must be at least 1".into()));
    }
    let set = build_exemplar_set(pool, task, n, alpha, seed)?;
    let rows = encode_prompts(&set, encoder)?;
    let meta = BankSidecar {
        task,
        k: rows.nrows(),
        d: rows.ncols(),
        encoder_id: encoder.id(),
        exemplar_manifest_hash: exemplar_manifest_hash(&set),
        n,
        absent: set.absent(),
    };
    Ok((PromptBank { meta, rows }, set))
}

impl PromptBank {
    pub fn blob_path(dir: &Path, task: TaskKind) -> PathBuf {
        dir.join(format!("{task}.f32"))
    }

    pub fn sidecar_path(dir: &Path, task: TaskKind) -> PathBuf {
        dir.join(format!("{task}.json"))
    }

    fn blob(&self) -> Vec<u8> {
        self.rows.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Content hash over the row bytes and the sidecar.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.blob());
        h.update(serde_json::to_vec(&self.meta).expect("sidecar serializes"));
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(Self::blob_path(dir, self.meta.task), self.blob())?;
        std::fs::write(
            Self::sidecar_path(dir, self.meta.task),
            serde_json::to_vec_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, task: TaskKind) -> Result<Self> {
        let meta: BankSidecar =
            serde_json::from_slice(&std::fs::read(Self::sidecar_path(dir, task))?)?;
        if meta.task != task {
            return Err(Error::Invalid(format!(
                "sidecar for {} found under {task}",
                meta.task
            )));
        }
        if meta.k != task.num_categories() {
            return Err(Error::Shape(format!(
                "{task} bank has {} rows, task has {} categories",
                meta.k,
                task.num_categories()
            )));
        }
        let bytes = std::fs::read(Self::blob_path(dir, task))?;
        if bytes.len() != meta.k * meta.d * 4 {
            return Err(Error::Shape(format!(
                "{task} blob holds {} bytes, sidecar says {}×{}",
                bytes.len(),
                meta.k,
                meta.d
            )));
        }
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rows =
            Array2::from_shape_vec((meta.k, meta.d), v).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(PromptBank { meta, rows })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.rows.iter().copied().collect();
        Ok(Tensor::from_vec(v, (self.meta.k, self.meta.d), device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::exemplars::Exemplar;
    use ndarray::{array, Array3};

    /// Returns a fixed vector keyed by the first pixel value.
    struct Table(Vec<Vec<f32>>);

    impl ExemplarEncoder for Table {
        fn id(&self) -> String {
            "table".into()
        }
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn embed(&self, images: &[&Array3<f32>]) -> Result<Array2<f32>> {
            let mut out = Array2::zeros((images.len(), self.dim()));
            for (i, im) in images.iter().enumerate() {
                let row = &self.0[im[[0, 0, 0]] as usize];
                for (j, v) in row.iter().enumerate() {
                    out[[i, j]] = *v;
                }
            }
            Ok(out)
        }
    }

    fn ex(key: usize) -> Exemplar {
        Exemplar {
            source_id: format!("s{key}"),
            image: Array3::from_elem((1, 1, 3), key as f32),
        }
    }

    #[test]
    fn two_exemplar_average() {
        let enc = Table(vec![vec![3.0, 4.0], vec![0.0, 5.0]]);
        let set = ExemplarSet {
            task: TaskKind::Lane,
            n: 2,
            per_category: vec![vec![ex(0), ex(1)]],
        };
        let rows = encode_prompts(&set, &enc).unwrap();
        assert!((rows[[0, 0]] - 0.3).abs() < 1e-7);
        assert!((rows[[0, 1]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn single_exemplar_is_unit_norm() {
        let enc = Table(vec![vec![1.2, -1.6]]);
        let set = ExemplarSet {
            task: TaskKind::Lane,
            n: 1,
            per_category: vec![vec![ex(0)]],
        };
        let rows = encode_prompts(&set, &enc).unwrap();
        assert_eq!(rows, array![[0.6f32, -0.8]]);
    }

    #[test]
    fn zero_embedding_refused() {
        let enc = Table(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let set = ExemplarSet {
            task: TaskKind::Lane,
            n: 2,
            per_category: vec![vec![ex(0), ex(1)]],
        };
        assert!(matches!(
            encode_prompts(&set, &enc),
            Err(Error::ZeroEmbedding {
                category: 0,
                exemplar: 1
            })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = Array2::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32 * 0.1);
        let bank = PromptBank {
            meta: BankSidecar {
                task: TaskKind::Driv,
                k: 2,
                d: 3,
                encoder_id: "x".into(),
                exemplar_manifest_hash: "y".into(),
                n: 5,
                absent: vec![],
            },
            rows,
        };
        bank.save(dir.path()).unwrap();
        let back = PromptBank::load(dir.path(), TaskKind::Driv).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.hash(), bank.hash());
        let side: serde_json::Value = serde_json::from_slice(
            &std::fs::read(PromptBank::sidecar_path(dir.path(), TaskKind::Driv)).unwrap(),
        )
        .unwrap();
        for key in [
            "task",
            "K",
            "D",
            "encoder_id",
            "exemplar_manifest_hash",
            "n",
        ] {
            assert!(side.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn leakage_audit() {
        let set = ExemplarSet {
            task: TaskKind::Lane,
            n: 1,
            per_category: vec![vec![ex(3)]],
        };
        let mut ids: HashSet<String> = ["s1".to_string()].into();
        assert!(audit_leakage(&set, &ids).is_err());
        ids.insert("s3".into());
        audit_leakage(&set, &ids).unwrap();
    }
}
