//! Frozen exemplar encoders.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Embedding width of [`StubEncoder`].
pub const STUB_DIM: usize = 32;

/// Maps exemplar images to embeddings. Implementations are frozen: the same
/// input always yields the same output.
pub trait ExemplarEncoder {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// One row per image, `(m, dim)`.
    fn embed(&self, images: &[&Array3<f32>]) -> Result<Array2<f32>>;
}

/// Offline stand-in: a seeded hash of the image bytes drives a uniform draw
/// in `[-1, 1)^D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEncoder {
    pub seed: u64,
    pub dim: usize,
}

impl StubEncoder {
    pub fn new(seed: u64) -> Self {
        StubEncoder {
            seed,
            dim: STUB_DIM,
        }
    }

    fn embed_one(&self, img: &Array3<f32>) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for d in img.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in img.iter() {
            h.update(v.to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        (0..self.dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect()
    }
}

impl ExemplarEncoder for StubEncoder {
    fn id(&self) -> String {
        format!("stub-sha256-d{}-s{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, images: &[&Array3<f32>]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((images.len(), self.dim));
        for (i, img) in images.iter().enumerate() {
            for (j, v) in self.embed_one(img).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(feature = "clip")]
pub use clip::ClipEncoder;

#[cfg(feature = "clip")]
mod clip {
    use std::path::{Path, PathBuf};

    use candle_core::{DType, Device, Tensor};
    use candle_nn::VarBuilder;
    use candle_transformers::models::clip::{ClipConfig, ClipModel};
    use ndarray::{Array2, Array3};

    use super::ExemplarEncoder;
    use crate::error::{Error, Result};
    use crate::model::layers::resize_bilinear;

    const MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
    const STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

    /// ViT-B/32 image tower loaded from `model.safetensors` under
    /// `$UNIPERC_CACHE/clip-vit-base-patch32/`.
    pub struct ClipEncoder {
        model: ClipModel,
        size: usize,
        dim: usize,
        path: PathBuf,
    }

    impl ClipEncoder {
        pub fn from_cache() -> Result<Self> {
            let root = std::env::var("UNIPERC_CACHE")
                .map_err(|_| Error::Config("clip backend needs UNIPERC_CACHE".into()))?;
            Self::load(
                &Path::new(&root)
                    .join("clip-vit-base-patch32")
                    .join("model.safetensors"),
            )
        }

        pub fn load(path: &Path) -> Result<Self> {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "clip weights not found at {}",
                    path.display()
                )));
            }
            let cfg = ClipConfig::vit_base_patch32();
            let vb =
                unsafe { VarBuilder::from_mmaped_safetensors(&[path], DType::F32, &Device::Cpu)? };
            let model = ClipModel::new(vb, &cfg)?;
            Ok(ClipEncoder {
                model,
                size: cfg.image_size,
                dim: cfg.text_config.projection_dim,
                path: path.to_path_buf(),
            })
        }

        fn pixels(&self, img: &Array3<f32>) -> Result<Tensor> {
            let (h, w, _) = img.dim();
            let mut v = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        v.push((img[[y, x, c]] - MEAN[c]) / STD[c]);
                    }
                }
            }
            let t = Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu)?;
            resize_bilinear(&t, self.size, self.size)
        }
    }

    impl ExemplarEncoder for ClipEncoder {
        fn id(&self) -> String {
            format!("clip-vit-b32:{}", self.path.display())
        }

        fn dim(&self) -> usize {
            self.dim
        }

        fn embed(&self, images: &[&Array3<f32>]) -> Result<Array2<f32>> {
            let mut out = Array2::zeros((images.len(), self.dim));
            for (i, img) in images.iter().enumerate() {
                let f = self.model.get_image_features(&self.pixels(img)?)?;
                for (j, v) in f.flatten_all()?.to_vec1::<f32>()?.into_iter().enumerate() {
                    out[[i, j]] = v;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_deterministic_and_content_keyed() {
        let a = Array3::from_elem((4, 4, 3), 0.25f32);
        let mut b = a.clone();
        b[[0, 0, 0]] = 0.5;
        let enc = StubEncoder::new(7);
        let e = enc.embed(&[&a, &a, &b]).unwrap();
        assert_eq!(e.dim(), (3, STUB_DIM));
        assert_eq!(e.row(0), e.row(1));
        assert_ne!(e.row(0), e.row(2));
        assert_ne!(StubEncoder::new(8).embed(&[&a]).unwrap().row(0), e.row(0));
        assert_eq!(enc.embed(&[&a]).unwrap().row(0), e.row(0));
    }
}
