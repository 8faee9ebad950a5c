//! On-disk dataset layout.
//!
//! ```text
//! <root>/images/<id>.png            8-bit RGB
//! <root>/masks/<id>_<task>.png      8-bit gray, integer labels
//! <root>/boxes/<id>.json            {"id", "pseudo": false, "boxes": [...]}
//! <root>/pseudo/<id>_<task>.png     pseudo masks
//! <root>/pseudo/<id>_det.json       {"id", "pseudo": true, "boxes": [...]}
//! <root>/manifest.jsonl
//! ```

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::split::{read_manifest, SplitManifest};
use crate::data::synth::{Annotations, BoxAnnotation, Sample};
use crate::error::{Error, Result};
use crate::tasks::{TaskKind, TaskSet};

/// Scored detection used for pseudo labels and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BoxAnnotation,
    pub score: f32,
}

#[derive(Serialize, Deserialize)]
struct BoxFile {
    id: String,
    pseudo: bool,
    boxes: Vec<BoxAnnotation>,
}

/// Source of samples by id. Only the on-disk synthetic layout ships; other
/// datasets can be adapted by implementing this trait.
pub trait SampleSource {
    fn ids(&self) -> Vec<String>;
    /// Load image plus the labels available for `tasks` (real or pseudo).
    fn load(&self, id: &str, tasks: TaskSet, use_pseudo: bool) -> Result<Sample>;
}

pub fn image_to_rgb(img: &Array3<f32>) -> RgbImage {
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (img[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb_to_image(rgb: &RgbImage) -> Array3<f32> {
    let (w, h) = rgb.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn mask_to_gray(m: &Array2<u8>) -> GrayImage {
    let (h, w) = m.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([m[[y as usize, x as usize]]])
    })
}

pub fn gray_to_mask(g: &GrayImage) -> Array2<u8> {
    let (w, h) = g.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0]
    })
}

#[derive(Debug, Clone)]
pub struct DiskDataset {
    pub root: PathBuf,
}

impl DiskDataset {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["images", "masks", "boxes", "pseudo"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(DiskDataset {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("images").is_dir() {
            return Err(Error::Config(format!(
                "{} is not a dataset directory",
                root.display()
            )));
        }
        Ok(DiskDataset {
            root: root.to_path_buf(),
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn manifest(&self) -> Result<SplitManifest> {
        read_manifest(&self.manifest_path())
    }

    fn mask_path(&self, id: &str, task: TaskKind, pseudo: bool) -> PathBuf {
        let dir = if pseudo { "pseudo" } else { "masks" };
        self.root.join(dir).join(format!("{id}_{task}.png"))
    }

    fn box_path(&self, id: &str, pseudo: bool) -> PathBuf {
        if pseudo {
            self.root.join("pseudo").join(format!("{id}_det.json"))
        } else {
            self.root.join("boxes").join(format!("{id}.json"))
        }
    }

    /// Write image plus every annotation the sample carries.
    pub fn write_sample(&self, s: &Sample) -> Result<()> {
        image_to_rgb(&s.image).save(self.root.join("images").join(format!("{}.png", s.id)))?;
        self.write_annotations(&s.id, &s.annotations, s.split_tags, false)
    }

    /// Write annotations for the tasks in `tasks`. `pseudo` routes them to
    /// the pseudo store and flags them.
    pub fn write_annotations(
        &self,
        id: &str,
        a: &Annotations,
        tasks: TaskSet,
        pseudo: bool,
    ) -> Result<()> {
        for t in tasks.iter() {
            match t {
                TaskKind::Det => {
                    let f = BoxFile {
                        id: id.to_string(),
                        pseudo,
                        boxes: a.boxes.clone(),
                    };
                    std::fs::write(self.box_path(id, pseudo), serde_json::to_vec(&f)?)?;
                }
                _ => {
                    let m = mask_for(a, t)
                        .ok_or_else(|| Error::Invalid(format!("sample {id} has no {t} mask")))?;
                    mask_to_gray(m).save(self.mask_path(id, t, pseudo))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_image(&self, id: &str) -> Result<Array3<f32>> {
        let p = self.root.join("images").join(format!("{id}.png"));
        Ok(rgb_to_image(&image::open(p)?.to_rgb8()))
    }

    pub fn read_annotation(
        &self,
        id: &str,
        task: TaskKind,
        pseudo: bool,
        a: &mut Annotations,
    ) -> Result<()> {
        match task {
            TaskKind::Det => {
                let f: BoxFile =
                    serde_json::from_slice(&std::fs::read(self.box_path(id, pseudo))?)?;
                a.boxes = f.boxes;
            }
            t => {
                let m = gray_to_mask(&image::open(self.mask_path(id, t, pseudo))?.to_luma8());
                if let Some(slot) = mask_for_mut(a, t) {
                    *slot = Some(m);
                }
            }
        }
        Ok(())
    }

    pub fn has_pseudo(&self, id: &str, task: TaskKind) -> bool {
        match task {
            TaskKind::Det => self.box_path(id, true).exists(),
            t => self.mask_path(id, t, true).exists(),
        }
    }
}

impl SampleSource for DiskDataset {
    fn ids(&self) -> Vec<String> {
        self.manifest()
            .map(|m| m.entries.into_iter().map(|e| e.id).collect())
            .unwrap_or_default()
    }

    fn load(&self, id: &str, tasks: TaskSet, use_pseudo: bool) -> Result<Sample> {
        let manifest = self.manifest()?;
        let entry = manifest
            .get(id)
            .ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        load_with_entry(self, entry, tasks, use_pseudo)
    }
}

/// Load a sample using an already-parsed manifest entry.
pub fn load_with_entry(
    ds: &DiskDataset,
    entry: &crate::data::split::ManifestEntry,
    tasks: TaskSet,
    use_pseudo: bool,
) -> Result<Sample> {
    let image = ds.read_image(&entry.id)?;
    let mut annotations = Annotations::default();
    let mut tags = TaskSet::EMPTY;
    for t in tasks.iter() {
        if entry.tasks.contains(t) {
            ds.read_annotation(&entry.id, t, false, &mut annotations)?;
            tags.insert(t);
        } else if use_pseudo && entry.pseudo.contains(t) {
            ds.read_annotation(&entry.id, t, true, &mut annotations)?;
            tags.insert(t);
        }
    }
    Ok(Sample {
        id: entry.id.clone(),
        image,
        annotations,
        split_tags: tags,
    })
}

pub fn mask_for(a: &Annotations, t: TaskKind) -> Option<&Array2<u8>> {
    match t {
        TaskKind::Det => None,
        TaskKind::Sem => a.sem_mask.as_ref(),
        TaskKind::Driv => a.driv_mask.as_ref(),
        TaskKind::Lane => a.lane_mask.as_ref(),
    }
}

pub fn mask_for_mut(a: &mut Annotations, t: TaskKind) -> Option<&mut Option<Array2<u8>>> {
    match t {
        TaskKind::Det => None,
        TaskKind::Sem => Some(&mut a.sem_mask),
        TaskKind::Driv => Some(&mut a.driv_mask),
        TaskKind::Lane => Some(&mut a.lane_mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_scene, SceneSpec};

    #[test]
    fn sample_survives_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DiskDataset::create(dir.path()).unwrap();
        let s = generate_scene(4, &SceneSpec::default()).unwrap();
        ds.write_sample(&s).unwrap();
        let mut m = crate::data::split::build_split_for_ids(
            crate::data::split::SplitSetting::Full,
            &[s.id.clone()],
            0,
            1.0,
        )
        .unwrap();
        m.entries[0].tasks = TaskSet::FULL;
        crate::data::split::write_manifest(&m, &ds.manifest_path()).unwrap();
        let back = ds.load(&s.id, TaskSet::FULL, false).unwrap();
        assert_eq!(back.image, s.image);
        assert_eq!(back.annotations.boxes, s.annotations.boxes);
        assert_eq!(back.annotations.sem_mask, s.annotations.sem_mask);
        assert_eq!(back.annotations.lane_mask, s.annotations.lane_mask);
        assert!(matches!(
            ds.load("nope", TaskSet::FULL, false),
            Err(Error::UnknownSample(_))
        ));
    }
}
