//! Rendering visual exemplars: box crops for detection, colour-overlaid
//! images for the pixel tasks.

use ndarray::{s, Array3};
use sha2::{Digest, Sha256};

use crate::data::io::mask_for;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tasks::TaskKind;

/// Default overlay opacity for mask exemplars.
pub const DEFAULT_ALPHA: f32 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub source_id: String,
    /// `(H, W, 3)` in `[0, 1]`.
    pub image: Array3<f32>,
}

/// Exemplars for every category of one task, `n` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    pub task: TaskKind,
    pub n: usize,
    pub per_category: Vec<Vec<Exemplar>>,
}

impl ExemplarSet {
    /// Categories without any exemplar.
    pub fn absent(&self) -> Vec<usize> {
        (0..self.per_category.len())
            .filter(|&k| self.per_category[k].is_empty())
            .collect()
    }

    pub fn source_ids(&self) -> impl Iterator<Item = &str> {
        self.per_category
            .iter()
            .flatten()
            .map(|e| e.source_id.as_str())
    }
}

/// Overlay colour for category `k` of `task`. Hues step by the golden ratio
/// from a per-task offset, so neighbouring categories stay distinguishable.
pub fn palette_color(task: TaskKind, k: usize) -> [f32; 3] {
    let hue = (0.11 * task.index() as f64 + 0.618_033_988_75 * k as f64).fract();
    let (s, v) = (0.85, 0.95);
    let h6 = hue * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn tie_key(seed: u64, id: &str, j: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.update((j as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Mask value that marks category `k` of a pixel task.
pub fn mask_value(task: TaskKind, k: usize) -> u8 {
    match task {
        TaskKind::Lane => (k + 1) as u8,
        _ => k as u8,
    }
}

/// Crops of the `n` largest boxes of category `k`; equal areas are ordered by
/// a seeded hash.
pub fn render_box_exemplars(
    samples: &[&Sample],
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Exemplar>> {
    let mut cands = Vec::new();
    for s in samples {
        for (j, b) in s.annotations.boxes.iter().enumerate() {
            if b.category == k {
                cands.push((b.area(), tie_key(seed, &s.id, j), *s, *b));
            }
        }
    }
    if cands.len() < n {
        return Err(Error::Shortage {
            task: TaskKind::Det,
            category: k,
            needed: n,
            found: cands.len(),
        });
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(cands
        .into_iter()
        .take(n)
        .map(|(_, _, s, b)| {
            let (h, w, _) = s.image.dim();
            let x1 = (b.x1.floor().max(0.0) as usize).min(w);
            let y1 = (b.y1.floor().max(0.0) as usize).min(h);
            let x2 = (b.x2.ceil() as usize).clamp(x1, w);
            let y2 = (b.y2.ceil() as usize).clamp(y1, h);
            Exemplar {
                source_id: s.id.clone(),
                image: s.image.slice(s![y1..y2, x1..x2, ..]).to_owned(),
            }
        })
        .collect())
}

/// Full images of the `n` samples with the most category-`k` pixels, those
/// pixels blended toward the palette colour: `(1−α)·pixel + α·colour`.
pub fn render_mask_exemplars(
    samples: &[&Sample],
    task: TaskKind,
    k: usize,
    n: usize,
    alpha: f32,
    seed: u64,
) -> Result<Vec<Exemplar>> {
    if !task.is_pixel_task() {
        return Err(Error::Invalid(format!("{task} has no masks")));
    }
    let val = mask_value(task, k);
    let mut cands = Vec::new();
    for s in samples {
        if let Some(m) = mask_for(&s.annotations, task) {
            let count = m.iter().filter(|&&v| v == val).count();
            if count > 0 {
                cands.push((count, tie_key(seed, &s.id, k), *s));
            }
        }
    }
    if cands.len() < n {
        return Err(Error::Shortage {
            task,
            category: k,
            needed: n,
            found: cands.len(),
        });
    }
    cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let color = palette_color(task, k);
    Ok(cands
        .into_iter()
        .take(n)
        .map(|(_, _, s)| {
            let m = mask_for(&s.annotations, task).expect("candidate has a mask");
            let mut img = s.image.clone();
            for ((y, x), &v) in m.indexed_iter() {
                if v == val {
                    for c in 0..3 {
                        img[[y, x, c]] = (1.0 - alpha) * img[[y, x, c]] + alpha * color[c];
                    }
                }
            }
            Exemplar {
                source_id: s.id.clone(),
                image: img,
            }
        })
        .collect())
}

/// Exemplars for all categories of `task`, drawn from `samples`. Categories
/// with no instance in the pool get an empty list; any other shortfall is an
/// error.
pub fn build_exemplar_set(
    samples: &[&Sample],
    task: TaskKind,
    n: usize,
    alpha: f32,
    seed: u64,
) -> Result<ExemplarSet> {
    let per_category = (0..task.num_categories())
        .map(|k| {
            let r = match task {
                TaskKind::Det => render_box_exemplars(samples, k, n, seed),
                _ => render_mask_exemplars(samples, task, k, n, alpha, seed),
            };
            match r {
                Err(Error::Shortage { found: 0, .. }) => Ok(Vec::new()),
                other => other,
            }
        })
        .collect::<Result<_>>()?;
    Ok(ExemplarSet {
        task,
        n,
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotations, BoxAnnotation};
    use crate::tasks::TaskSet;
    use ndarray::Array2;

    fn sample(id: &str, boxes: Vec<BoxAnnotation>, sem: Option<Array2<u8>>) -> Sample {
        let image = Array3::from_shape_fn((64, 64, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 255) as f32 / 255.0
        });
        Sample {
            id: id.into(),
            image,
            annotations: Annotations {
                boxes,
                sem_mask: sem,
                ..Default::default()
            },
            split_tags: TaskSet::FULL,
        }
    }

    #[test]
    fn single_box_crop() {
        let b = BoxAnnotation {
            category: 2,
            x1: 10.0,
            y1: 10.0,
            x2: 50.0,
            y2: 50.0,
        };
        let s = sample("a", vec![b], None);
        let ex = render_box_exemplars(&[&s], 2, 1, 0).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].image.dim(), (40, 40, 3));
        assert_eq!(
            ex[0].image,
            s.image.slice(s![10..50, 10..50, ..]).to_owned()
        );
    }

    #[test]
    fn largest_first_and_shortage() {
        let small = BoxAnnotation {
            category: 1,
            x1: 0.0,
            y1: 0.0,
            x2: 4.0,
            y2: 4.0,
        };
        let big = BoxAnnotation {
            category: 1,
            x1: 0.0,
            y1: 0.0,
            x2: 20.0,
            y2: 20.0,
        };
        let a = sample("a", vec![small], None);
        let b = sample("b", vec![big], None);
        let ex = render_box_exemplars(&[&a, &b], 1, 1, 0).unwrap();
        assert_eq!(ex[0].source_id, "b");
        let err = render_box_exemplars(&[&a, &b], 7, 1, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Shortage {
                category: 7,
                found: 0,
                ..
            }
        ));
    }

    #[test]
    fn mask_selection_and_blend() {
        let mut m = Array2::zeros((64, 64));
        m[[3, 4]] = 5;
        let with = sample("with", vec![], Some(m));
        let without = sample("without", vec![], Some(Array2::zeros((64, 64))));
        let ex = render_mask_exemplars(&[&without, &with], TaskKind::Sem, 5, 1, 1.0, 0).unwrap();
        assert_eq!(ex[0].source_id, "with");
        let col = palette_color(TaskKind::Sem, 5);
        for c in 0..3 {
            assert_eq!(ex[0].image[[3, 4, c]], col[c]);
        }
        // untouched elsewhere
        assert_eq!(ex[0].image[[0, 0, 0]], with.image[[0, 0, 0]]);

        let half = render_mask_exemplars(&[&with], TaskKind::Sem, 5, 1, 0.5, 0).unwrap();
        for c in 0..3 {
            let want = 0.5 * with.image[[3, 4, c]] + 0.5 * col[c];
            assert!((half[0].image[[3, 4, c]] - want).abs() < 1e-7);
        }
        assert!(render_mask_exemplars(&[&without], TaskKind::Sem, 5, 1, 0.7, 0).is_err());
    }

    #[test]
    fn palette_is_in_range_and_distinct() {
        let mut seen = std::collections::HashSet::new();
        for k in 0..19 {
            let c = palette_color(TaskKind::Sem, k);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            seen.insert(c.map(|v| (v * 1000.0) as i32));
        }
        assert_eq!(seen.len(), 19);
    }
}
