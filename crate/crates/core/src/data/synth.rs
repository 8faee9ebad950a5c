//! Deterministic synthetic driving scenes.
//!
//! A scene is a sky/building backdrop above a horizon, a road trapezoid
//! converging to a vanishing point, lane stripes painted inside the road, and
//! a handful of colored objects whose boxes are the tight bounds of their
//! visible pixels.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{TaskSet, K_DET};

/// Semantic categories (19), Cityscapes-style ordering.
pub const SEM_ROAD: u8 = 0;
pub const SEM_SIDEWALK: u8 = 1;
pub const SEM_BUILDING: u8 = 2;
pub const SEM_WALL: u8 = 3;
pub const SEM_FENCE: u8 = 4;
pub const SEM_POLE: u8 = 5;
pub const SEM_TRAFFIC_LIGHT: u8 = 6;
pub const SEM_TRAFFIC_SIGN: u8 = 7;
pub const SEM_VEGETATION: u8 = 8;
pub const SEM_TERRAIN: u8 = 9;
pub const SEM_SKY: u8 = 10;
pub const SEM_PERSON: u8 = 11;

pub const SEM_NAMES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

pub const DET_NAMES: [&str; K_DET] = [
    "pedestrian",
    "rider",
    "car",
    "truck",
    "bus",
    "motorcycle",
    "bicycle",
    "traffic light",
    "traffic sign",
];

/// Semantic category painted under each detection category.
pub const DET_TO_SEM: [u8; K_DET] = [11, 12, 13, 14, 15, 17, 18, 6, 7];

/// Base RGB color per semantic category, in [0,1].
const SEM_COLORS: [[f32; 3]; 19] = [
    [0.30, 0.30, 0.32],
    [0.55, 0.50, 0.48],
    [0.45, 0.35, 0.30],
    [0.50, 0.45, 0.40],
    [0.60, 0.55, 0.45],
    [0.40, 0.40, 0.40],
    [0.95, 0.65, 0.10],
    [0.85, 0.85, 0.10],
    [0.20, 0.50, 0.20],
    [0.50, 0.60, 0.35],
    [0.45, 0.65, 0.90],
    [0.85, 0.15, 0.20],
    [0.90, 0.30, 0.60],
    [0.10, 0.20, 0.70],
    [0.20, 0.55, 0.55],
    [0.80, 0.45, 0.10],
    [0.40, 0.20, 0.50],
    [0.60, 0.10, 0.80],
    [0.70, 0.70, 0.95],
];

const LANE_COLOR: [f32; 3] = [0.95, 0.95, 0.90];

/// Scene generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 64 != 0 || self.width % 64 != 0 {
            return Err(Error::Config(format!(
                "scene size {}x{} must be a positive multiple of 64",
                self.height, self.width
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "empty object count range [{}, {}]",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

/// One detection box in pixel coordinates; `x2`/`y2` are exclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub category: usize,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoxAnnotation {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_valid(&self, height: usize, width: usize) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= width as f32
            && self.y2 <= height as f32
            && self.category < K_DET
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotations {
    pub boxes: Vec<BoxAnnotation>,
    pub sem_mask: Option<Array2<u8>>,
    pub driv_mask: Option<Array2<u8>>,
    pub lane_mask: Option<Array2<u8>>,
    /// Per-pixel instance index (0 = none, i+1 = `boxes[i]`). Only kept for
    /// freshly generated scenes; not persisted.
    pub instance_mask: Option<Array2<u16>>,
}

/// One image with whatever labels it carries. `image` is H×W×3 in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub annotations: Annotations,
    pub split_tags: TaskSet,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

struct Painter<'a> {
    image: &'a mut Array3<f32>,
    sem: &'a mut Array2<u8>,
}

impl Painter<'_> {
    fn paint(&mut self, y: usize, x: usize, cat: u8, color: [f32; 3]) {
        self.sem[[y, x]] = cat;
        for c in 0..3 {
            self.image[[y, x, c]] = color[c];
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut out = base;
    for v in out.iter_mut() {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    out
}

/// Scene id used by the generator for a given seed.
pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:08}")
}

/// Generate one scene. A pure function of `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut sem = Array2::<u8>::from_elem((h, w), SEM_SKY);
    let mut driv = Array2::<u8>::zeros((h, w));
    let mut lane = Array2::<u8>::zeros((h, w));
    let mut inst = Array2::<u16>::zeros((h, w));

    let horizon = ((h as f32) * rng.random_range(0.38..0.5)) as usize;
    let sky = jitter(&mut rng, SEM_COLORS[SEM_SKY as usize], 0.05);
    let terrain = jitter(&mut rng, SEM_COLORS[SEM_TERRAIN as usize], 0.05);
    {
        let mut p = Painter {
            image: &mut image,
            sem: &mut sem,
        };
        for y in 0..h {
            for x in 0..w {
                if y < horizon {
                    p.paint(y, x, SEM_SKY, sky);
                } else {
                    p.paint(y, x, SEM_TERRAIN, terrain);
                }
            }
        }

        // Buildings and vegetation standing on the horizon.
        let mut x = 0usize;
        while x < w {
            let bw = rng.random_range(w / 10..=w / 4).max(4);
            let top = horizon.saturating_sub(rng.random_range(horizon / 4..=horizon * 3 / 4 + 1));
            let (cat, base) = if rng.random_bool(0.7) {
                (SEM_BUILDING, SEM_COLORS[SEM_BUILDING as usize])
            } else {
                (SEM_VEGETATION, SEM_COLORS[SEM_VEGETATION as usize])
            };
            let color = jitter(&mut rng, base, 0.08);
            for yy in top..horizon {
                for xx in x..(x + bw).min(w) {
                    p.paint(yy, xx, cat, color);
                }
            }
            x += bw + rng.random_range(0..=w / 16);
        }
    }

    // Road trapezoid converging to a vanishing point on the horizon.
    let vx = (w as f32) * rng.random_range(0.35..0.65);
    let top_half = (w as f32) * rng.random_range(0.02..0.06);
    let bottom_left = (w as f32) * rng.random_range(-0.25..0.15);
    let bottom_right = (w as f32) * rng.random_range(0.85..1.25);
    let road_span = |y: usize| -> (f32, f32) {
        let t = (y as f32 + 0.5 - horizon as f32) / ((h - horizon) as f32);
        let l = (vx - top_half) * (1.0 - t) + bottom_left * t;
        let r = (vx + top_half) * (1.0 - t) + bottom_right * t;
        (l, r)
    };
    let road = jitter(&mut rng, SEM_COLORS[SEM_ROAD as usize], 0.04);
    let sidewalk = jitter(&mut rng, SEM_COLORS[SEM_SIDEWALK as usize], 0.04);
    let n_lanes = rng.random_range(1..=3usize);
    let lane_fracs: Vec<f32> = (0..n_lanes)
        .map(|i| (i as f32 + 1.0) / (n_lanes as f32 + 1.0) + rng.random_range(-0.05..0.05))
        .collect();
    {
        let mut p = Painter {
            image: &mut image,
            sem: &mut sem,
        };
        for y in horizon..h {
            let (l, r) = road_span(y);
            let t = (y - horizon) as f32 / (h - horizon) as f32;
            let curb = 1.0 + 6.0 * t;
            for x in 0..w {
                let xc = x as f32 + 0.5;
                if xc >= l && xc < r {
                    p.paint(y, x, SEM_ROAD, road);
                    driv[[y, x]] = 1;
                    let half_stripe = 0.5 + 1.0 * t;
                    for f in &lane_fracs {
                        let lx = l + (r - l) * f;
                        if (xc - lx).abs() <= half_stripe {
                            lane[[y, x]] = 1;
                            for c in 0..3 {
                                p.image[[y, x, c]] = LANE_COLOR[c];
                            }
                        }
                    }
                } else if (xc >= l - curb && xc < l) || (xc >= r && xc < r + curb) {
                    p.paint(y, x, SEM_SIDEWALK, sidewalk);
                }
            }
        }
    }

    // Objects. Later objects occlude earlier ones.
    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut cats = Vec::with_capacity(n_obj);
    for i in 0..n_obj {
        let cat = rng.random_range(0..K_DET);
        let sem_cat = DET_TO_SEM[cat];
        let color = jitter(&mut rng, SEM_COLORS[sem_cat as usize], 0.08);
        let (x0, y0, x1, y1, ellipse) = if cat >= 7 {
            // Traffic light / sign: small, above the road.
            let s = rng.random_range((h / 32).max(3)..=(h / 12).max(4));
            let cy = rng.random_range(horizon.saturating_sub(h / 4)..=horizon.max(1) - 1);
            let cx = rng.random_range(0..w);
            let (bw, bh) = if cat == 7 { (s / 2 + 1, s) } else { (s, s) };
            (cx, cy, cx + bw, cy + bh, cat == 8)
        } else {
            let bottom = rng.random_range(horizon + (h - horizon) / 6..h);
            let depth = (bottom - horizon) as f32 / (h - horizon) as f32;
            let scale = (h as f32) * (0.05 + 0.3 * depth);
            let (bw, bh) = match cat {
                0 | 1 => (scale * 0.35, scale * 0.9),
                2 => (scale * 1.1, scale * 0.7),
                3 | 4 => (scale * 1.3, scale * 1.0),
                _ => (scale * 0.45, scale * 0.6),
            };
            let (l, r) = road_span(bottom.min(h - 1));
            let cx = rng.random_range(l.max(0.0)..r.min(w as f32).max(l.max(0.0) + 1.0));
            let x0 = (cx - bw / 2.0).max(0.0) as usize;
            let y0 = (bottom as f32 - bh).max(0.0) as usize;
            (
                x0,
                y0,
                (cx + bw / 2.0) as usize + 1,
                bottom,
                matches!(cat, 0 | 1),
            )
        };
        let (x1, y1) = (x1.min(w), y1.min(h));
        let (x0, y0) = (x0.min(x1), y0.min(y1));
        let (cxf, cyf) = ((x0 + x1) as f32 / 2.0, (y0 + y1) as f32 / 2.0);
        let (rx, ry) = (
            ((x1 - x0) as f32 / 2.0).max(0.5),
            ((y1 - y0) as f32 / 2.0).max(0.5),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                if ellipse {
                    let dx = (x as f32 + 0.5 - cxf) / rx;
                    let dy = (y as f32 + 0.5 - cyf) / ry;
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                inst[[y, x]] = (i + 1) as u16;
                sem[[y, x]] = sem_cat;
                lane[[y, x]] = 0;
                for c in 0..3 {
                    image[[y, x, c]] = color[c];
                }
            }
        }
        cats.push(cat);
    }

    // Pixel noise, then quantize to 8 bits so PNG storage is lossless.
    for v in image.iter_mut() {
        let n: f32 = rng.random_range(-0.02..0.02);
        *v = ((*v + n).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    // Tight boxes from visible instance pixels; fully occluded objects drop out.
    let mut bounds = vec![(usize::MAX, usize::MAX, 0usize, 0usize, false); n_obj];
    for ((y, x), &id) in inst.indexed_iter() {
        if id == 0 {
            continue;
        }
        let b = &mut bounds[id as usize - 1];
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x + 1);
        b.3 = b.3.max(y + 1);
        b.4 = true;
    }
    let mut boxes = Vec::new();
    let mut remap = vec![0u16; n_obj + 1];
    for (i, b) in bounds.iter().enumerate() {
        if b.4 {
            boxes.push(BoxAnnotation {
                category: cats[i],
                x1: b.0 as f32,
                y1: b.1 as f32,
                x2: b.2 as f32,
                y2: b.3 as f32,
            });
            remap[i + 1] = boxes.len() as u16;
        }
    }
    inst.mapv_inplace(|v| remap[v as usize]);

    Ok(Sample {
        id: scene_id(seed),
        image,
        annotations: Annotations {
            boxes,
            sem_mask: Some(sem),
            driv_mask: Some(driv),
            lane_mask: Some(lane),
            instance_mask: Some(inst),
        },
        split_tags: TaskSet::FULL,
    })
}

/// True when every semantic label is a non-object category.
pub fn is_background_category(cat: u8) -> bool {
    !DET_TO_SEM.contains(&cat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(h: usize, w: usize, lo: usize, hi: usize) -> SceneSpec {
        SceneSpec {
            height: h,
            width: w,
            min_objects: lo,
            max_objects: hi,
        }
    }

    #[test]
    fn deterministic() {
        let s = spec(128, 128, 1, 5);
        assert_eq!(
            generate_scene(7, &s).unwrap(),
            generate_scene(7, &s).unwrap()
        );
        assert_ne!(
            generate_scene(7, &s).unwrap().image,
            generate_scene(8, &s).unwrap().image
        );
    }

    #[test]
    fn rejects_bad_size() {
        assert!(matches!(
            generate_scene(0, &spec(100, 128, 0, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_scene(0, &spec(128, 128, 3, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_object_range_has_no_objects() {
        for seed in 0..5 {
            let s = generate_scene(seed, &spec(128, 192, 0, 0)).unwrap();
            assert!(s.annotations.boxes.is_empty());
            let sem = s.annotations.sem_mask.as_ref().unwrap();
            assert!(sem.iter().all(|&c| is_background_category(c)));
        }
    }

    /// Mask-scan oracle: each stored box is the min/max occupied row/col of its
    /// instance mask.
    #[test]
    fn boxes_are_tight_instance_bounds() {
        for seed in [1u64, 2, 3, 11, 42] {
            let s = generate_scene(seed, &spec(256, 256, 3, 3)).unwrap();
            let inst = s.annotations.instance_mask.as_ref().unwrap();
            for (i, b) in s.annotations.boxes.iter().enumerate() {
                let id = (i + 1) as u16;
                let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
                for r in 0..256 {
                    for c in 0..256 {
                        if inst[[r, c]] == id {
                            r0 = r0.min(r);
                            r1 = r1.max(r);
                            c0 = c0.min(c);
                            c1 = c1.max(c);
                        }
                    }
                }
                assert_eq!(
                    (b.x1, b.y1, b.x2, b.y2),
                    (c0 as f32, r0 as f32, c1 as f32 + 1.0, r1 as f32 + 1.0)
                );
                assert!(b.is_valid(256, 256));
            }
        }
    }

    #[test]
    fn all_annotation_kinds_present_and_consistent() {
        let s = generate_scene(5, &spec(128, 128, 2, 6)).unwrap();
        let a = &s.annotations;
        assert_eq!(a.sem_mask.as_ref().unwrap().dim(), (128, 128));
        assert!(a.sem_mask.as_ref().unwrap().iter().all(|&c| c < 19));
        assert!(a.driv_mask.as_ref().unwrap().iter().all(|&c| c < 2));
        assert!(a.lane_mask.as_ref().unwrap().iter().all(|&c| c < 2));
        assert!(a.driv_mask.as_ref().unwrap().iter().any(|&c| c == 1));
        // lanes only inside the road
        for (ix, &l) in a.lane_mask.as_ref().unwrap().indexed_iter() {
            if l == 1 {
                assert_eq!(a.driv_mask.as_ref().unwrap()[ix], 1);
            }
        }
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
