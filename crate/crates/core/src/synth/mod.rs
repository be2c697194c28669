//! Procedural occupancy scenes with exact detection, segmentation and pose
//! ground truth.
//!
//! A scene shows 2 to 3 seat slots side by side. Each slot holds nothing or
//! one instance: a person (ellipse torso, circle head, capsule limbs along
//! the skeleton), a child seat (rounded rectangle with horizontal stripes),
//! an infant seat (rounded rectangle with vertical stripes) or an everyday
//! object. Boxes are the tight bounds of each rendered instance mask.

mod augment;
mod manifest;
mod targets;

pub use augment::{augment, AugmentParams};
pub use manifest::{read_dataset, read_ppm, write_dataset, write_ppm, Rle};
pub use targets::{HEATMAP_SIGMA, LIMB_HALF_WIDTH, POSE_STRIDE, encode_detect_targets, encode_pose_targets, CellTarget, DetectTargets, PoseTargets, ScaleTargets};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};
use crate::postprocess::{BBox, LabelMap};
use crate::spec::{DEFAULT_KEYPOINTS, DEFAULT_LIMBS};
use crate::tensor::Tensor;

/// Segmentation classes; detection class ids are these minus one.
pub const SEG_CLASSES: [&str; 5] = ["Empty", "Person", "Child seat", "Infant seat", "Everyday objects"];
pub const DET_CLASSES: [&str; 4] = ["Person", "Child seat", "Infant seat", "Everyday objects"];
pub const PERSON: usize = 0;
pub const CHILD_SEAT: usize = 1;
pub const INFANT_SEAT: usize = 2;
pub const EVERYDAY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub bbox: BBox,
    pub class_id: usize,
    /// Id of the instance in the instance map (1-based).
    pub instance: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonAnn {
    pub instance: u16,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<ObjectBox>,
    pub label_map: LabelMap,
    /// Per-pixel instance id, 0 where no instance was drawn.
    pub instance_map: Vec<u16>,
    pub persons: Vec<PersonAnn>,
}

impl SceneAnnotation {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            boxes: Vec::new(),
            label_map: LabelMap::filled(width, height, 0),
            instance_map: vec![0; width * height],
            persons: Vec::new(),
        }
    }

    /// Tight pixel bounds of an instance, `None` when it has no pixels.
    pub fn instance_bounds(&self, id: u16) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, &v) in self.instance_map.iter().enumerate() {
            if v == id {
                let (x, y) = (i % self.width, i / self.width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        (x0 != usize::MAX).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }

    pub fn instance_pixels(&self, id: u16) -> usize {
        self.instance_map.iter().filter(|&&v| v == id).count()
    }

    pub fn person_box(&self, p: &PersonAnn) -> BBox {
        p.bbox
    }
}

/// A rendered scene: `3 x H x W` RGB values in `[0, 1]`, quantized to 8 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub ann: SceneAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub image_size: usize,
    /// Inclusive range of seat slots per scene.
    pub slots: (usize, usize),
    /// Inclusive instance-count range per detection class.
    pub counts: [(usize, usize); 4],
    /// Standard deviation of the per-pixel texture noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self { image_size: 64, slots: (2, 3), counts: [(0, 2), (0, 1), (0, 1), (0, 1)], noise: 0.02, seed: 0 }
    }
}

impl GenSpec {
    pub fn new(image_size: usize) -> Self {
        Self { image_size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(MdspError::Config(format!("image size {} is not a positive multiple of 32", self.image_size)));
        }
        if self.slots.0 == 0 || self.slots.0 > self.slots.1 {
            return Err(MdspError::Config(format!("bad slot range {:?}", self.slots)));
        }
        if let Some(c) = self.counts.iter().find(|c| c.0 > c.1) {
            return Err(MdspError::Config(format!("bad count range {:?}", c)));
        }
        Ok(())
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
    ann: SceneAnnotation,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let plane = self.size * self.size;
        for (c, v) in color.iter().enumerate() {
            self.rgb[c * plane + y * self.size + x] = *v;
        }
    }

    /// Draws every pixel whose center satisfies `inside`, within the given
    /// pixel bounds, labelling it with the instance.
    fn fill(
        &mut self,
        bounds: (f64, f64, f64, f64),
        inside: impl Fn(f64, f64) -> bool,
        color: impl Fn(f64, f64) -> [f64; 3],
        label: Option<(u8, u16)>,
    ) {
        let s = self.size as f64;
        let x0 = bounds.0.floor().clamp(0.0, s) as usize;
        let y0 = bounds.1.floor().clamp(0.0, s) as usize;
        let x1 = bounds.2.ceil().clamp(0.0, s) as usize;
        let y1 = bounds.3.ceil().clamp(0.0, s) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if inside(px, py) {
                    self.paint(x, y, color(px, py));
                    if let Some((cls, inst)) = label {
                        self.ann.label_map.set(x, y, cls);
                        self.ann.instance_map[y * self.size + x] = inst;
                    }
                }
            }
        }
    }
}

fn in_round_rect(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> bool {
    let qx = px.clamp(x0 + r, x1 - r);
    let qy = py.clamp(y0 + r, y1 - r);
    (px - qx).powi(2) + (py - qy).powi(2) <= r * r && px >= x0 && px <= x1 && py >= y0 && py <= y1
}

fn segment_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / l2).clamp(0.0, 1.0) };
    (px - a.0 - t * dx).hypot(py - a.1 - t * dy)
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Slot contents: `None` for an empty seat, else a detection class.
fn layout(spec: &GenSpec, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let n = rng.random_range(spec.slots.0..=spec.slots.1);
    let mut items: Vec<usize> = Vec::new();
    for (class, &(lo, hi)) in spec.counts.iter().enumerate() {
        let k = rng.random_range(lo..=hi);
        items.extend(std::iter::repeat_n(class, k));
    }
    items.shuffle(rng);
    items.truncate(n);
    let mut slots: Vec<Option<usize>> = items.into_iter().map(Some).collect();
    slots.resize(n, None);
    slots.shuffle(rng);
    slots
}

#[allow(clippy::too_many_arguments)]
fn draw_person(cv: &mut Canvas, rng: &mut ChaCha8Rng, slot: (f64, f64), size: f64, inst: u16) -> Vec<Keypoint> {
    let sw = slot.1 - slot.0;
    let bh = rng.random_range(0.62..0.8) * size;
    let bw = (0.78 * sw).min(0.62 * bh);
    let cx = 0.5 * (slot.0 + slot.1) + rng.random_range(-0.04..0.04) * sw;
    let top = rng.random_range(0.06..(0.98 - bh / size - 0.04).max(0.07)) * size;
    let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.025..0.025) * bh;
    let head = (cx + j(rng), top + 0.13 * bh);
    let lsh = (cx - 0.34 * bw + j(rng), top + 0.33 * bh + j(rng));
    let rsh = (cx + 0.34 * bw + j(rng), top + 0.33 * bh + j(rng));
    let lhip = (cx - 0.22 * bw + j(rng), top + 0.64 * bh + j(rng));
    let rhip = (cx + 0.22 * bw + j(rng), top + 0.64 * bh + j(rng));
    let lknee = (cx - 0.3 * bw + j(rng), top + 0.9 * bh + j(rng));
    let rknee = (cx + 0.3 * bw + j(rng), top + 0.9 * bh + j(rng));
    let kps = [head, lsh, rsh, lhip, rhip, lknee, rknee];
    let head_r = 0.12 * bh;
    let limb_r = (0.065 * bh).max(2.5);
    let shirt = jitter(rng, [0.85, 0.3, 0.2], 0.1);
    let skin = jitter(rng, [0.95, 0.75, 0.6], 0.05);
    let pants = jitter(rng, [0.55, 0.15, 0.35], 0.08);
    let label = Some((1u8, inst));
    let torso_c = (0.25 * (lsh.0 + rsh.0 + lhip.0 + rhip.0), 0.25 * (lsh.1 + rsh.1 + lhip.1 + rhip.1));
    let (ta, tb) = (0.42 * bw, 0.2 * bh);
    cv.fill(
        (torso_c.0 - ta, torso_c.1 - tb, torso_c.0 + ta, torso_c.1 + tb),
        |x, y| ((x - torso_c.0) / ta).powi(2) + ((y - torso_c.1) / tb).powi(2) <= 1.0,
        |_, _| shirt,
        label,
    );
    for (l, &(a, b)) in DEFAULT_LIMBS.iter().enumerate() {
        let (pa, pb) = (kps[a], kps[b]);
        let color = if l >= 4 { pants } else { shirt };
        cv.fill(
            (pa.0.min(pb.0) - limb_r, pa.1.min(pb.1) - limb_r, pa.0.max(pb.0) + limb_r, pa.1.max(pb.1) + limb_r),
            |x, y| segment_dist(x, y, pa, pb) <= limb_r,
            |_, _| color,
            label,
        );
    }
    cv.fill(
        (head.0 - head_r, head.1 - head_r, head.0 + head_r, head.1 + head_r),
        |x, y| (x - head.0).hypot(y - head.1) <= head_r,
        |_, _| skin,
        label,
    );
    kps.iter().map(|&(x, y)| Keypoint { x, y, visible: true }).collect()
}

fn draw_seat(cv: &mut Canvas, rng: &mut ChaCha8Rng, slot: (f64, f64), size: f64, class: usize, inst: u16) {
    let sw = slot.1 - slot.0;
    let (fw, fh, base, horizontal) = match class {
        CHILD_SEAT => (rng.random_range(0.62..0.8), rng.random_range(0.5..0.62), [0.2, 0.35, 0.85], true),
        INFANT_SEAT => (rng.random_range(0.58..0.76), rng.random_range(0.34..0.44), [0.25, 0.75, 0.3], false),
        _ => (rng.random_range(0.36..0.5), rng.random_range(0.18..0.26), [0.9, 0.85, 0.2], true),
    };
    let (w, h) = (fw * sw, fh * size);
    let cx = 0.5 * (slot.0 + slot.1) + rng.random_range(-0.05..0.05) * sw;
    let cy = rng.random_range((0.1 * size + 0.5 * h)..(0.97 * size - 0.5 * h));
    let (x0, y0, x1, y1) = (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    let r = 0.2 * w.min(h);
    let base = jitter(rng, base, 0.06);
    let period = (size / 16.0).max(4.0);
    let light = base.map(|v| (v + 0.25).min(1.0));
    let striped = class != EVERYDAY;
    cv.fill(
        (x0, y0, x1, y1),
        |x, y| in_round_rect(x, y, x0, y0, x1, y1, r),
        |x, y| {
            let t = if horizontal { y - y0 } else { x - x0 };
            if striped && (t / period).floor() as i64 % 2 == 1 {
                light
            } else {
                base
            }
        },
        Some(((class + 1) as u8, inst)),
    );
}

/// Renders one scene. The same spec and seed always give the same sample.
pub fn generate_scene(spec: &GenSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let size = n as f64;
    let mut cv = Canvas { size: n, rgb: vec![0.0; 3 * n * n], ann: SceneAnnotation::empty(n, n) };
    let slots = layout(spec, &mut rng);
    let g = rng.random_range(0.38..0.5);
    let tint = rng.random_range(-0.04..0.04);
    cv.fill(
        (0.0, 0.0, size, size),
        |_, _| true,
        |_, y| {
            let v = g + 0.1 * (y / size - 0.5);
            [v + tint, v, v - tint]
        },
        None,
    );
    let sw = size / slots.len() as f64;
    // seat backs (background class)
    let seat = jitter(&mut rng, [0.28, 0.26, 0.3], 0.03);
    for i in 0..slots.len() {
        let (x0, x1) = (i as f64 * sw + 0.06 * sw, (i + 1) as f64 * sw - 0.06 * sw);
        let (y0, y1) = (0.05 * size, 0.98 * size);
        cv.fill((x0, y0, x1, y1), |x, y| in_round_rect(x, y, x0, y0, x1, y1, 0.15 * sw), |_, _| seat, None);
    }
    let mut next_inst = 1u16;
    let mut pending: Vec<(usize, u16, Option<Vec<Keypoint>>)> = Vec::new();
    for (i, content) in slots.iter().enumerate() {
        let Some(class) = *content else { continue };
        let slot = (i as f64 * sw, (i + 1) as f64 * sw);
        let inst = next_inst;
        next_inst += 1;
        if class == PERSON {
            let kps = draw_person(&mut cv, &mut rng, slot, size, inst);
            pending.push((class, inst, Some(kps)));
        } else {
            draw_seat(&mut cv, &mut rng, slot, size, class, inst);
            pending.push((class, inst, None));
        }
    }
    for (class, inst, kps) in pending {
        let Some(bbox) = cv.ann.instance_bounds(inst) else { continue };
        cv.ann.boxes.push(ObjectBox { bbox, class_id: class, instance: inst });
        if let Some(keypoints) = kps {
            cv.ann.persons.push(PersonAnn { instance: inst, bbox, keypoints });
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in cv.rgb.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let data: Vec<f32> = cv.rgb.iter().map(|&v| quantize(v)).collect();
    Ok(Sample { image: Tensor::new(vec![3, n, n], data)?, ann: cv.ann })
}

/// Rounds to the nearest 8-bit level so images survive PPM round trips.
pub(crate) fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Generates `count` scenes with seeds derived from `spec.seed`.
pub fn generate_dataset(spec: &GenSpec, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_scene(spec, scene_seed(spec.seed, i))).collect()
}

pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Keypoint names of the default schema.
pub fn keypoint_names() -> &'static [&'static str] {
    &DEFAULT_KEYPOINTS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let s = GenSpec::new(64);
        assert_eq!(generate_scene(&s, 11).unwrap(), generate_scene(&s, 11).unwrap());
        assert_ne!(generate_scene(&s, 11).unwrap().image, generate_scene(&s, 12).unwrap().image);
    }

    #[test]
    fn zero_objects_gives_empty_annotation() {
        let s = GenSpec { counts: [(0, 0); 4], ..GenSpec::new(64) };
        let sample = generate_scene(&s, 3).unwrap();
        assert!(sample.ann.boxes.is_empty() && sample.ann.persons.is_empty());
        assert!(sample.ann.label_map.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn boxes_are_tight_and_keypoints_inside() {
        let s = GenSpec { counts: [(1, 2), (0, 1), (0, 1), (0, 1)], ..GenSpec::new(96) };
        for seed in 0..50 {
            let a = generate_scene(&s, seed).unwrap().ann;
            assert!(!a.boxes.is_empty());
            for b in &a.boxes {
                assert_eq!(a.instance_bounds(b.instance), Some(b.bbox));
            }
            for p in &a.persons {
                for k in &p.keypoints {
                    assert!(p.bbox.contains(k.x, k.y));
                    let (x, y) = (k.x as usize, k.y as usize);
                    assert_eq!(a.instance_map[y * a.width + x], p.instance);
                }
            }
        }
    }
}
