use crate::detect::{RawDetectOutput, FIELD_BOX, FIELD_CLASS, FIELD_OBJ};
use crate::error::{MdspError, Result};
use crate::postprocess::shape_iou;
use crate::spec::{NetworkSpec, ANCHORS_PER_SCALE, DETECT_STRIDES};
use crate::tensor::{Element, Tensor};

use super::SceneAnnotation;

/// Standard deviation of the keypoint Gaussians, in stride-8 cells.
pub const HEATMAP_SIGMA: f64 = 2.0;
/// Half-width of a limb's PAF corridor, in stride-8 cells.
pub const LIMB_HALF_WIDTH: f64 = 1.0;
pub const POSE_STRIDE: usize = 8;
/// IoU above which a non-assigned anchor is excluded from the no-object loss.
pub const IGNORE_IOU: f64 = 0.5;
/// Logit magnitude used when turning targets back into raw outputs.
const SURROGATE_LOGIT: f64 = 20.0;
const FRAC_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellTarget {
    NoObject,
    Ignore,
    Object {
        /// Box center within the cell, in `(0, 1)`.
        fx: f64,
        fy: f64,
        /// Log ratio of box to anchor extent.
        tw: f64,
        th: f64,
        class_id: usize,
    },
}

/// Targets of one detection scale, indexed `(anchor * N + y) * N + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTargets {
    pub grid: usize,
    pub stride: usize,
    pub cells: Vec<CellTarget>,
}

impl ScaleTargets {
    pub fn index(&self, anchor: usize, y: usize, x: usize) -> usize {
        (anchor * self.grid + y) * self.grid + x
    }
}

/// Detection targets for one image, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectTargets {
    pub scales: Vec<ScaleTargets>,
}

impl DetectTargets {
    pub fn num_objects(&self) -> usize {
        self.scales
            .iter()
            .flat_map(|s| &s.cells)
            .filter(|c| matches!(c, CellTarget::Object { .. }))
            .count()
    }

    /// A raw output (batch 1) that decodes exactly to the assigned boxes;
    /// saturated logits stand in for infinite ones.
    pub fn to_raw_logits<T: Element>(&self, num_classes: usize) -> RawDetectOutput<T> {
        let fields = 5 + num_classes;
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let scales = self
            .scales
            .iter()
            .map(|s| {
                let n = s.grid;
                let mut data = vec![0.0f64; ANCHORS_PER_SCALE * fields * n * n];
                for a in 0..ANCHORS_PER_SCALE {
                    for y in 0..n {
                        for x in 0..n {
                            let at = |f: usize| ((a * fields + f) * n + y) * n + x;
                            match s.cells[s.index(a, y, x)] {
                                CellTarget::Object { fx, fy, tw, th, class_id } => {
                                    data[at(FIELD_OBJ)] = SURROGATE_LOGIT;
                                    data[at(FIELD_BOX)] = logit(fx);
                                    data[at(FIELD_BOX + 1)] = logit(fy);
                                    data[at(FIELD_BOX + 2)] = tw;
                                    data[at(FIELD_BOX + 3)] = th;
                                    for c in 0..num_classes {
                                        data[at(FIELD_CLASS + c)] =
                                            if c == class_id { SURROGATE_LOGIT } else { -SURROGATE_LOGIT };
                                    }
                                }
                                _ => data[at(FIELD_OBJ)] = -SURROGATE_LOGIT,
                            }
                        }
                    }
                }
                let data = data.into_iter().map(T::from_f64).collect();
                Tensor::new(vec![1, ANCHORS_PER_SCALE * fields, n, n], data).expect("target extent")
            })
            .collect();
        RawDetectOutput { scales, num_classes }
    }
}

/// Assigns every box to the free anchor slot of highest co-centered IoU
/// (falling back to the next anchor when a slot is already taken) and marks
/// other anchors with IoU above [`IGNORE_IOU`] at their cells as ignored.
pub fn encode_detect_targets(ann: &SceneAnnotation, spec: &NetworkSpec) -> Result<DetectTargets> {
    let size = spec.input_size as f64;
    let mut scales: Vec<ScaleTargets> = DETECT_STRIDES
        .iter()
        .map(|&stride| {
            let grid = spec.input_size / stride;
            ScaleTargets { grid, stride, cells: vec![CellTarget::NoObject; ANCHORS_PER_SCALE * grid * grid] }
        })
        .collect();
    let mut ignores = Vec::new();
    for b in &ann.boxes {
        let bb = b.bbox;
        if !(bb.cx >= 0.0 && bb.cx < size && bb.cy >= 0.0 && bb.cy < size) {
            return Err(MdspError::InvalidArgument(format!(
                "box center ({}, {}) outside the {}x{} image",
                bb.cx, bb.cy, spec.input_size, spec.input_size
            )));
        }
        if b.class_id >= spec.num_det_classes {
            return Err(MdspError::InvalidArgument(format!("class {} out of range", b.class_id)));
        }
        let mut ranked: Vec<(usize, f64)> =
            spec.anchors.iter().enumerate().map(|(i, &a)| (i, shape_iou((bb.w, bb.h), a))).collect();
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let input = spec.input_size;
        let cell_of = |anchor: usize| {
            let (s, slot) = NetworkSpec::anchor_location(anchor);
            let stride = DETECT_STRIDES[s];
            let grid = input / stride;
            let gx = ((bb.cx / stride as f64).floor() as usize).min(grid - 1);
            let gy = ((bb.cy / stride as f64).floor() as usize).min(grid - 1);
            (s, slot, gx, gy)
        };
        let chosen = ranked.iter().find(|&&(a, _)| {
            let (s, slot, gx, gy) = cell_of(a);
            !matches!(scales[s].cells[scales[s].index(slot, gy, gx)], CellTarget::Object { .. })
        });
        let Some(&(best, _)) = chosen else { continue };
        let (s, slot, gx, gy) = cell_of(best);
        let stride = DETECT_STRIDES[s] as f64;
        let anchor = spec.anchors[best];
        let idx = scales[s].index(slot, gy, gx);
        scales[s].cells[idx] = CellTarget::Object {
            fx: (bb.cx / stride - gx as f64).clamp(FRAC_EPS, 1.0 - FRAC_EPS),
            fy: (bb.cy / stride - gy as f64).clamp(FRAC_EPS, 1.0 - FRAC_EPS),
            tw: (bb.w / anchor.0).ln(),
            th: (bb.h / anchor.1).ln(),
            class_id: b.class_id,
        };
        for &(a, v) in &ranked {
            if a != best && v > IGNORE_IOU {
                let (s, slot, gx, gy) = cell_of(a);
                ignores.push((s, scales[s].index(slot, gy, gx)));
            }
        }
    }
    for (s, idx) in ignores {
        if scales[s].cells[idx] == CellTarget::NoObject {
            scales[s].cells[idx] = CellTarget::Ignore;
        }
    }
    Ok(DetectTargets { scales })
}

/// Stride-8 pose targets, `(2L, g, g)` PAFs and `(K [+1], g, g)` heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTargets {
    pub grid: usize,
    pub paf: Vec<f64>,
    pub heatmap: Vec<f64>,
}

impl PoseTargets {
    pub fn paf_tensor<T: Element>(&self) -> Tensor<T> {
        let c = self.paf.len() / (self.grid * self.grid);
        Tensor::new(vec![1, c, self.grid, self.grid], self.paf.iter().map(|&v| T::from_f64(v)).collect())
            .expect("paf extent")
    }

    pub fn heatmap_tensor<T: Element>(&self) -> Tensor<T> {
        let c = self.heatmap.len() / (self.grid * self.grid);
        Tensor::new(vec![1, c, self.grid, self.grid], self.heatmap.iter().map(|&v| T::from_f64(v)).collect())
            .expect("heatmap extent")
    }
}

/// Image coordinate to stride-8 grid coordinate (cell `i` centered at `i`).
pub fn to_grid(p: f64) -> f64 {
    p / POSE_STRIDE as f64 - 0.5
}

pub fn encode_pose_targets(ann: &SceneAnnotation, spec: &NetworkSpec) -> PoseTargets {
    let g = spec.input_size / POSE_STRIDE;
    let plane = g * g;
    let k = spec.num_keypoints;
    let mut heat = vec![0.0f64; spec.heatmap_channels() * plane];
    for p in &ann.persons {
        for (kp, pt) in p.keypoints.iter().enumerate().take(k) {
            if !pt.visible {
                continue;
            }
            let (gx, gy) = (to_grid(pt.x), to_grid(pt.y));
            for y in 0..g {
                for x in 0..g {
                    let d2 = (x as f64 - gx).powi(2) + (y as f64 - gy).powi(2);
                    let v = (-d2 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp();
                    let slot = &mut heat[kp * plane + y * g + x];
                    *slot = slot.max(v);
                }
            }
        }
    }
    if spec.heatmap_background {
        for i in 0..plane {
            let m = (0..k).map(|c| heat[c * plane + i]).fold(0.0, f64::max);
            heat[k * plane + i] = 1.0 - m;
        }
    }
    let mut paf = vec![0.0; 2 * spec.num_limbs() * plane];
    for (l, &(a, b)) in spec.limb_defs.iter().enumerate() {
        let mut count = vec![0u32; plane];
        for p in &ann.persons {
            let (Some(pa), Some(pb)) = (p.keypoints.get(a), p.keypoints.get(b)) else { continue };
            if !pa.visible || !pb.visible {
                continue;
            }
            let (ax, ay) = (to_grid(pa.x), to_grid(pa.y));
            let (dx, dy) = (to_grid(pb.x) - ax, to_grid(pb.y) - ay);
            let len = dx.hypot(dy);
            if len == 0.0 {
                continue;
            }
            let (ux, uy) = (dx / len, dy / len);
            for y in 0..g {
                for x in 0..g {
                    let (rx, ry) = (x as f64 - ax, y as f64 - ay);
                    let along = rx * ux + ry * uy;
                    let across = (rx * uy - ry * ux).abs();
                    if along >= -LIMB_HALF_WIDTH && along <= len + LIMB_HALF_WIDTH && across <= LIMB_HALF_WIDTH {
                        let i = y * g + x;
                        paf[2 * l * plane + i] += ux;
                        paf[(2 * l + 1) * plane + i] += uy;
                        count[i] += 1;
                    }
                }
            }
        }
        for (i, &c) in count.iter().enumerate() {
            if c > 1 {
                paf[2 * l * plane + i] /= c as f64;
                paf[(2 * l + 1) * plane + i] /= c as f64;
            }
        }
    }
    PoseTargets { grid: g, paf, heatmap: heat }
}
