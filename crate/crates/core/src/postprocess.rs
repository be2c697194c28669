//! Decoding of raw network outputs: boxes, NMS, anchor clustering,
//! segmentation argmax, heatmap peaks, PAF scoring and skeleton grouping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{RawDetectOutput, FIELD_BOX, FIELD_CLASS, FIELD_OBJ};
use crate::error::{MdspError, Result};
use crate::pose::PoseRawOutput;
use crate::spec::{NetworkSpec, ANCHORS_PER_SCALE};
use crate::tensor::kernels::resize_bilinear;
use crate::tensor::{Element, Tensor};

/// Axis-aligned box as center and extent, in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two `(w, h)` shapes placed on a common center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_argmax(logits: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let mx = logits[best];
    let z: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
    (best, 1.0 / z)
}

/// Decodes every batch item of a raw detection output. Boxes whose score
/// `sigmoid(obj) * max softmax(class)` is below `conf_thresh` are dropped.
pub fn decode_boxes<T: Element>(raw: &RawDetectOutput<T>, spec: &NetworkSpec, conf_thresh: f64) -> Vec<Vec<Detection>> {
    (0..raw.batch()).map(|b| decode_image(raw, spec, b, conf_thresh)).collect()
}

pub fn decode_image<T: Element>(raw: &RawDetectOutput<T>, spec: &NetworkSpec, b: usize, conf_thresh: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    let mut cls = vec![0.0; raw.num_classes];
    for s in 0..raw.scales.len() {
        let n = raw.grid(s);
        let stride = raw.stride(s) as f64;
        let anchors = spec.scale_anchors(s);
        for a in 0..ANCHORS_PER_SCALE {
            for gy in 0..n {
                for gx in 0..n {
                    let f = |field: usize| raw.get(s, b, a, field, gy, gx).as_f64();
                    let obj = sigmoid(f(FIELD_OBJ));
                    if obj < conf_thresh {
                        continue;
                    }
                    for (c, v) in cls.iter_mut().enumerate() {
                        *v = f(FIELD_CLASS + c);
                    }
                    let (class_id, p) = if cls.is_empty() { (0, 1.0) } else { softmax_argmax(&cls) };
                    let score = obj * p;
                    if score < conf_thresh {
                        continue;
                    }
                    let bbox = BBox {
                        cx: (sigmoid(f(FIELD_BOX)) + gx as f64) * stride,
                        cy: (sigmoid(f(FIELD_BOX + 1)) + gy as f64) * stride,
                        w: anchors[a].0 * f(FIELD_BOX + 2).exp(),
                        h: anchors[a].1 * f(FIELD_BOX + 3).exp(),
                    };
                    if bbox.w > 0.0 && bbox.h > 0.0 && bbox.w.is_finite() && bbox.h.is_finite() {
                        out.push(Detection { bbox, class_id, score });
                    }
                }
            }
        }
    }
    out
}

/// Class-wise greedy non-maximum suppression. Candidates are visited by
/// descending score, then ascending class, then input order; a candidate is
/// dropped when its IoU with a kept box of the same class exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .total_cmp(&dets[i].score)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

fn kmeans_assign(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> Vec<usize> {
    boxes
        .iter()
        .map(|&b| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &c) in centroids.iter().enumerate() {
                let d = 1.0 - shape_iou(b, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Sum over boxes of `1 - IoU(box, nearest centroid)`.
pub fn kmeans_cost(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    boxes
        .iter()
        .map(|&b| centroids.iter().map(|&c| 1.0 - shape_iou(b, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Mean over boxes of the best IoU with any anchor.
pub fn mean_best_iou(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    if boxes.is_empty() {
        return 0.0;
    }
    1.0 - kmeans_cost(boxes, anchors) / boxes.len() as f64
}

/// k-means over `(w, h)` shapes with `1 - IoU` distance and k-means++
/// seeding. Returns the centroids sorted by ascending area.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0)) {
        return Err(MdspError::InvalidArgument(format!("box shape {:?} is not positive", b)));
    }
    let mut distinct: Vec<(f64, f64)> = boxes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(MdspError::InvalidArgument(format!(
            "cannot form {} clusters from {} distinct boxes",
            k,
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![boxes[rng.random_range(0..boxes.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let d = centroids.iter().map(|&c| 1.0 - shape_iou(b, c)).fold(f64::INFINITY, f64::min);
                d * d
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if pick < d {
                    break;
                }
                pick -= d;
            }
        }
        centroids.push(boxes[chosen.expect("a box differs from every centroid")]);
    }
    let mut assign = kmeans_assign(boxes, &centroids);
    for _ in 0..300 {
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let (mut sw, mut sh, mut n) = (0.0, 0.0, 0usize);
            for (b, &a) in boxes.iter().zip(&assign) {
                if a == c {
                    sw += b.0;
                    sh += b.1;
                    n += 1;
                }
            }
            if n > 0 {
                *centroid = (sw / n as f64, sh / n as f64);
            }
        }
        let next = kmeans_assign(boxes, &centroids);
        if next == assign {
            break;
        }
        assign = next;
    }
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(centroids)
}

/// Dense per-pixel class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }
}

/// Per-pixel argmax of `(1, C, H, W)` or `(C, H, W)` logits; ties go to the
/// lower class index.
pub fn seg_decode<T: Element>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (c, h, w) = match logits.shape() {
        &[1, c, h, w] | &[c, h, w] => (c, h, w),
        s => return Err(MdspError::Shape(format!("seg_decode expects (1, C, H, W) logits, got {:?}", s))),
    };
    let d = logits.data();
    let plane = h * w;
    let mut out = LabelMap::filled(w, h, 0);
    for p in 0..plane {
        let mut best = 0;
        for k in 1..c {
            if d[k * plane + p] > d[best * plane + p] {
                best = k;
            }
        }
        out.data[p] = best as u8;
    }
    Ok(out)
}

/// A single-channel map in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len(), "plane extent");
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at the pixel containing continuous point `(x, y)`, clamped to the plane.
    pub fn nearest(&self, x: f64, y: f64) -> f64 {
        let xi = (x.floor().max(0.0) as usize).min(self.width - 1);
        let yi = (y.floor().max(0.0) as usize).min(self.height - 1);
        self.get(xi, yi)
    }
}

/// Splits channels of a `(1, C, H, W)` tensor into planes, resizing each
/// bilinearly to `size x size`.
pub fn resized_planes<T: Element>(t: &Tensor<T>, size: usize) -> Result<Vec<Plane>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(MdspError::Shape(format!("expected a single batch item, got {:?}", t.shape())));
    }
    let src: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    let up = resize_bilinear(&src, c, h, w, size, size);
    Ok(up.chunks(size * size).map(|p| Plane::new(size, size, p.to_vec())).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Continuous pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub x: f64,
    pub y: f64,
    pub conf: f64,
}

/// Local maxima over the 4-neighborhood with value `>= thresh`. A plateau of
/// equal values is reported once, at its first pixel in row-major order.
/// Peaks sit at pixel centers.
pub fn find_peaks(plane: &Plane, thresh: f64) -> Vec<Peak> {
    let (w, h) = (plane.width, plane.height);
    let mut seen = vec![false; w * h];
    let mut peaks = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let v = plane.data[start];
        if seen[start] || v < thresh {
            continue;
        }
        // flood the equal-valued component, checking it is not dominated
        let mut is_max = true;
        stack.push(start);
        seen[start] = true;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            let mut nbrs = [None; 4];
            if x > 0 {
                nbrs[0] = Some(p - 1);
            }
            if x + 1 < w {
                nbrs[1] = Some(p + 1);
            }
            if y > 0 {
                nbrs[2] = Some(p - w);
            }
            if y + 1 < h {
                nbrs[3] = Some(p + w);
            }
            for q in nbrs.into_iter().flatten() {
                let u = plane.data[q];
                if u > v {
                    is_max = false;
                } else if u == v && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        if is_max {
            peaks.push(Peak { x: (start % w) as f64 + 0.5, y: (start / w) as f64 + 0.5, conf: v });
        }
    }
    peaks
}

/// Sub-cell refinement of a peak on the low-resolution map it was upsampled
/// from. Fits a parabola through the log-values of the nearest cell and its
/// axis neighbors, which is exact for Gaussian bumps. Where a neighbor is
/// missing (at the border) the curvature of a Gaussian of width `sigma`
/// cells is assumed instead.
pub fn refine_peak(low: &Plane, stride: f64, peak: &Peak, sigma: f64) -> Peak {
    let gx = peak.x / stride - 0.5;
    let gy = peak.y / stride - 0.5;
    let cx = (gx.round().max(0.0) as usize).min(low.width - 1);
    let cy = (gy.round().max(0.0) as usize).min(low.height - 1);
    let floor = 1e-6;
    let offset = |l: Option<f64>, c: f64, r: Option<f64>| -> f64 {
        if c <= floor {
            return 0.0;
        }
        let c2 = c.ln();
        let d = match (l, r) {
            (Some(l), Some(r)) if l > floor && r > floor && c >= l && c >= r => {
                let (l, r) = (l.ln(), r.ln());
                let den = l - 2.0 * c2 + r;
                if den >= -1e-12 {
                    return 0.0;
                }
                0.5 * (l - r) / den
            }
            (None, Some(r)) if r > floor => 0.5 + sigma * sigma * (r.ln() - c2),
            (Some(l), None) if l > floor => -0.5 - sigma * sigma * (l.ln() - c2),
            _ => 0.0,
        };
        d.clamp(-1.0, 1.0)
    };
    let c = low.get(cx, cy);
    let dx = offset(
        (cx > 0).then(|| low.get(cx - 1, cy)),
        c,
        (cx + 1 < low.width).then(|| low.get(cx + 1, cy)),
    );
    let dy = offset(
        (cy > 0).then(|| low.get(cx, cy - 1)),
        c,
        (cy + 1 < low.height).then(|| low.get(cx, cy + 1)),
    );
    Peak { x: (cx as f64 + dx + 0.5) * stride, y: (cy as f64 + dy + 0.5) * stride, conf: peak.conf }
}

/// PAF values along the segment `p1 -> p2`, projected on its direction, at
/// `n` evenly spaced points (endpoints included).
pub fn paf_samples(paf_x: &Plane, paf_y: &Plane, p1: (f64, f64), p2: (f64, f64), n: usize) -> Vec<f64> {
    let (dx, dy) = (p2.0 - p1.0, p2.1 - p1.1);
    let len = dx.hypot(dy);
    if len == 0.0 || n == 0 {
        return vec![0.0; n];
    }
    let (ux, uy) = (dx / len, dy / len);
    (0..n)
        .map(|i| {
            let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let (x, y) = (p1.0 + t * dx, p1.1 + t * dy);
            paf_x.nearest(x, y) * ux + paf_y.nearest(x, y) * uy
        })
        .collect()
}

/// Mean projected PAF along `p1 -> p2`; zero when the points coincide.
pub fn paf_score(paf_x: &Plane, paf_y: &Plane, p1: (f64, f64), p2: (f64, f64), n: usize) -> f64 {
    let s = paf_samples(paf_x, paf_y, p1, p2, n);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingParams {
    pub paf_samples: usize,
    pub min_score: f64,
    pub min_fraction: f64,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self { paf_samples: 10, min_score: 0.05, min_fraction: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub keypoints: Vec<Option<Peak>>,
    pub score: f64,
}

/// Candidate connection between candidate `i` of one keypoint and `j` of another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connection {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Greedy descending-score matching with each endpoint used at most once.
pub fn greedy_match(mut pairs: Vec<Connection>) -> Vec<Connection> {
    pairs.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let mut used_i = Vec::new();
    let mut used_j = Vec::new();
    let mut out = Vec::new();
    for c in pairs {
        if !used_i.contains(&c.i) && !used_j.contains(&c.j) {
            used_i.push(c.i);
            used_j.push(c.j);
            out.push(c);
        }
    }
    out
}

/// Scores all candidate pairs of one limb and keeps the admissible ones.
pub fn limb_connections(
    from: &[Peak],
    to: &[Peak],
    paf_x: &Plane,
    paf_y: &Plane,
    params: &GroupingParams,
) -> Vec<Connection> {
    let mut pairs = Vec::new();
    for (i, a) in from.iter().enumerate() {
        for (j, b) in to.iter().enumerate() {
            let s = paf_samples(paf_x, paf_y, (a.x, a.y), (b.x, b.y), params.paf_samples);
            if s.is_empty() {
                continue;
            }
            let score = s.iter().sum::<f64>() / s.len() as f64;
            let frac = s.iter().filter(|&&v| v > params.min_score).count() as f64 / s.len() as f64;
            if score >= params.min_score && frac >= params.min_fraction {
                pairs.push(Connection { i, j, score });
            }
        }
    }
    pairs
}

/// Groups keypoint candidates into skeletons. `candidates[k]` lists the
/// peaks of keypoint `k`; `pafs` holds planes `2l` (x) and `2l + 1` (y) for
/// limb `l`. Only candidates joined by at least one limb form skeletons.
pub fn assemble_skeletons(
    candidates: &[Vec<Peak>],
    pafs: &[Plane],
    limb_defs: &[(usize, usize)],
    params: &GroupingParams,
) -> Vec<Skeleton> {
    struct Group {
        slots: Vec<Option<usize>>,
        limb_scores: Vec<f64>,
    }
    let k = candidates.len();
    let mut groups: Vec<Group> = Vec::new();
    for (l, &(ka, kb)) in limb_defs.iter().enumerate() {
        if ka >= k || kb >= k || 2 * l + 1 >= pafs.len() {
            continue;
        }
        let conns = greedy_match(limb_connections(
            &candidates[ka],
            &candidates[kb],
            &pafs[2 * l],
            &pafs[2 * l + 1],
            params,
        ));
        for c in conns {
            let ga = groups.iter().position(|g| g.slots[ka] == Some(c.i));
            let gb = groups.iter().position(|g| g.slots[kb] == Some(c.j));
            match (ga, gb) {
                (None, None) => {
                    let mut slots = vec![None; k];
                    slots[ka] = Some(c.i);
                    slots[kb] = Some(c.j);
                    groups.push(Group { slots, limb_scores: vec![c.score] });
                }
                (Some(g), None) => {
                    if groups[g].slots[kb].is_none() {
                        groups[g].slots[kb] = Some(c.j);
                        groups[g].limb_scores.push(c.score);
                    }
                }
                (None, Some(g)) => {
                    if groups[g].slots[ka].is_none() {
                        groups[g].slots[ka] = Some(c.i);
                        groups[g].limb_scores.push(c.score);
                    }
                }
                (Some(g1), Some(g2)) if g1 != g2 => {
                    let disjoint = groups[g1].slots.iter().zip(&groups[g2].slots).all(|(a, b)| a.is_none() || b.is_none());
                    if disjoint {
                        let (lo, hi) = (g1.min(g2), g1.max(g2));
                        let moved = groups.remove(hi);
                        let keep = &mut groups[lo];
                        for (dst, src) in keep.slots.iter_mut().zip(moved.slots) {
                            if src.is_some() {
                                *dst = src;
                            }
                        }
                        keep.limb_scores.extend(moved.limb_scores);
                        keep.limb_scores.push(c.score);
                    }
                }
                _ => {}
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let keypoints: Vec<Option<Peak>> =
                g.slots.iter().enumerate().map(|(kp, s)| s.map(|i| candidates[kp][i])).collect();
            let terms: Vec<f64> = g.limb_scores.iter().copied().chain(keypoints.iter().flatten().map(|p| p.conf)).collect();
            let score = terms.iter().sum::<f64>() / terms.len() as f64;
            Skeleton { keypoints, score }
        })
        .collect()
}

/// Decode thresholds shared by evaluation, inference and benchmarking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub peak_thresh: f64,
    pub paf_samples: usize,
    pub paf_min_score: f64,
    pub paf_min_fraction: f64,
    /// Refine heatmap peaks below the stride-8 cell size.
    pub refine_peaks: bool,
    /// Width of the keypoint Gaussians in stride-8 cells, used by the refinement at borders.
    pub heatmap_sigma: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let g = GroupingParams::default();
        Self {
            conf_thresh: 0.25,
            nms_iou: 0.45,
            peak_thresh: 0.1,
            paf_samples: g.paf_samples,
            paf_min_score: g.min_score,
            paf_min_fraction: g.min_fraction,
            refine_peaks: true,
            heatmap_sigma: crate::synth::HEATMAP_SIGMA,
        }
    }
}

impl DecodeConfig {
    pub fn grouping(&self) -> GroupingParams {
        GroupingParams { paf_samples: self.paf_samples, min_score: self.paf_min_score, min_fraction: self.paf_min_fraction }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_thresh) {
            return Err(MdspError::Config(format!("conf_thresh {} not in [0, 1]", self.conf_thresh)));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(MdspError::Config(format!("nms_iou {} not in (0, 1)", self.nms_iou)));
        }
        if self.paf_samples < 2 {
            return Err(MdspError::Config("paf_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Keypoint candidates per keypoint channel of one item's heatmaps.
pub fn keypoint_candidates<T: Element>(heatmaps: &Tensor<T>, spec: &NetworkSpec, cfg: &DecodeConfig) -> Result<Vec<Vec<Peak>>> {
    let (_, _, h, w) = heatmaps.dims4()?;
    let size = spec.input_size;
    let stride = size as f64 / h as f64;
    let up = resized_planes(heatmaps, size)?;
    let d = heatmaps.data();
    let mut out = Vec::with_capacity(spec.num_keypoints);
    for (k, plane) in up.iter().take(spec.num_keypoints).enumerate() {
        let peaks = find_peaks(plane, cfg.peak_thresh);
        let peaks = if cfg.refine_peaks {
            let low = Plane::new(w, h, d[k * h * w..(k + 1) * h * w].iter().map(|v| v.as_f64()).collect());
            peaks.iter().map(|p| refine_peak(&low, stride, p, cfg.heatmap_sigma)).collect()
        } else {
            peaks
        };
        out.push(peaks);
    }
    Ok(out)
}

/// Full pose decode of one batch item: final-stage PAFs and heatmaps are
/// resized to the input resolution, peaks extracted and grouped.
pub fn decode_pose<T: Element>(raw: &PoseRawOutput<T>, spec: &NetworkSpec, cfg: &DecodeConfig) -> Result<Vec<Skeleton>> {
    let candidates = keypoint_candidates(&raw.heatmaps, spec, cfg)?;
    let pafs = resized_planes(raw.pafs.last().expect("PAF stages"), spec.input_size)?;
    Ok(assemble_skeletons(&candidates, &pafs, &spec.limb_defs, &cfg.grouping()))
}

/// Detections after thresholding and NMS for one batch item.
pub fn decode_detections<T: Element>(raw: &RawDetectOutput<T>, spec: &NetworkSpec, b: usize, cfg: &DecodeConfig) -> Vec<Detection> {
    nms(&decode_image(raw, spec, b, cfg.conf_thresh), cfg.nms_iou)
}
