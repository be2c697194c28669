use mdsp::eval::MATCH_THRESHOLDS;
use mdsp::postprocess::{iou, kmeans_anchors, kmeans_cost, paf_score, shape_iou, BBox, Detection, Plane};
use mdsp::synth::ObjectBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    BBox::new(r.random_range(0.0..extent), r.random_range(0.0..extent), r.random_range(1.0..extent / 3.0), r.random_range(1.0..extent / 3.0))
}

/// Textbook formulation: repeatedly take the best remaining candidate and
/// delete everything of its class that overlaps it too much.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let better = |a: usize, b: usize| {
        let (x, y) = (&dets[a], &dets[b]);
        x.score > y.score || (x.score == y.score && (x.class_id < y.class_id || (x.class_id == y.class_id && a < b)))
    };
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining[1..] {
            if better(i, best) {
                best = i;
            }
        }
        out.push(dets[best]);
        let keep = dets[best];
        remaining.retain(|&i| i != best && !(dets[i].class_id == keep.class_id && iou(&dets[i].bbox, &keep.bbox) > thresh));
    }
    out
}

pub fn random_detections(r: &mut ChaCha8Rng, n: usize, classes: usize, quantize: bool) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let s: f64 = r.random_range(0.0..1.0);
            Detection {
                bbox: random_box(r, 100.0),
                class_id: r.random_range(0..classes),
                score: if quantize { (s * 5.0).round() / 5.0 } else { s },
            }
        })
        .collect()
}

pub fn smooth_field(r: &mut ChaCha8Rng, w: usize, h: usize, min_wavelength: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let len = r.random_range(min_wavelength..3.0 * min_wavelength);
            let ang: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / len;
            (k * ang.cos(), k * ang.sin(), r.random_range(0.0..std::f64::consts::TAU), r.random_range(0.2..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            out.push(waves.iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum::<f64>() / norm);
        }
    }
    out
}

pub struct Fixture {
    pub preds: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<ObjectBox>>,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..20 {
        let gt: Vec<ObjectBox> = (0..r.random_range(0..6))
            .map(|i| ObjectBox { bbox: random_box(&mut r, 100.0), class_id: r.random_range(0..3), instance: i + 1 })
            .collect();
        let mut p = Vec::new();
        for g in &gt {
            for _ in 0..r.random_range(0..3) {
                let s = g.bbox.w.min(g.bbox.h) * r.random_range(0.0..0.4);
                let bbox = BBox::new(g.bbox.cx + r.random_range(-s..=s), g.bbox.cy + r.random_range(-s..=s), g.bbox.w * r.random_range(0.7..1.3), g.bbox.h * r.random_range(0.7..1.3));
                let class_id = if r.random_bool(0.85) { g.class_id } else { r.random_range(0..3) };
                p.push(Detection { bbox, class_id, score: r.random_range(0.0..1.0) });
            }
        }
        for _ in 0..r.random_range(0..3) {
            p.push(Detection { bbox: random_box(&mut r, 100.0), class_id: r.random_range(0..3), score: r.random_range(0.0..0.6) });
        }
        preds.push(p);
        gts.push(gt);
    }
    Fixture { preds, gts }
}

/// Per class and threshold: rank all predictions, match each image by
/// scanning every ground truth, and take the interpolated precision at each
/// recall level as a maximum over the whole tail of the ranking.
pub fn ap_reference(f: &Fixture, classes: usize) -> (f64, f64, f64) {
    let mut per_class = Vec::new();
    for c in 0..classes {
        let num_gt: usize = f.gts.iter().map(|g| g.iter().filter(|b| b.class_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut aps = Vec::new();
        for &thresh in &MATCH_THRESHOLDS {
            let mut ranked: Vec<(f64, bool)> = Vec::new();
            for (p, g) in f.preds.iter().zip(&f.gts) {
                let p: Vec<&Detection> = p.iter().filter(|d| d.class_id == c).collect();
                let g: Vec<&ObjectBox> = g.iter().filter(|b| b.class_id == c).collect();
                let mut order: Vec<usize> = (0..p.len()).collect();
                order.sort_by(|&a, &b| p[b].score.partial_cmp(&p[a].score).unwrap().then(a.cmp(&b)));
                let mut taken = vec![false; g.len()];
                for i in order {
                    let mut best: Option<usize> = None;
                    for (k, gt) in g.iter().enumerate() {
                        let v = iou(&p[i].bbox, &gt.bbox);
                        if !taken[k] && v >= thresh && best.is_none_or(|b| v > iou(&p[i].bbox, &g[b].bbox)) {
                            best = Some(k);
                        }
                    }
                    if let Some(k) = best {
                        taken[k] = true;
                    }
                    ranked.push((p[i].score, best.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut curve = Vec::new();
            let mut tp = 0;
            for (n, &(_, hit)) in ranked.iter().enumerate() {
                tp += hit as usize;
                curve.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
            }
            let ap = (0..=100)
                .map(|k| {
                    let level = k as f64 / 100.0;
                    curve.iter().filter(|(rec, _)| *rec >= level).map(|&(_, prec)| prec).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 101.0;
            aps.push(ap);
        }
        per_class.push((aps.iter().sum::<f64>() / 10.0, aps[0], aps[5]));
    }
    let n = per_class.len() as f64;
    (
        per_class.iter().map(|c| c.0).sum::<f64>() / n,
        per_class.iter().map(|c| c.1).sum::<f64>() / n,
        per_class.iter().map(|c| c.2).sum::<f64>() / n,
    )
}

/// Runs k-means with k = 2 on eight random shapes and compares the result
/// against every bipartition. Returns (cost, optimum, at_fixpoint).
pub fn kmeans_case(seed: u64) -> (f64, f64, bool) {
    let mut r = rng(seed);
    let boxes: Vec<(f64, f64)> = (0..8).map(|_| (r.random_range(2.0..60.0), r.random_range(2.0..60.0))).collect();
    let centroids = kmeans_anchors(&boxes, 2, seed).unwrap();
    let cost = kmeans_cost(&boxes, &centroids);

    let mean = |ids: &[usize]| {
        let n = ids.len() as f64;
        (ids.iter().map(|&i| boxes[i].0).sum::<f64>() / n, ids.iter().map(|&i| boxes[i].1).sum::<f64>() / n)
    };
    let mut optimum = f64::INFINITY;
    let mut fixpoints = Vec::new();
    // box 7 always sits in the second cluster, so each split is seen once
    for mask in 0u32..(1 << 7) {
        let first: Vec<usize> = (0..8).filter(|&i| mask >> i & 1 == 1).collect();
        let second: Vec<usize> = (0..8).filter(|&i| mask >> i & 1 == 0).collect();
        if first.is_empty() {
            continue;
        }
        let m = [mean(&first), mean(&second)];
        let split_cost: f64 = first.iter().map(|&i| 1.0 - shape_iou(boxes[i], m[0])).sum::<f64>()
            + second.iter().map(|&i| 1.0 - shape_iou(boxes[i], m[1])).sum::<f64>();
        optimum = optimum.min(split_cost);
        let stable = (0..8).all(|i| {
            let own = (mask >> i & 1 == 0) as usize;
            1.0 - shape_iou(boxes[i], m[own]) <= 1.0 - shape_iou(boxes[i], m[1 - own])
        });
        if stable {
            fixpoints.push((m, split_cost));
        }
    }
    let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9;
    let at_fixpoint = fixpoints.iter().any(|(m, c)| {
        ((close(m[0], centroids[0]) && close(m[1], centroids[1])) || (close(m[0], centroids[1]) && close(m[1], centroids[0])))
            && (c - cost).abs() < 1e-9
    });
    (cost, optimum, at_fixpoint)
}

/// Deviation of the sampled PAF score from a dense line integral over a
/// smooth random field.
pub fn paf_deviation(seed: u64) -> Option<f64> {
    const SIZE: usize = 128;
    let mut r = rng(seed);
    let px = Plane::new(SIZE, SIZE, smooth_field(&mut r, SIZE, SIZE, 64.0));
    let py = Plane::new(SIZE, SIZE, smooth_field(&mut r, SIZE, SIZE, 64.0));
    let p1 = (r.random_range(0.0..SIZE as f64), r.random_range(0.0..SIZE as f64));
    let ang: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let len = r.random_range(4.0..40.0);
    let p2 = ((p1.0 + len * ang.cos()).clamp(0.0, SIZE as f64 - 1e-9), (p1.1 + len * ang.sin()).clamp(0.0, SIZE as f64 - 1e-9));
    let (dx, dy) = (p2.0 - p1.0, p2.1 - p1.1);
    let l = dx.hypot(dy);
    if l < 1.0 {
        return None;
    }
    let dense: f64 = (0..1000)
        .map(|i| {
            let t = (i as f64 + 0.5) / 1000.0;
            let (x, y) = (p1.0 + t * dx, p1.1 + t * dy);
            px.nearest(x, y) * dx / l + py.nearest(x, y) * dy / l
        })
        .sum::<f64>()
        / 1000.0;
    Some((paf_score(&px, &py, p1, p2, 10) - dense).abs())
}
