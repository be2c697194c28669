//! Detection AP, segmentation mIoU / pixel accuracy, and keypoint AP / PCK.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};
use crate::model::Mdsp;
use crate::postprocess::{decode_detections, decode_pose, iou, seg_decode, DecodeConfig, Detection, LabelMap, Skeleton};
use crate::spec::{Task, TaskSet};
use crate::synth::{ObjectBox, PersonAnn, Sample};
use crate::tensor::{Element, Tensor};

/// Matching thresholds `0.50, 0.55, ..., 0.95`.
pub const MATCH_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// OKS falloff per keypoint as a fraction of the person box diagonal.
    pub oks_kappa: f64,
    /// PCK distance threshold as a fraction of the person box diagonal.
    pub pck_alpha: f64,
    /// Detection score threshold used when collecting predictions for AP.
    pub det_conf_thresh: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { oks_kappa: 0.1, pck_alpha: 0.1, det_conf_thresh: 0.05, batch_size: 8 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.oks_kappa > 0.0 && self.pck_alpha > 0.0) || !(0.0..1.0).contains(&self.det_conf_thresh) || self.batch_size == 0 {
            return Err(MdspError::Config(format!("invalid eval settings {:?}", self)));
        }
        Ok(())
    }
}

/// 101-point interpolated average precision. `scored` holds `(score, is_tp)`
/// for every prediction; ties in score keep their given order.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Greedy matching in descending score order: each prediction takes the
/// unmatched ground truth of highest similarity `>= thresh`.
/// `sim[p][g]` is the similarity of prediction `p` to ground truth `g`.
pub fn match_predictions(scores: &[f64], sim: &[Vec<f64>], thresh: f64) -> Vec<bool> {
    let num_gt = sim.first().map_or(0, |r| r.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken = vec![false; num_gt];
    let mut tp = vec![false; scores.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &s) in sim[p].iter().enumerate() {
            if !taken[g] && s >= thresh && best.is_none_or(|(_, b)| s > b) {
                best = Some((g, s));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[p] = true;
        }
    }
    tp
}

/// AP at each of [`MATCH_THRESHOLDS`] for one prediction set, pooled over
/// images. `items` yields `(scores, similarity matrix, num_gt)` per image.
fn ap_sweep<'a>(items: impl Iterator<Item = (&'a [f64], &'a [Vec<f64>], usize)> + Clone) -> [f64; 10] {
    let num_gt: usize = items.clone().map(|(_, _, n)| n).sum();
    let mut out = [0.0; 10];
    for (t, &thresh) in MATCH_THRESHOLDS.iter().enumerate() {
        let mut scored = Vec::new();
        for (scores, sim, _) in items.clone() {
            let tp = match_predictions(scores, sim, thresh);
            scored.extend(scores.iter().copied().zip(tp));
        }
        out[t] = average_precision(&scored, num_gt);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Classes that have at least one ground-truth box.
    pub per_class: Vec<ClassAp>,
}

fn summarize(sweep: &[f64; 10]) -> (f64, f64, f64) {
    (sweep.iter().sum::<f64>() / 10.0, sweep[0], sweep[5])
}

/// Class-wise AP averaged over classes present in the ground truth. With no
/// ground truth at all, the result is 1 when there are also no predictions
/// and 0 otherwise.
pub fn detection_metrics(preds: &[Vec<Detection>], gts: &[Vec<ObjectBox>], num_classes: usize) -> Result<DetectionMetrics> {
    if preds.len() != gts.len() {
        return Err(MdspError::InvalidArgument(format!("{} prediction sets for {} images", preds.len(), gts.len())));
    }
    let mut per_class = Vec::new();
    for c in 0..num_classes {
        let data: Vec<(Vec<f64>, Vec<Vec<f64>>, usize)> = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| {
                let p: Vec<_> = p.iter().filter(|d| d.class_id == c).collect();
                let g: Vec<_> = g.iter().filter(|b| b.class_id == c).collect();
                let sim = p.iter().map(|d| g.iter().map(|b| iou(&d.bbox, &b.bbox)).collect()).collect();
                (p.iter().map(|d| d.score).collect(), sim, g.len())
            })
            .collect();
        if data.iter().all(|d| d.2 == 0) {
            continue;
        }
        let sweep = ap_sweep(data.iter().map(|(s, m, n)| (s.as_slice(), m.as_slice(), *n)));
        let (ap, ap50, ap75) = summarize(&sweep);
        per_class.push(ClassAp { class_id: c, ap, ap50, ap75 });
    }
    if per_class.is_empty() {
        let v = if preds.iter().all(|p| p.is_empty()) { 1.0 } else { 0.0 };
        return Ok(DetectionMetrics { ap: v, ap50: v, ap75: v, per_class });
    }
    let n = per_class.len() as f64;
    Ok(DetectionMetrics {
        ap: per_class.iter().map(|c| c.ap).sum::<f64>() / n,
        ap50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap75: per_class.iter().map(|c| c.ap75).sum::<f64>() / n,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub pixel_acc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

/// mIoU over classes (including Empty) with a nonempty union, and pixel accuracy.
pub fn segmentation_metrics(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<SegMetrics> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(MdspError::InvalidArgument(format!(
            "segmentation_metrics: {} predictions for {} label maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    let (mut correct, mut total) = (0u64, 0u64);
    for (p, g) in preds.iter().zip(gts) {
        if p.width != g.width || p.height != g.height {
            return Err(MdspError::Shape(format!("prediction {}x{} vs label map {}x{}", p.width, p.height, g.width, g.height)));
        }
        for (&a, &b) in p.data.iter().zip(&g.data) {
            let (a, b) = (a as usize, b as usize);
            if a >= num_classes || b >= num_classes {
                return Err(MdspError::InvalidArgument(format!("label {} out of range", a.max(b))));
            }
            total += 1;
            if a == b {
                correct += 1;
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let per_class_iou: Vec<Option<f64>> =
        (0..num_classes).map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64)).collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(SegMetrics {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        pixel_acc: correct as f64 / total as f64,
        per_class_iou,
    })
}

/// Object keypoint similarity: mean over visible ground-truth keypoints of
/// `exp(-d^2 / (2 k^2))` with `k = kappa * diagonal(gt box)`; a missing
/// predicted keypoint scores 0.
pub fn oks(pred: &Skeleton, gt: &PersonAnn, kappa: f64) -> f64 {
    let k = kappa * gt.bbox.diagonal();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, g) in gt.keypoints.iter().enumerate().filter(|(_, g)| g.visible) {
        n += 1;
        if let Some(Some(p)) = pred.keypoints.get(i) {
            let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
            sum += (-d2 / (2.0 * k * k)).exp();
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub pck: f64,
}

/// OKS-based AP sweep and PCK. Persons without visible keypoints are left out.
/// PCK pairs predictions and persons one-to-one by descending OKS and counts
/// visible keypoints predicted within `alpha * diagonal`. Both are 1 when
/// there are no persons and no predictions.
pub fn pose_metrics(preds: &[Vec<Skeleton>], gts: &[Vec<PersonAnn>], kappa: f64, alpha: f64) -> Result<PoseMetrics> {
    if preds.len() != gts.len() {
        return Err(MdspError::InvalidArgument(format!("{} prediction sets for {} images", preds.len(), gts.len())));
    }
    let gts: Vec<Vec<&PersonAnn>> =
        gts.iter().map(|g| g.iter().filter(|p| p.keypoints.iter().any(|k| k.visible)).collect()).collect();
    let data: Vec<(Vec<f64>, Vec<Vec<f64>>, usize)> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| {
            let sim = p.iter().map(|s| g.iter().map(|a| oks(s, a, kappa)).collect()).collect();
            (p.iter().map(|s| s.score).collect(), sim, g.len())
        })
        .collect();
    let num_gt: usize = data.iter().map(|d| d.2).sum();
    if num_gt == 0 {
        let v = if preds.iter().all(|p| p.is_empty()) { 1.0 } else { 0.0 };
        return Ok(PoseMetrics { ap: v, ap50: v, ap75: v, pck: v });
    }
    let sweep = ap_sweep(data.iter().map(|(s, m, n)| (s.as_slice(), m.as_slice(), *n)));
    let (ap, ap50, ap75) = summarize(&sweep);

    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), (_, sim, _)) in preds.iter().zip(&gts).zip(&data) {
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for (i, row) in sim.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if s > 0.0 {
                    pairs.push((i, j, s));
                }
            }
        }
        pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut used_p = vec![false; p.len()];
        let mut match_of: Vec<Option<usize>> = vec![None; g.len()];
        for (i, j, _) in pairs {
            if !used_p[i] && match_of[j].is_none() {
                used_p[i] = true;
                match_of[j] = Some(i);
            }
        }
        for (j, person) in g.iter().enumerate() {
            let tol = alpha * person.bbox.diagonal();
            for (k, kp) in person.keypoints.iter().enumerate().filter(|(_, k)| k.visible) {
                total += 1;
                let pred_kp = match_of[j].and_then(|i| p[i].keypoints.get(k).copied().flatten());
                if pred_kp.is_some_and(|q| (q.x - kp.x).hypot(q.y - kp.y) <= tol) {
                    hit += 1;
                }
            }
        }
    }
    Ok(PoseMetrics { ap, ap50, ap75, pck: hit as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub detection: Option<DetectionMetrics>,
    pub segmentation: Option<SegMetrics>,
    pub pose: Option<PoseMetrics>,
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{},{:.6}", k, v);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}  {:>8}\n", "metric", "value", w = w);
        let _ = writeln!(s, "{}", "-".repeat(w + 10));
        for (k, v) in rows {
            let _ = writeln!(s, "{:<w$}  {:>8.4}", k, v, w = w);
        }
        s
    }

    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut r = Vec::new();
        if let Some(d) = &self.detection {
            r.extend([("det_ap".into(), d.ap), ("det_ap50".into(), d.ap50), ("det_ap75".into(), d.ap75)]);
            for c in &d.per_class {
                r.push((format!("det_ap_class{}", c.class_id), c.ap));
            }
        }
        if let Some(s) = &self.segmentation {
            r.extend([("seg_miou".into(), s.miou), ("seg_acc".into(), s.pixel_acc)]);
            for (c, v) in s.per_class_iou.iter().enumerate() {
                if let Some(v) = v {
                    r.push((format!("seg_iou_class{}", c), *v));
                }
            }
        }
        if let Some(p) = &self.pose {
            r.extend([
                ("pose_ap".into(), p.ap),
                ("pose_ap50".into(), p.ap50),
                ("pose_ap75".into(), p.ap75),
                ("pose_pck".into(), p.pck),
            ]);
        }
        r
    }
}

/// Decoded predictions of one image for the requested tasks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Predictions {
    pub detections: Option<Vec<Detection>>,
    #[serde(skip)]
    pub label_map: Option<LabelMap>,
    pub skeletons: Option<Vec<Skeleton>>,
}

/// Runs the network on `images` (each `3 x H x W`) and decodes every built task.
pub fn predict<T: Element>(model: &Mdsp<T>, images: &[Tensor<f32>], cfg: &DecodeConfig) -> Result<Vec<Predictions>> {
    let batch: Vec<Tensor<T>> = images.iter().map(|t| t.cast()).collect();
    let out = model.infer(&Tensor::stack(&batch)?)?;
    let mut preds = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        let item = out.batch_item(b)?;
        preds.push(Predictions {
            detections: out.detect.as_ref().map(|d| decode_detections(d, &model.spec, b, cfg)),
            label_map: item.seg_logits.as_ref().map(seg_decode).transpose()?,
            skeletons: item.pose.as_ref().map(|p| decode_pose(p, &model.spec, cfg)).transpose()?,
        });
    }
    Ok(preds)
}

/// Evaluates `tasks` (restricted to the built ones) on `data`.
pub fn evaluate<T: Element>(
    model: &Mdsp<T>,
    data: &[Sample],
    tasks: TaskSet,
    decode: &DecodeConfig,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    decode.validate()?;
    if data.is_empty() {
        return Err(MdspError::InvalidArgument("evaluation set is empty".into()));
    }
    let tasks = TaskSet::of(&tasks.tasks().into_iter().filter(|t| model.tasks().contains(*t)).collect::<Vec<_>>());
    let dcfg = DecodeConfig { conf_thresh: cfg.det_conf_thresh, ..*decode };
    let mut preds = Vec::with_capacity(data.len());
    for chunk in data.chunks(cfg.batch_size) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        preds.extend(predict(model, &images, &dcfg)?);
    }
    let mut report = MetricsReport::default();
    if tasks.contains(Task::Detect) {
        let p: Vec<Vec<Detection>> = preds.iter().map(|p| p.detections.clone().unwrap_or_default()).collect();
        let g: Vec<Vec<ObjectBox>> = data.iter().map(|s| s.ann.boxes.clone()).collect();
        report.detection = Some(detection_metrics(&p, &g, model.spec.num_det_classes)?);
    }
    if tasks.contains(Task::Segment) {
        let p: Vec<LabelMap> = preds.iter().map(|p| p.label_map.clone().expect("segmentation built")).collect();
        let g: Vec<LabelMap> = data.iter().map(|s| s.ann.label_map.clone()).collect();
        report.segmentation = Some(segmentation_metrics(&p, &g, model.spec.num_seg_classes)?);
    }
    if tasks.contains(Task::Pose) {
        let p: Vec<Vec<Skeleton>> = preds.iter().map(|p| p.skeletons.clone().unwrap_or_default()).collect();
        let g: Vec<Vec<PersonAnn>> = data.iter().map(|s| s.ann.persons.clone()).collect();
        report.pose = Some(pose_metrics(&p, &g, cfg.oks_kappa, cfg.pck_alpha)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::{BBox, Peak};
    use crate::synth::Keypoint;

    #[test]
    fn ap_of_perfect_ranking_is_one() {
        assert_eq!(average_precision(&[(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(average_precision(&[], 2), 0.0);
    }

    #[test]
    fn ap_half_recall() {
        // one of two found, precision 1 up to recall 0.5: 51 of 101 points
        let ap = average_precision(&[(0.9, true), (0.5, false)], 2);
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn matching_prefers_higher_similarity() {
        let sim = vec![vec![0.6, 0.9], vec![0.7, 0.0]];
        assert_eq!(match_predictions(&[0.9, 0.8], &sim, 0.5), vec![true, true]);
        assert_eq!(match_predictions(&[0.9, 0.8], &sim, 0.8), vec![true, false]);
    }

    #[test]
    fn perfect_detection() {
        let g = vec![ObjectBox { bbox: BBox::new(10.0, 10.0, 6.0, 8.0), class_id: 2, instance: 1 }];
        let p = vec![Detection { bbox: g[0].bbox, class_id: 2, score: 0.9 }];
        let m = detection_metrics(&[p], &[g.clone()], 4).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        let m = detection_metrics(&[vec![]], &[g], 4).unwrap();
        assert_eq!(m.ap, 0.0);
    }

    #[test]
    fn seg_background_fraction() {
        let gt = LabelMap { width: 2, height: 2, data: vec![0, 0, 0, 3] };
        let pred = LabelMap::filled(2, 2, 0);
        let m = segmentation_metrics(&[pred], &[gt.clone()], 5).unwrap();
        assert_eq!(m.pixel_acc, 0.75);
        assert_eq!(m.per_class_iou[1], None);
        let m = segmentation_metrics(&[gt.clone()], &[gt], 5).unwrap();
        assert_eq!((m.miou, m.pixel_acc), (1.0, 1.0));
    }

    #[test]
    fn oks_and_pck() {
        let kps = vec![Keypoint { x: 10.0, y: 10.0, visible: true }, Keypoint { x: 20.0, y: 10.0, visible: false }];
        let gt = PersonAnn { instance: 1, bbox: BBox::new(15.0, 15.0, 30.0, 40.0), keypoints: kps };
        let exact = Skeleton { keypoints: vec![Some(Peak { x: 10.0, y: 10.0, conf: 1.0 }), None], score: 1.0 };
        assert_eq!(oks(&exact, &gt, 0.1), 1.0);
        let m = pose_metrics(&[vec![exact]], &[vec![gt.clone()]], 0.1, 0.1).unwrap();
        assert_eq!((m.ap, m.pck), (1.0, 1.0));
        let off = Skeleton { keypoints: vec![Some(Peak { x: 16.0, y: 10.0, conf: 1.0 }), None], score: 1.0 };
        let m = pose_metrics(&[vec![off]], &[vec![gt]], 0.1, 0.1).unwrap();
        assert_eq!(m.pck, 0.0);
    }
}
