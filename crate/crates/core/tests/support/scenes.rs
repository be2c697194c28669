use mdsp::pose::PoseRawOutput;
use mdsp::postprocess::{decode_image, Detection, Skeleton};
use mdsp::synth::{encode_detect_targets, encode_pose_targets, ObjectBox, SceneAnnotation};
use mdsp::NetworkSpec;

pub fn decoded_boxes(ann: &SceneAnnotation, spec: &NetworkSpec) -> Result<Vec<Detection>, String> {
    let t = encode_detect_targets(ann, spec).map_err(|e| e.to_string())?;
    if t.num_objects() != ann.boxes.len() {
        return Err(format!("{} anchor slots for {} boxes", t.num_objects(), ann.boxes.len()));
    }
    Ok(decode_image(&t.to_raw_logits::<f64>(spec.num_det_classes), spec, 0, 0.5))
}

/// Encodes the boxes, decodes the targets and returns the worst coordinate
/// error in pixels.
pub fn box_roundtrip_error(boxes: &[ObjectBox], spec: &NetworkSpec) -> Result<f64, String> {
    let mut ann = SceneAnnotation::empty(spec.input_size, spec.input_size);
    ann.boxes = boxes.to_vec();
    let dets = decoded_boxes(&ann, spec)?;
    if dets.len() != boxes.len() {
        return Err(format!("{} detections for {} boxes", dets.len(), boxes.len()));
    }
    let mut worst = 0.0f64;
    for b in boxes {
        let err = dets
            .iter()
            .filter(|d| d.class_id == b.class_id)
            .map(|d| {
                let (p, q) = (d.bbox, b.bbox);
                (p.cx - q.cx).abs().max((p.cy - q.cy).abs()).max((p.w - q.w).abs()).max((p.h - q.h).abs())
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn pose_output(ann: &SceneAnnotation, spec: &NetworkSpec) -> PoseRawOutput<f64> {
    let t = encode_pose_targets(ann, spec);
    let paf = t.paf_tensor::<f64>();
    PoseRawOutput { pafs: vec![paf.clone(), paf.clone(), paf], heatmaps: t.heatmap_tensor() }
}

/// Every person comes back as one skeleton with exactly its visible
/// keypoints, each within `tol` pixels.
pub fn recovered(ann: &SceneAnnotation, found: &[Skeleton], tol: f64) -> Result<(), String> {
    if found.len() != ann.persons.len() {
        return Err(format!("{} skeletons for {} persons", found.len(), ann.persons.len()));
    }
    for p in &ann.persons {
        let hit = found.iter().any(|s| {
            s.keypoints.len() == p.keypoints.len()
                && s.keypoints.iter().zip(&p.keypoints).all(|(k, g)| match k {
                    Some(k) => g.visible && (k.x - g.x).hypot(k.y - g.y) <= tol,
                    None => !g.visible,
                })
        });
        if !hit {
            return Err(format!("person {} not recovered", p.instance));
        }
    }
    Ok(())
}
