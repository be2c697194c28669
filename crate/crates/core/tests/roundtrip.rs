//! Target encoders against the decoders with no network in between.

mod support;

use mdsp::postprocess::{decode_pose, paf_score, seg_decode, DecodeConfig, Plane};
use mdsp::synth::{
    encode_detect_targets, encode_pose_targets, generate_scene, CellTarget, GenSpec, ObjectBox, SceneAnnotation,
    POSE_STRIDE,
};
use mdsp::{NetworkSpec, Tensor};
use support::scenes::{box_roundtrip_error, pose_output, recovered};

const SCENES: u64 = 100;

fn check_boxes(boxes: &[ObjectBox], spec: &NetworkSpec) {
    let err = box_roundtrip_error(boxes, spec).unwrap();
    assert!(err <= 1e-4, "boxes {:?} decoded with error {}", boxes, err);
}

#[test]
fn detection_targets_decode_to_generated_boxes() {
    for size in [64, 128, 416] {
        let spec = NetworkSpec::new(size, 0.125);
        for seed in 0..SCENES {
            let s = generate_scene(&GenSpec::new(size), seed).unwrap();
            check_boxes(&s.ann.boxes, &spec);
        }
    }
}

#[test]
fn detection_roundtrip_on_cell_edges_and_extreme_shapes() {
    let spec = NetworkSpec::new(128, 0.125);
    let mk = |cx, cy, w, h, class_id| ObjectBox { bbox: mdsp::postprocess::BBox::new(cx, cy, w, h), class_id, instance: 1 };
    check_boxes(&[mk(0.0, 0.0, 3.0, 3.0, 0)], &spec);
    check_boxes(&[mk(127.999, 64.0, 120.0, 8.0, 1)], &spec);
    check_boxes(&[mk(32.0, 32.0, 1.0, 100.0, 2), mk(32.0, 32.0, 100.0, 1.0, 3)], &spec);
    check_boxes(&[mk(16.0, 16.0, 10.0, 10.0, 0), mk(16.5, 16.5, 10.0, 10.0, 1)], &spec);
}

#[test]
fn empty_annotation_is_all_no_object() {
    let spec = NetworkSpec::new(64, 0.125);
    let t = encode_detect_targets(&SceneAnnotation::empty(64, 64), &spec).unwrap();
    assert!(t.scales.iter().flat_map(|s| &s.cells).all(|c| *c == CellTarget::NoObject));
    assert_eq!(t.scales.iter().map(|s| s.grid).collect::<Vec<_>>(), vec![2, 4, 8]);
}

#[test]
fn box_equal_to_an_anchor_takes_that_anchor() {
    let spec = NetworkSpec::new(416, 0.125);
    for (i, &(w, h)) in spec.anchors.iter().enumerate() {
        let mut ann = SceneAnnotation::empty(416, 416);
        ann.boxes.push(ObjectBox { bbox: mdsp::postprocess::BBox::new(200.0, 210.0, w, h), class_id: 0, instance: 1 });
        let t = encode_detect_targets(&ann, &spec).unwrap();
        let (s, slot) = NetworkSpec::anchor_location(i);
        let st = &t.scales[s];
        let (gx, gy) = (200 / st.stride, 210 / st.stride);
        match st.cells[st.index(slot, gy, gx)] {
            CellTarget::Object { tw, th, .. } => assert!(tw.abs() < 1e-12 && th.abs() < 1e-12),
            other => panic!("anchor {} not assigned: {:?}", i, other),
        }
    }
}

#[test]
fn box_center_outside_image_is_rejected() {
    let spec = NetworkSpec::new(64, 0.125);
    let mut ann = SceneAnnotation::empty(64, 64);
    ann.boxes.push(ObjectBox { bbox: mdsp::postprocess::BBox::new(70.0, 10.0, 8.0, 8.0), class_id: 0, instance: 1 });
    assert!(encode_detect_targets(&ann, &spec).is_err());
}

#[test]
fn label_map_survives_one_hot_logits() {
    for seed in 0..20 {
        let s = generate_scene(&GenSpec::new(64), seed).unwrap();
        let lm = &s.ann.label_map;
        let plane = lm.width * lm.height;
        let mut d = vec![0.0f64; 5 * plane];
        for (p, &c) in lm.data.iter().enumerate() {
            d[c as usize * plane + p] = 1.0;
        }
        let logits = Tensor::new(vec![1, 5, lm.height, lm.width], d).unwrap();
        assert_eq!(&seg_decode(&logits).unwrap(), lm);
    }
}

#[test]
fn pose_targets_assemble_to_generated_skeletons() {
    let spec = NetworkSpec::new(128, 0.125);
    let gen = GenSpec::new(128);
    let cfg = DecodeConfig::default();
    let mut persons = 0;
    for seed in 0..SCENES {
        let s = generate_scene(&gen, seed).unwrap();
        let sk = decode_pose(&pose_output(&s.ann, &spec), &spec, &cfg).unwrap();
        recovered(&s.ann, &sk, 1e-6).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
        persons += s.ann.persons.len();
    }
    assert!(persons >= SCENES as usize / 2, "fixture has too few persons: {}", persons);
}

#[test]
fn crowded_small_scenes_recover_within_one_cell() {
    let spec = NetworkSpec::new(64, 0.125);
    let gen = GenSpec { slots: (2, 3), counts: [(1, 3), (0, 1), (0, 1), (0, 0)], ..GenSpec::new(64) };
    for seed in 0..SCENES {
        let s = generate_scene(&gen, seed).unwrap();
        let sk = decode_pose(&pose_output(&s.ann, &spec), &spec, &DecodeConfig::default()).unwrap();
        recovered(&s.ann, &sk, POSE_STRIDE as f64).unwrap_or_else(|e| panic!("seed {}: {}", seed, e));
    }
}

#[test]
fn paf_along_ground_truth_limbs_scores_high() {
    let spec = NetworkSpec::new(128, 0.125);
    let mut limbs = 0;
    for seed in 0..SCENES {
        let s = generate_scene(&GenSpec::new(128), seed).unwrap();
        let t = encode_pose_targets(&s.ann, &spec);
        let g = t.grid;
        let planes: Vec<Plane> = t.paf.chunks(g * g).map(|c| Plane::new(g, g, c.to_vec())).collect();
        let cell = |k: mdsp::synth::Keypoint| (k.x / POSE_STRIDE as f64, k.y / POSE_STRIDE as f64);
        for p in &s.ann.persons {
            for (l, &(a, b)) in spec.limb_defs.iter().enumerate() {
                let (ka, kb) = (p.keypoints[a], p.keypoints[b]);
                if !(ka.visible && kb.visible) {
                    continue;
                }
                let score = paf_score(&planes[2 * l], &planes[2 * l + 1], cell(ka), cell(kb), 10);
                assert!(score >= 0.95, "seed {} limb {}: {}", seed, l, score);
                limbs += 1;
            }
        }
    }
    assert!(limbs > 0);
}

#[test]
fn pose_target_peaks_and_background() {
    let spec = NetworkSpec::new(64, 0.125);
    let empty = encode_pose_targets(&SceneAnnotation::empty(64, 64), &spec);
    assert!(empty.paf.iter().all(|&v| v == 0.0));
    let g = empty.grid * empty.grid;
    assert!(empty.heatmap[spec.num_keypoints * g..].iter().all(|&v| v == 1.0));

    let mut ann = SceneAnnotation::empty(64, 64);
    let kp = |x, y| mdsp::synth::Keypoint { x, y, visible: true };
    // keypoints at stride-8 cell centers
    let keypoints: Vec<_> = (0..spec.num_keypoints).map(|k| kp(8.0 * (k % 4) as f64 + 4.0 + 16.0, 8.0 * (k / 4) as f64 + 20.0)).collect();
    ann.persons.push(mdsp::synth::PersonAnn { instance: 1, bbox: mdsp::postprocess::BBox::new(32.0, 32.0, 40.0, 40.0), keypoints: keypoints.clone() });
    let t = encode_pose_targets(&ann, &spec);
    for (k, p) in keypoints.iter().enumerate() {
        let (x, y) = ((p.x / 8.0) as usize, (p.y / 8.0) as usize);
        assert_eq!(t.heatmap[k * g + y * t.grid + x], 1.0);
    }
}
