use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::spec::DEFAULT_FLIP_PAIRS;
use crate::tensor::Tensor;

use super::{quantize, Keypoint, ObjectBox, PersonAnn, Sample, SceneAnnotation};

/// One draw of the geometric and photometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub mirror: bool,
    pub vflip: bool,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self { angle_deg: 0.0, mirror: false, vflip: false, scale: 1.0, noise_sigma: 0.0 }
    }

    /// Rotation within ±15°, mirror with p = 0.5, vertical flip with
    /// p = 0.1, scale in [0.8, 1.2], noise sigma up to 0.02.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            angle_deg: rng.random_range(-15.0..=15.0),
            mirror: rng.random_bool(0.5),
            vflip: rng.random_bool(0.1),
            scale: rng.random_range(0.8..=1.2),
            noise_sigma: rng.random_range(0.0..=0.02),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Linear part of the forward map about the image center.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let fx = if self.mirror { -1.0 } else { 1.0 };
        let fy = if self.vflip { -1.0 } else { 1.0 };
        [[fx * self.scale * c, -fx * self.scale * s], [fy * self.scale * s, fy * self.scale * c]]
    }

    /// Whether the map reverses orientation (left and right swap).
    pub fn reflects(&self) -> bool {
        self.mirror != self.vflip
    }
}

/// Samples parameters from `rng` and applies them.
pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let p = AugmentParams::sample(rng);
    p.apply(sample, rng)
}

impl AugmentParams {
    /// Warps image, label map and instance map with the same transform,
    /// recomputes boxes from the warped masks and moves keypoints. Instances
    /// left without pixels are dropped.
    pub fn apply<R: Rng>(&self, sample: &Sample, rng: &mut R) -> Sample {
        if self.is_identity() {
            return sample.clone();
        }
        let ann = &sample.ann;
        let n = ann.width;
        let c = 0.5 * n as f64;
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        let src_of = |x: f64, y: f64| {
            let (dx, dy) = (x - c, y - c);
            (c + inv[0][0] * dx + inv[0][1] * dy, c + inv[1][0] * dx + inv[1][1] * dy)
        };
        let img = sample.image.data();
        let plane = n * n;
        let mut out = vec![0.0f64; 3 * plane];
        let mut labels = SceneAnnotation::empty(n, n);
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).expect("finite sigma"));
        for y in 0..n {
            for x in 0..n {
                let (sx, sy) = src_of(x as f64 + 0.5, y as f64 + 0.5);
                // bilinear on pixel centers, gray outside
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                for ch in 0..3 {
                    let at = |xi: f64, yi: f64| -> f64 {
                        if xi < 0.0 || yi < 0.0 || xi >= n as f64 || yi >= n as f64 {
                            0.5
                        } else {
                            img[ch * plane + yi as usize * n + xi as usize] as f64
                        }
                    };
                    let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1.0, y0) * ax;
                    let bot = at(x0, y0 + 1.0) * (1.0 - ax) + at(x0 + 1.0, y0 + 1.0) * ax;
                    out[ch * plane + y * n + x] = top * (1.0 - ay) + bot * ay;
                }
                let (px, py) = (sx.floor(), sy.floor());
                if px >= 0.0 && py >= 0.0 && px < n as f64 && py < n as f64 {
                    let si = py as usize * n + px as usize;
                    labels.label_map.data[y * n + x] = ann.label_map.data[si];
                    labels.instance_map[y * n + x] = ann.instance_map[si];
                }
            }
        }
        if let Some(noise) = noise {
            for v in out.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        for b in &ann.boxes {
            if let Some(bbox) = labels.instance_bounds(b.instance) {
                labels.boxes.push(ObjectBox { bbox, ..*b });
            }
        }
        let fwd = |x: f64, y: f64| {
            let (dx, dy) = (x - c, y - c);
            (c + m[0][0] * dx + m[0][1] * dy, c + m[1][0] * dx + m[1][1] * dy)
        };
        for p in &ann.persons {
            let Some(b) = labels.boxes.iter().find(|b| b.instance == p.instance) else { continue };
            let mut kps: Vec<Keypoint> = p
                .keypoints
                .iter()
                .map(|k| {
                    let (x, y) = fwd(k.x, k.y);
                    let inside = x >= 0.0 && y >= 0.0 && x < n as f64 && y < n as f64;
                    Keypoint { x, y, visible: k.visible && inside }
                })
                .collect();
            if self.reflects() {
                for &(l, r) in DEFAULT_FLIP_PAIRS.iter() {
                    if r < kps.len() {
                        kps.swap(l, r);
                    }
                }
            }
            labels.persons.push(PersonAnn { instance: p.instance, bbox: b.bbox, keypoints: kps });
        }
        let data: Vec<f32> = out.iter().map(|&v| quantize(v)).collect();
        Sample { image: Tensor::new(vec![3, n, n], data).expect("image extent"), ann: labels }
    }
}
