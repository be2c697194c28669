//! Overlay rendering: translucent segmentation mask, labelled boxes and
//! skeleton lines drawn into a copy of the input image.

use mdsp::eval::Predictions;
use mdsp::{NetworkSpec, Tensor};

type Rgb = [f32; 3];

/// Colors of the detection classes; segmentation class `c` uses entry `c - 1`.
pub const CLASS_COLORS: [Rgb; 4] = [[1.0, 0.25, 0.2], [0.2, 0.9, 0.3], [0.25, 0.5, 1.0], [1.0, 0.85, 0.1]];
pub const CLASS_TAGS: [&str; 4] = ["PER", "CHS", "INF", "OBJ"];
const MASK_ALPHA: f32 = 0.4;
const LIMB: Rgb = [0.0, 1.0, 1.0];
const JOINT: Rgb = [1.0, 0.0, 1.0];

pub struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Canvas {
    pub fn new(image: &Tensor<f32>) -> Self {
        let s = image.shape();
        Self { w: s[s.len() - 1], h: s[s.len() - 2], data: image.data().to_vec() }
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(vec![3, self.h, self.w], self.data).expect("canvas keeps its shape")
    }

    fn blend(&mut self, x: i64, y: i64, c: Rgb, alpha: f32) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let plane = self.w * self.h;
        let i = y as usize * self.w + x as usize;
        for (ch, v) in c.iter().enumerate() {
            let p = &mut self.data[ch * plane + i];
            *p = (1.0 - alpha) * *p + alpha * v;
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb) {
        self.blend(x, y, c, 1.0);
    }

    fn rect_outline(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.put(x, y, c);
            }
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    /// 3x5 glyphs with one pixel of spacing; unknown characters are blank.
    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb) {
        for (k, ch) in s.chars().enumerate() {
            let rows = glyph(ch);
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row >> (2 - dx) & 1 == 1 {
                        self.put(x + 4 * k as i64 + dx, y + dy as i64, c);
                    }
                }
            }
        }
    }
}

fn glyph(ch: char) -> [u8; 5] {
    match ch {
        '0' | 'O' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' | 'S' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        'B' => [6, 5, 6, 5, 6],
        'C' => [7, 4, 4, 4, 7],
        'E' => [7, 4, 7, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 7],
        'N' => [6, 5, 5, 5, 5],
        'P' => [7, 5, 7, 4, 4],
        'R' => [7, 5, 6, 5, 5],
        _ => [0; 5],
    }
}

/// Short label such as `PER .93`.
pub fn label(class_id: usize, score: f64) -> String {
    let tag = CLASS_TAGS.get(class_id).copied().unwrap_or("?");
    let s = format!("{:.2}", score.clamp(0.0, 0.99));
    format!("{} {}", tag, s.trim_start_matches('0'))
}

pub fn overlay(image: &Tensor<f32>, pred: &Predictions, spec: &NetworkSpec) -> Tensor<f32> {
    let mut cv = Canvas::new(image);
    if let Some(lm) = &pred.label_map {
        for y in 0..lm.height.min(cv.h) {
            for x in 0..lm.width.min(cv.w) {
                let c = lm.get(x, y) as usize;
                if c > 0 {
                    cv.blend(x as i64, y as i64, CLASS_COLORS[(c - 1) % CLASS_COLORS.len()], MASK_ALPHA);
                }
            }
        }
    }
    for d in pred.detections.iter().flatten() {
        let c = CLASS_COLORS[d.class_id % CLASS_COLORS.len()];
        let b = d.bbox;
        let (x0, y0, x1, y1) = (b.x0().round() as i64, b.y0().round() as i64, b.x1().round() as i64 - 1, b.y1().round() as i64 - 1);
        cv.rect_outline(x0, y0, x1, y1, c);
        let text = label(d.class_id, d.score);
        let tw = 4 * text.len() as i64;
        let tx = x0.min(cv.w as i64 - 1 - tw).max(0);
        let ty = if y0 >= 7 { y0 - 7 } else { y0 + 1 };
        cv.fill(tx, ty, tx + tw, ty + 6, c);
        cv.text(tx + 1, ty + 1, &text, [0.0; 3]);
    }
    for sk in pred.skeletons.iter().flatten() {
        let at = |k: usize| sk.keypoints.get(k).copied().flatten().map(|p| (p.x.floor() as i64, p.y.floor() as i64));
        for &(a, b) in &spec.limb_defs {
            if let (Some(p), Some(q)) = (at(a), at(b)) {
                cv.line(p, q, LIMB);
            }
        }
        for (x, y) in (0..sk.keypoints.len()).filter_map(at) {
            cv.fill(x - 1, y - 1, x + 1, y + 1, JOINT);
        }
    }
    cv.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdsp::postprocess::{BBox, Detection, LabelMap};

    fn px(t: &Tensor<f32>, x: usize, y: usize) -> [f32; 3] {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        [0, 1, 2].map(|c| t.data()[c * h * w + y * w + x])
    }

    #[test]
    fn empty_predictions_keep_the_image() {
        let img = Tensor::new(vec![3, 32, 32], (0..3 * 32 * 32).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert_eq!(overlay(&img, &Predictions::default(), &NetworkSpec::new(32, 0.125)), img);
    }

    #[test]
    fn boxes_masks_and_labels_are_drawn() {
        let img = Tensor::zeros(&[3, 32, 32]);
        let mut lm = LabelMap::filled(32, 32, 0);
        lm.set(30, 30, 1);
        let pred = Predictions {
            detections: Some(vec![Detection { bbox: BBox::new(16.0, 20.0, 10.0, 8.0), class_id: 1, score: 0.5 }]),
            label_map: Some(lm),
            skeletons: None,
        };
        let out = overlay(&img, &pred, &NetworkSpec::new(32, 0.125));
        assert_eq!(px(&out, 11, 16), CLASS_COLORS[1]);
        let m = px(&out, 30, 30);
        assert!((m[0] - MASK_ALPHA * CLASS_COLORS[0][0]).abs() < 1e-6);
        assert_eq!(px(&out, 0, 0), [0.0; 3]);
        assert_eq!(label(1, 0.5), "CHS .50");
        assert_eq!(label(0, 1.0), "PER .99");
    }
}
