//! Dataset directory layout:
//!
//! ```text
//! <dir>/images/0000.ppm      binary PPM (P6, 8-bit)
//! <dir>/annotations.jsonl    one JSON object per image, in index order
//! ```
//!
//! Each annotation line holds `id`, `image`, `width`, `height`, `boxes`
//! (`class_id`, `instance`, and `cx, cy, w, h` in pixels), `label_map` and
//! `instance_map` as run-length pairs `[value, count]` in row-major order,
//! and `persons` (`instance`, `bbox`, `keypoints` as `[x, y, visible]`).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};
use crate::postprocess::{BBox, LabelMap};
use crate::tensor::Tensor;

use super::{Keypoint, ObjectBox, PersonAnn, Sample, SceneAnnotation};

/// Run-length encoding as `(value, count)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rle(pub Vec<(u16, u32)>);

impl Rle {
    pub fn encode(values: impl IntoIterator<Item = u16>) -> Self {
        let mut runs: Vec<(u16, u32)> = Vec::new();
        for v in values {
            match runs.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        Self(runs)
    }

    pub fn decode(&self, len: usize) -> Result<Vec<u16>> {
        let mut out = Vec::with_capacity(len);
        for &(v, n) in &self.0 {
            out.extend(std::iter::repeat_n(v, n as usize));
        }
        if out.len() != len {
            return Err(MdspError::Format(format!("run-length data covers {} pixels, expected {}", out.len(), len)));
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    class_id: usize,
    instance: u16,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonRecord {
    instance: u16,
    bbox: [f64; 4],
    keypoints: Vec<(f64, f64, bool)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    id: usize,
    image: String,
    width: usize,
    height: usize,
    boxes: Vec<BoxRecord>,
    label_map: Rle,
    instance_map: Rle,
    persons: Vec<PersonRecord>,
}

fn bbox4(b: &BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

/// Writes a `3 x H x W` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        s => return Err(MdspError::Shape(format!("write_ppm expects (3, H, W), got {:?}", s))),
    };
    if c != 3 {
        return Err(MdspError::Shape(format!("write_ppm expects 3 channels, got {}", c)));
    }
    let d = image.data();
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn ppm_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(ch);
    }
    Ok(tok)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |what: &str| MdspError::Format(format!("{}: {}", path.display(), what));
    if ppm_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let w: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let maxv: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad max value"))?;
    if maxv != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + i] = raw[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut ann_out = BufWriter::new(File::create(dir.join("annotations.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{:04}.ppm", i);
        write_ppm(&dir.join(&rel), &s.image)?;
        let a = &s.ann;
        let rec = AnnotationRecord {
            id: i,
            image: rel,
            width: a.width,
            height: a.height,
            boxes: a
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    class_id: b.class_id,
                    instance: b.instance,
                    cx: b.bbox.cx,
                    cy: b.bbox.cy,
                    w: b.bbox.w,
                    h: b.bbox.h,
                })
                .collect(),
            label_map: Rle::encode(a.label_map.data.iter().map(|&v| v as u16)),
            instance_map: Rle::encode(a.instance_map.iter().copied()),
            persons: a
                .persons
                .iter()
                .map(|p| PersonRecord {
                    instance: p.instance,
                    bbox: bbox4(&p.bbox),
                    keypoints: p.keypoints.iter().map(|k| (k.x, k.y, k.visible)).collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut ann_out, &rec)?;
        ann_out.write_all(b"\n")?;
    }
    ann_out.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join("annotations.jsonl");
    let f = File::open(&path).map_err(|e| MdspError::Io(std::io::Error::new(e.kind(), format!("{}: {}", path.display(), e))))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| MdspError::Format(format!("{} line {}: {}", path.display(), lineno + 1, e)))?;
        let image = read_ppm(&dir.join(&rec.image))?;
        if image.shape() != [3, rec.height, rec.width] {
            return Err(MdspError::Format(format!("{} does not match its annotation size", rec.image)));
        }
        let n = rec.width * rec.height;
        let labels = rec.label_map.decode(n)?;
        let ann = SceneAnnotation {
            width: rec.width,
            height: rec.height,
            boxes: rec
                .boxes
                .iter()
                .map(|b| ObjectBox { bbox: BBox::new(b.cx, b.cy, b.w, b.h), class_id: b.class_id, instance: b.instance })
                .collect(),
            label_map: LabelMap {
                width: rec.width,
                height: rec.height,
                data: labels.iter().map(|&v| v as u8).collect(),
            },
            instance_map: rec.instance_map.decode(n)?,
            persons: rec
                .persons
                .iter()
                .map(|p| PersonAnn {
                    instance: p.instance,
                    bbox: BBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3]),
                    keypoints: p.keypoints.iter().map(|&(x, y, visible)| Keypoint { x, y, visible }).collect(),
                })
                .collect(),
        };
        out.push(Sample { image, ann });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GenSpec};

    #[test]
    fn rle_roundtrip() {
        let v = vec![0u16, 0, 0, 2, 2, 1, 0, 0];
        let r = Rle::encode(v.iter().copied());
        assert_eq!(r.0, vec![(0, 3), (2, 2), (1, 1), (0, 2)]);
        assert_eq!(r.decode(8).unwrap(), v);
        assert!(r.decode(9).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&GenSpec::new(64), 3).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.ann.label_map, b.ann.label_map);
            assert_eq!(a.ann.instance_map, b.ann.instance_map);
            assert_eq!(a.ann.boxes, b.ann.boxes);
            for (p, q) in a.ann.persons.iter().zip(&b.ann.persons) {
                for (k, l) in p.keypoints.iter().zip(&q.keypoints) {
                    assert!((k.x - l.x).abs() < 1e-9 && (k.y - l.y).abs() < 1e-9);
                }
            }
        }
    }
}
