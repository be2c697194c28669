//! Inference timing with and without post-processing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{MdspError, Result};
use crate::model::{Mdsp, NetworkOutput};
use crate::postprocess::{decode_detections, decode_pose, seg_decode, DecodeConfig};
use crate::tensor::{Element, Tensor};

pub const WARMUP_RUNS: usize = 2;
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Forward pass to raw output tensors.
    Cnn,
    /// Forward pass plus decoding, NMS, argmax and pose grouping.
    Total,
}

impl BenchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(BenchMode::Cnn),
            "total" => Ok(BenchMode::Total),
            other => Err(MdspError::Config(format!("unknown bench mode {:?} (expected cnn or total)", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Per-image milliseconds of every measured run.
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(mut samples_ms: Vec<f64>) -> Self {
        let mut s = samples_ms.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        samples_ms.shrink_to_fit();
        Self { median_ms, p95_ms: s[rank - 1], samples_ms }
    }
}

/// Paired measurements: every run times the forward pass and then the
/// post-processing of that same output, so `total >= cnn` per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cnn: Timing,
    pub total: Timing,
    pub images: usize,
    pub repeats: usize,
}

impl BenchReport {
    pub fn timing(&self, mode: BenchMode) -> &Timing {
        match mode {
            BenchMode::Cnn => &self.cnn,
            BenchMode::Total => &self.total,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6}  {:>10}  {:>10}\n", "mode", "median_ms", "p95_ms");
        for (name, t) in [("cnn", &self.cnn), ("total", &self.total)] {
            s.push_str(&format!("{:<6}  {:>10.3}  {:>10.3}\n", name, t.median_ms, t.p95_ms));
        }
        s
    }
}

fn postprocess<T: Element>(model: &Mdsp<T>, out: &NetworkOutput<T>, n: usize, cfg: &DecodeConfig) -> Result<usize> {
    let mut work = 0;
    for b in 0..n {
        if let Some(d) = &out.detect {
            work += decode_detections(d, &model.spec, b, cfg).len();
        }
        if let Some(s) = &out.seg_logits {
            work += seg_decode(&s.batch_item(b)?)?.data.len();
        }
        if let Some(p) = &out.pose {
            work += decode_pose(&p.batch_item(b)?, &model.spec, cfg)?.len();
        }
    }
    Ok(work)
}

/// Times `repeats` runs over `images` (an `(N, 3, H, W)` batch) after
/// [`WARMUP_RUNS`] unmeasured runs. Reported times are per image.
pub fn benchmark<T: Element>(model: &Mdsp<T>, images: &Tensor<T>, repeats: usize, cfg: &DecodeConfig) -> Result<BenchReport> {
    if repeats < MIN_REPEATS {
        return Err(MdspError::InvalidArgument(format!("need at least {} repeats, got {}", MIN_REPEATS, repeats)));
    }
    let n = images.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(MdspError::InvalidArgument("no images to benchmark".into()));
    }
    let mut cnn = Vec::with_capacity(repeats);
    let mut total = Vec::with_capacity(repeats);
    for run in 0..WARMUP_RUNS + repeats {
        let t0 = Instant::now();
        let out = model.infer(images)?;
        let t1 = Instant::now();
        std::hint::black_box(postprocess(model, &out, n, cfg)?);
        let t2 = Instant::now();
        if run >= WARMUP_RUNS {
            let per = 1e3 / n as f64;
            cnn.push((t1 - t0).as_secs_f64() * per);
            total.push((t2 - t0).as_secs_f64() * per);
        }
    }
    Ok(BenchReport { cnn: Timing::from_samples(cnn), total: Timing::from_samples(total), images: n, repeats })
}

/// Median and p95 per-image milliseconds for one mode.
pub fn benchmark_inference<T: Element>(
    model: &Mdsp<T>,
    images: &Tensor<T>,
    mode: BenchMode,
    repeats: usize,
    cfg: &DecodeConfig,
) -> Result<Timing> {
    Ok(benchmark(model, images, repeats, cfg)?.timing(mode).clone())
}
