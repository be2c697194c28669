use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mdsp::bench::benchmark;
use mdsp::eval::{evaluate, predict, MetricsReport};
use mdsp::postprocess::{kmeans_anchors, mean_best_iou};
use mdsp::synth::{generate_dataset, read_dataset, read_ppm, write_dataset, write_ppm, Rle, Sample, DET_CLASSES};
use mdsp::train::{train, write_log_csv};
use mdsp::{Mdsp, MdspError, TaskSet, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::config::{write_resolved, Loaded, RunConfig};
use crate::draw::overlay;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(MdspError::from)?;
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn read_data(dir: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let data = read_dataset(dir)?;
    let size = cfg.model.input_size;
    if let Some(s) = data.iter().find(|s| s.ann.width != size || s.ann.height != size) {
        return Err(MdspError::Shape(format!(
            "{} holds {}x{} images but the model input is {}x{}",
            dir.display(),
            s.ann.width,
            s.ann.height,
            size,
            size
        ))
        .into());
    }
    Ok(data)
}

/// Loads a checkpoint. A configuration that sets `[model]` keys must agree
/// with it; otherwise the checkpoint's own spec is adopted.
fn load_model(path: &Path, loaded: &mut Loaded) -> Result<Mdsp<f32>> {
    if !path.is_file() {
        return Err(CliError::Io { path: path.into(), source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such checkpoint") });
    }
    let model = if loaded.model_given {
        let tasks = Mdsp::<f32>::load(path)?.tasks();
        Mdsp::<f32>::load_expecting(path, &loaded.config.model.spec(tasks))?
    } else {
        Mdsp::<f32>::load(path)?
    };
    loaded.config.model.adopt(&model.spec);
    Ok(model)
}

fn print_report(report: &MetricsReport, format: Format) -> Result<()> {
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Json => println!("{}", serde_json::to_string_pretty(report).map_err(MdspError::from)?),
    }
    Ok(())
}

pub fn synth(loaded: Loaded, out: &Path, count: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = loaded.config;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let gen = cfg.data.gen_spec(cfg.model.input_size);
    let samples = generate_dataset(&gen, count)?;
    create_dir(out)?;
    write_dataset(out, &samples)?;
    write_resolved(out, &cfg)?;

    let mut per_class = [0usize; 4];
    let (mut persons, mut visible) = (0, 0);
    for s in &samples {
        for b in &s.ann.boxes {
            per_class[b.class_id] += 1;
        }
        persons += s.ann.persons.len();
        visible += s.ann.persons.iter().flat_map(|p| &p.keypoints).filter(|k| k.visible).count();
    }
    println!("wrote {} images to {}", count, out.display());
    println!("{:<18} {:>9}", "class", "instances");
    for (name, n) in DET_CLASSES.iter().zip(per_class) {
        println!("{:<18} {:>9}", name, n);
    }
    println!("{} persons, {} visible keypoints", persons, visible);
    Ok(())
}

pub fn anchors(loaded: Loaded, data: &Path, k: usize, seed: u64) -> Result<()> {
    let samples = read_dataset(data)?;
    let boxes: Vec<(f64, f64)> = samples.iter().flat_map(|s| s.ann.boxes.iter().map(|b| (b.bbox.w, b.bbox.h))).collect();
    if boxes.len() < k {
        return Err(MdspError::InvalidArgument(format!("{} boxes in {}, need at least {}", boxes.len(), data.display(), k)).into());
    }
    let mut centroids = kmeans_anchors(&boxes, k, seed)?;
    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    println!("{:>3} {:>9} {:>9}", "#", "w", "h");
    for (i, (w, h)) in centroids.iter().enumerate() {
        println!("{:>3} {:>9.2} {:>9.2}", i, w, h);
    }
    println!("mean best IoU {:.4} over {} boxes", mean_best_iou(&boxes, &centroids), boxes.len());
    let list: Vec<String> = centroids.iter().map(|(w, h)| format!("[{:.3}, {:.3}]", w, h)).collect();
    println!("model.anchors=[{}]", list.join(", "));
    drop(loaded);
    Ok(())
}

pub fn train_cmd(loaded: Loaded, data: &Path, out: &Path, eval_data: Option<&Path>) -> Result<()> {
    let mut cfg = loaded.config;
    let samples = read_data(data, &cfg)?;
    if cfg.model.kmeans_anchors {
        let boxes: Vec<(f64, f64)> = samples.iter().flat_map(|s| s.ann.boxes.iter().map(|b| (b.bbox.w, b.bbox.h))).collect();
        cfg.model.anchors = kmeans_anchors(&boxes, 9, cfg.model.seed)?;
        cfg.model.kmeans_anchors = false;
    }
    let spec = cfg.model.spec(cfg.train.tasks);
    spec.validate()?;
    cfg.model.anchors = spec.anchors.clone();
    let mut model = Mdsp::<f32>::build(&spec, cfg.model.seed)?;
    create_dir(out)?;
    write_resolved(out, &cfg)?;
    println!("training {} on {} images, {} parameters", cfg.train.tasks, samples.len(), model.num_params());
    let logs = train(&mut model, &samples, &cfg.train, |l| {
        let parts: Vec<String> = mdsp::Task::ALL
            .iter()
            .filter_map(|&t| l.loss(t).map(|v| format!("{} {:.4} (λ {:.3})", t.name(), v, l.lambda(t).unwrap_or(1.0))))
            .collect();
        println!("epoch {:>4}  total {:.4}  lr {:.2e}  {}", l.epoch, l.total, l.lr, parts.join("  "));
    })?;
    model.save(&out.join("model.ckpt"))?;
    write_log_csv(&out.join("train_log.csv"), &logs)?;
    if let Some(dir) = eval_data {
        let eval_samples = read_data(dir, &cfg)?;
        let report = evaluate(&model, &eval_samples, cfg.train.tasks, &cfg.decode, &cfg.eval)?;
        write_json(&out.join("metrics.json"), &report)?;
        print!("{}", report.to_table());
    }
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

pub fn eval_cmd(mut loaded: Loaded, checkpoint: &Path, data: &Path, tasks: Option<TaskSet>, format: Format, out: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, &mut loaded)?;
    let built = model.tasks();
    let tasks = tasks.unwrap_or(built);
    if !tasks.is_subset_of(built) {
        return Err(MdspError::InvalidArgument(format!("checkpoint has tasks {}, requested {}", built, tasks)).into());
    }
    let cfg = &loaded.config;
    let samples = read_data(data, cfg)?;
    let report = evaluate(&model, &samples, tasks, &cfg.decode, &cfg.eval)?;
    print_report(&report, format)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
        write_resolved(dir, cfg)?;
    }
    Ok(())
}

/// Input images with the names used for their outputs.
fn infer_inputs(data: Option<&Path>, images: &[PathBuf]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    if let Some(dir) = data {
        for (i, s) in read_dataset(dir)?.into_iter().enumerate() {
            out.push((format!("{:04}", i), s.image));
        }
    }
    for p in images {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("{:04}", out.len()));
        out.push((stem, read_ppm(p)?));
    }
    if out.is_empty() {
        return Err(CliError::Usage("infer needs --data or at least one image".into()));
    }
    Ok(out)
}

pub fn infer(mut loaded: Loaded, checkpoint: &Path, out: &Path, data: Option<&Path>, images: &[PathBuf]) -> Result<()> {
    let model = load_model(checkpoint, &mut loaded)?;
    let cfg = &loaded.config;
    cfg.decode.validate()?;
    let inputs = infer_inputs(data, images)?;
    let size = model.spec.input_size;
    for (name, img) in &inputs {
        if img.shape() != [3, size, size] {
            return Err(MdspError::Shape(format!("{}: image shape {:?}, model expects {:?}", name, img.shape(), [3, size, size])).into());
        }
    }
    let overlays = out.join("overlays");
    create_dir(&overlays)?;
    write_resolved(out, cfg)?;
    let jsonl = out.join("predictions.jsonl");
    let mut w = BufWriter::new(File::create(&jsonl).map_err(CliError::io(&jsonl))?);
    for chunk in inputs.chunks(cfg.eval.batch_size.max(1)) {
        let batch: Vec<Tensor<f32>> = chunk.iter().map(|(_, t)| t.clone()).collect();
        let preds = predict(&model, &batch, &cfg.decode)?;
        for ((name, img), p) in chunk.iter().zip(&preds) {
            let file = overlays.join(format!("{}.ppm", name));
            write_ppm(&file, &overlay(img, p, &model.spec))?;
            let detections: Option<Vec<_>> = p.detections.as_ref().map(|ds| {
                ds.iter()
                    .map(|d| {
                        json!({
                            "class_id": d.class_id,
                            "class": DET_CLASSES.get(d.class_id),
                            "score": d.score,
                            "bbox": [d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h],
                        })
                    })
                    .collect()
            });
            let segmentation = p.label_map.as_ref().map(|lm| {
                let mut pixels = vec![0usize; model.spec.num_seg_classes];
                for &c in &lm.data {
                    pixels[c as usize] += 1;
                }
                json!({
                    "width": lm.width,
                    "height": lm.height,
                    "class_pixels": pixels,
                    "label_map": Rle::encode(lm.data.iter().map(|&v| v as u16)),
                })
            });
            let skeletons: Option<Vec<_>> = p.skeletons.as_ref().map(|sks| {
                sks.iter()
                    .map(|s| {
                        let kps: Vec<_> = s.keypoints.iter().map(|k| k.map(|k| [k.x, k.y, k.conf])).collect();
                        json!({ "score": s.score, "keypoints": kps })
                    })
                    .collect()
            });
            let rec = json!({
                "image": name,
                "overlay": file.strip_prefix(out).unwrap_or(&file),
                "detections": detections,
                "segmentation": segmentation,
                "skeletons": skeletons,
            });
            serde_json::to_writer(&mut w, &rec).map_err(MdspError::from)?;
            w.write_all(b"\n").map_err(CliError::io(&jsonl))?;
        }
    }
    w.flush().map_err(CliError::io(&jsonl))?;
    println!("{} predictions written to {}", inputs.len(), jsonl.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn bench(
    mut loaded: Loaded,
    checkpoint: Option<&Path>,
    tasks: Option<TaskSet>,
    images: usize,
    repeats: usize,
    format: Format,
    out: Option<&Path>,
) -> Result<()> {
    let model = match checkpoint {
        Some(p) => {
            if tasks.is_some() {
                return Err(CliError::Usage("--tasks applies only without --checkpoint".into()));
            }
            load_model(p, &mut loaded)?
        }
        None => {
            let m = &loaded.config.model;
            Mdsp::<f32>::build(&m.spec(tasks.unwrap_or(TaskSet::ALL)), m.seed)?
        }
    };
    let cfg = &loaded.config;
    if images == 0 {
        return Err(CliError::Usage("--images must be at least 1".into()));
    }
    let scenes = generate_dataset(&cfg.data.gen_spec(model.spec.input_size), images)?;
    let batch = Tensor::stack(&scenes.into_iter().map(|s| s.image).collect::<Vec<_>>())?;
    let report = benchmark(&model, &batch, repeats, &cfg.decode)?;
    match format {
        Format::Table => {
            println!("tasks {}, {} images per run, {} runs", model.tasks(), report.images, report.repeats);
            print!("{}", report.to_table());
        }
        Format::Csv => {
            println!("run,cnn_ms,total_ms");
            for (i, (c, t)) in report.cnn.samples_ms.iter().zip(&report.total.samples_ms).enumerate() {
                println!("{},{:.4},{:.4}", i, c, t);
            }
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).map_err(MdspError::from)?),
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("bench.json"), &report)?;
        write_resolved(dir, cfg)?;
    }
    Ok(())
}
