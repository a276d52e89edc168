use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use serde::Serialize;
use serde_json::{json, Value};

use cployo::datatrain::{
    evaluate_checkpoint, fuse_checkpoint, generate_synthetic, load_dataset, Checkpoint, EpochRecord, SyntheticSpec,
    TrainConfig, Trainer, EVAL_NMS,
};
use cployo::imaging::{kmeans_segment, otsu_threshold, read_slice, segment_lung, write_mask_png, SegmentationConfig};
use cployo::metrics::MetricsReport;
use cployo::neckhead::{Detection, DetectionRecord};
use cployo::verify::{check_block, checkpoint_fusion, BlockGradReport, GRAD_BLOCKS, GRAD_TOL};
use cployo::{Error, Tensor};

/// Exit code for numeric failures (non-finite values, gradient mismatch).
const EXIT_NUMERIC: u8 = 3;
const GRAD_FAIL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "cployo", version, about = "Lung nodule detection toolkit")]
struct Cli {
    /// Output format on stdout.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic nodule dataset.
    GenData {
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment lung parenchyma in one PNG or a directory of PNGs.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum component area in pixels (defaults scale with image size).
        #[arg(long)]
        min_area: Option<usize>,
        /// Use k-means with K clusters instead of Otsu.
        #[arg(long)]
        kmeans: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a detector; writes checkpoint.bin and history.json into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (fused inference) on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Detect nodules in one image.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Detections JSON file.
        #[arg(long)]
        out: PathBuf,
        /// PNG with box overlays.
        #[arg(long)]
        annotate: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        score_thr: f64,
    },
    /// Fold reparameterizable branches and report output agreement.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 64)]
        probe_size: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or one of the block names.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

struct Outcome {
    json: Value,
    text: String,
    code: u8,
}

impl Outcome {
    fn ok(json: Value, text: String) -> Self {
        Outcome { json, text, code: 0 }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads() {
        return report_error(cli.format, &e);
    }
    match run(cli.command) {
        Ok(o) => {
            match cli.format {
                Format::Json => println!("{}", o.json),
                Format::Text => print!("{}", o.text),
            }
            ExitCode::from(o.code)
        }
        Err(e) => report_error(cli.format, &e),
    }
}

fn report_error(format: Format, e: &Error) -> ExitCode {
    let code = exit_code(e);
    eprintln!("error: {e}");
    if format == Format::Json {
        println!("{}", json!({ "error": e.to_string(), "exit_code": code }));
    }
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("CPLOYO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("CPLOYO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn run(cmd: Command) -> Result<Outcome, Error> {
    match cmd {
        Command::GenData { n, size, seed, out } => gen_data(n, size, seed, &out),
        Command::Segment {
            input,
            out,
            min_area,
            kmeans,
            seed,
        } => segment(&input, &out, min_area, kmeans, seed),
        Command::Train { config, data, out } => train(&config, &data, &out),
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::Detect {
            ckpt,
            image,
            out,
            annotate,
            score_thr,
        } => detect(&ckpt, &image, &out, annotate.as_deref(), score_thr),
        Command::Fuse {
            ckpt,
            out,
            probes,
            probe_size,
        } => fuse(&ckpt, &out, probes, probe_size),
        Command::Gradcheck { module, seeds } => gradcheck(&module, seeds),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn gen_data(n: usize, size: usize, seed: u64, out: &Path) -> Result<Outcome, Error> {
    let spec = SyntheticSpec {
        n_images: n,
        size,
        seed,
        ..SyntheticSpec::default()
    };
    let samples = generate_synthetic(&spec, out)?;
    let boxes: usize = samples.iter().map(|s| s.boxes.len()).sum();
    Ok(Outcome::ok(
        json!({ "command": "gen-data", "out": out, "images": samples.len(), "boxes": boxes }),
        format!("wrote {} images ({boxes} boxes) to {}\n", samples.len(), out.display()),
    ))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>, Error> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

fn segment(input: &Path, out: &Path, min_area: Option<usize>, kmeans: Option<usize>, seed: u64) -> Result<Outcome, Error> {
    let files = png_inputs(input)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut text = String::new();
    for file in files {
        let slice = read_slice(&file)?;
        let mut cfg = SegmentationConfig::for_size(slice.h, slice.w);
        if let Some(a) = min_area {
            cfg.min_area_px = a;
        }
        let (mask, threshold) = match kmeans {
            Some(k) => (kmeans_segment(&slice, k, seed)?, None),
            None => {
                let t = match otsu_threshold(&slice) {
                    Ok(t) => Some(t),
                    Err(Error::DegenerateHistogram) => None,
                    Err(e) => return Err(e),
                };
                (segment_lung(&slice, &cfg)?, t)
            }
        };
        let name = file.file_name().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("mask.png"));
        let dst = out.join(name).with_extension("png");
        write_mask_png(&mask, &dst)?;
        text.push_str(&format!(
            "{} -> {} threshold={} mask_px={}\n",
            file.display(),
            dst.display(),
            threshold.map_or("none".to_string(), |t| t.to_string()),
            mask.count()
        ));
        rows.push(json!({
            "image": file,
            "mask": dst,
            "threshold": threshold,
            "mask_px": mask.count(),
        }));
    }
    let method = if kmeans.is_some() { "kmeans" } else { "otsu" };
    Ok(Outcome::ok(json!({ "command": "segment", "method": method, "images": rows }), text))
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<Outcome, Error> {
    let cfg = TrainConfig::from_json_file(config)?;
    let dataset = load_dataset(data)?;
    let mut trainer = Trainer::new(&cfg, &dataset)?;
    trainer.fit()?;
    let ckpt = trainer.checkpoint();
    create_dir(out)?;
    let ckpt_path = out.join("checkpoint.bin");
    let history_path = out.join("history.json");
    ckpt.save(&ckpt_path)?;
    write_json(&history_path, &ckpt.history)?;
    let last: Option<&EpochRecord> = ckpt.history.last();
    let text = match last {
        Some(r) => format!(
            "trained {} epochs, final loss {:.5}{}\ncheckpoint {}\n",
            ckpt.epoch,
            r.loss,
            r.map50.map_or(String::new(), |m| format!(", mAP50 {m:.4}")),
            ckpt_path.display()
        ),
        None => format!("no epochs run\ncheckpoint {}\n", ckpt_path.display()),
    };
    Ok(Outcome::ok(
        json!({
            "command": "train",
            "checkpoint": ckpt_path,
            "history": history_path,
            "epochs": ckpt.epoch,
            "final": last,
        }),
        text,
    ))
}

fn eval(ckpt: &Path, data: &Path) -> Result<Outcome, Error> {
    let ckpt = Checkpoint::load(ckpt)?;
    let dataset = load_dataset(data)?;
    let r = evaluate_checkpoint(&ckpt, &dataset)?;
    let m = MetricsReport::from(&r);
    let per_iou: Vec<Value> = r.ap_per_iou.iter().map(|&(t, ap)| json!({ "iou": t, "map": ap })).collect();
    let text = format!(
        "P {:.4}  R {:.4}  mAP50 {:.4}  mAP50-95 {:.4}\n",
        m.precision, m.recall, m.map50, m.map50_95
    );
    Ok(Outcome::ok(
        json!({
            "command": "eval",
            "images": dataset.len(),
            "precision": m.precision,
            "recall": m.recall,
            "map50": m.map50,
            "map50_95": m.map50_95,
            "ap_per_iou": per_iou,
        }),
        text,
    ))
}

fn detect(ckpt: &Path, image: &Path, out: &Path, annotate: Option<&Path>, score_thr: f64) -> Result<Outcome, Error> {
    let ckpt = Checkpoint::load(ckpt)?;
    let (mut det, mut store) = ckpt.detector()?;
    if !ckpt.fused {
        det.fuse(&mut store)?;
    }
    let slice = read_slice(image)?;
    let pixels = slice.quantize();
    let x = Tensor::new(&[1, 1, slice.h, slice.w], pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    let nms = cployo::neckhead::NmsConfig { score_thr, ..EVAL_NMS };
    let dets: Vec<Detection> = det.predict(&store, &x, &nms)?.into_iter().next().unwrap_or_default();
    let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let records: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord::new(&id, d)).collect();
    write_json(out, &records)?;
    if let Some(path) = annotate {
        overlay(&pixels, slice.w, slice.h, &dets).save(path)?;
    }
    let mut text = String::new();
    for d in &dets {
        let b = d.bbox;
        text.push_str(&format!(
            "class {} score {:.3} box [{:.1}, {:.1}, {:.1}, {:.1}]\n",
            d.class_id, d.score, b[0], b[1], b[2], b[3]
        ));
    }
    text.push_str(&format!("{} detections -> {}\n", dets.len(), out.display()));
    Ok(Outcome::ok(
        json!({ "command": "detect", "image": image, "detections": records, "annotated": annotate }),
        text,
    ))
}

fn overlay(pixels: &[u8], w: usize, h: usize, dets: &[Detection]) -> RgbImage {
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = pixels[y as usize * w + x as usize];
        Rgb([v, v, v])
    });
    let red = Rgb([255, 32, 32]);
    for d in dets {
        let clampi = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi - 1) as u32;
        let (x0, y0) = (clampi(d.bbox[0], w), clampi(d.bbox[1], h));
        let (x1, y1) = (clampi(d.bbox[2], w), clampi(d.bbox[3], h));
        for x in x0..=x1 {
            img.put_pixel(x, y0, red);
            img.put_pixel(x, y1, red);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, red);
            img.put_pixel(x1, y, red);
        }
    }
    img
}

fn fuse(ckpt: &Path, out: &Path, probes: usize, probe_size: usize) -> Result<Outcome, Error> {
    let original = Checkpoint::load(ckpt)?;
    if original.fused {
        return Err(Error::AlreadyFused);
    }
    let fused = fuse_checkpoint(&original)?;
    fused.save(out)?;
    let report = checkpoint_fusion(&original, &fused, probes, probe_size, 0)?;
    let (det, store) = original.detector()?;
    let before = det.cost_report(&store, probe_size)?;
    let (det, store) = fused.detector()?;
    let after = det.cost_report(&store, probe_size)?;
    let mut text = format!(
        "fused checkpoint -> {}\nparams {} -> {}\nmax |diff| over {} probes: {:.3e}\n",
        out.display(),
        report.params_before,
        report.params_after,
        report.probes,
        report.max_abs_diff
    );
    for (b, a) in before.iter().zip(&after) {
        text += &format!("{:<9} mult-adds {} -> {}\n", b.block, b.mults_adds, a.mults_adds);
    }
    Ok(Outcome::ok(
        json!({ "command": "fuse", "out": out, "report": report, "cost": { "before": before, "after": after } }),
        text,
    ))
}

fn gradcheck(module: &str, seeds: u64) -> Result<Outcome, Error> {
    if seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be at least 1".into()));
    }
    let blocks: Vec<&str> = if module == "all" { GRAD_BLOCKS.to_vec() } else { vec![module] };
    let mut reports: Vec<BlockGradReport> = Vec::new();
    for b in &blocks {
        let mut worst: Option<BlockGradReport> = None;
        for seed in 0..seeds {
            let r = check_block(b, seed)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        reports.extend(worst);
    }
    let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut text = format!("{:<16}{:>14}  {}\n", "block", "max rel err", "worst tensor (seed)");
    for r in &reports {
        text.push_str(&format!(
            "{:<16}{:>14.3e}  {} ({})\n",
            r.block, r.max_rel_error, r.worst_tensor, r.seed
        ));
    }
    let passed = max < GRAD_TOL;
    text.push_str(&format!("{}\n", if passed { "all below tolerance" } else { "tolerance exceeded" }));
    Ok(Outcome {
        json: json!({
            "command": "gradcheck",
            "tolerance": GRAD_TOL,
            "seeds": seeds,
            "blocks": reports,
            "max_rel_error": max,
            "passed": passed,
        }),
        text,
        code: if max >= GRAD_FAIL { EXIT_NUMERIC } else { 0 },
    })
}
