//! Command-line surface: dataset synthesis, training, fusion/detection
//! inference, metric evaluation, and comparison panels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    gray_to_norm, list_ids, load_pair, norm_to_gray, synth_scene, write_manifest, write_pair,
};
use crate::detect::{evaluate, format_detections, iou_thresholds_50_95, parse_detections, Detection};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, MetricReport};
use crate::model::infer;
use crate::tensor::Tensor;
use crate::train::{load_model, resolve_flags, train, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "fusedet",
    version,
    about = "Joint SWIR/LWIR image fusion and ship detection"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic maritime SWIR/LWIR dataset with labels.
    Synth {
        /// Number of pairs to generate
        #[arg(long)]
        n: usize,
        /// Master seed; pair i uses seed + i
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Square image size
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Maximum ships per scene (count drawn in 1..=max)
        #[arg(long, default_value_t = 3)]
        max_ships: usize,
    },
    /// Train the joint fusion/detection network.
    Train {
        /// Dataset directory (swir/, lwir/, labels/)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, repeatable: --set key=value (flags win)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Write fused images for every pair in a dataset.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detection text files for every pair in a dataset.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Confidence threshold override
        #[arg(long)]
        conf: Option<f64>,
        /// NMS IoU threshold override
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Print fusion-quality metrics of fused images against their sources.
    EvalFusion {
        /// Directory of fused PNGs named <id>.png
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print detection precision/recall/mAP against dataset labels.
    EvalDetect {
        /// Directory of detection text files
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write side-by-side SWIR | LWIR | fused(+boxes) comparison strips.
    Panel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        /// Optional detections to draw on the fused column
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            seed,
            out,
            size,
            max_ships,
        } => cmd_synth(n, seed, &out, size, max_ships),
        Command::Train {
            data,
            out,
            config,
            sets,
        } => cmd_train(&data, &out, config.as_deref(), &sets),
        Command::Fuse { ckpt, data, out } => cmd_fuse(&ckpt, &data, &out),
        Command::Detect {
            ckpt,
            data,
            out,
            conf,
            iou,
        } => cmd_detect(&ckpt, &data, &out, conf, iou),
        Command::EvalFusion { fused, data } => cmd_eval_fusion(&fused, &data),
        Command::EvalDetect { dets, data } => cmd_eval_detect(&dets, &data),
        Command::Panel {
            data,
            fused,
            dets,
            out,
        } => cmd_panel(&data, &fused, dets.as_deref(), &out),
    }
}

fn cmd_synth(n: usize, seed: u64, out: &Path, size: usize, max_ships: usize) -> Result<()> {
    if max_ships == 0 {
        return Err(Error::Parameter("max_ships must be at least 1".into()));
    }
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let ships = count_rng.gen_range(1..=max_ships);
        let mut pair = synth_scene(seed.wrapping_add(i as u64), ships, size, size)?;
        pair.id = format!("{i:04}");
        write_pair(out, &pair)?;
        ids.push(pair.id);
    }
    write_manifest(out, &ids)?;
    println!("wrote {n} pairs of {size}x{size} to {}", out.display());
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, config: Option<&Path>, sets: &[String]) -> Result<()> {
    let mut cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for (i, s) in sets.iter().enumerate() {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::ConfigParse {
            line: i + 1,
            msg: format!("--set expects key=value, got '{s}'"),
        })?;
        cfg.apply_kv(k.trim(), v.trim(), i + 1)?;
    }
    let ids = list_ids(data)?;
    if ids.is_empty() {
        return Err(Error::Parameter(format!("no pairs found under {}", data.display())));
    }
    let pairs = ids
        .iter()
        .map(|id| load_pair(data, id))
        .collect::<Result<Vec<_>>>()?;
    let outcome: TrainOutcome<f32> = train(&pairs, &cfg, Some(out))?;
    if let Some(last) = outcome.steps.last() {
        println!(
            "trained {} steps on {} pairs; final total={} l_f={} l_det={}",
            cfg.total_iters,
            pairs.len(),
            last.breakdown.total,
            last.breakdown.l_f,
            last.breakdown.l_det
        );
    } else {
        println!("no steps run (total_iters = 0)");
    }
    if let Some(p) = outcome.final_checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn cmd_fuse(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, ps, cfg, _) = load_model::<f32>(ckpt)?;
    let (flags, warning) = resolve_flags(None, &cfg);
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids = list_ids(data)?;
    for id in &ids {
        let pair = load_pair(data, id)?;
        let result = infer(&model, &ps, &pair, &flags, cfg.conf_thresh, cfg.iou_thresh)?;
        let img = norm_to_gray(&result.fused);
        let path = out.join(format!("{id}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    println!("fused {} pairs into {}", ids.len(), out.display());
    Ok(())
}

fn cmd_detect(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    conf: Option<f64>,
    iou: Option<f64>,
) -> Result<()> {
    let (model, ps, cfg, _) = load_model::<f32>(ckpt)?;
    let (flags, warning) = resolve_flags(None, &cfg);
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    let conf = conf.unwrap_or(cfg.conf_thresh);
    let iou = iou.unwrap_or(cfg.iou_thresh);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids = list_ids(data)?;
    let mut total = 0usize;
    for id in &ids {
        let pair = load_pair(data, id)?;
        let result = infer(&model, &ps, &pair, &flags, conf, iou)?;
        total += result.detections.len();
        let path = out.join(format!("{id}.txt"));
        fs::write(&path, format_detections(id, &result.detections))
            .map_err(|e| Error::io(&path, e))?;
    }
    println!("wrote {total} detections over {} pairs to {}", ids.len(), out.display());
    Ok(())
}

fn load_gray_255(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::new(
        &[h, w],
        img.as_raw().iter().map(|&v| v as f64).collect(),
    ))
}

fn cmd_eval_fusion(fused: &Path, data: &Path) -> Result<()> {
    let ids = list_ids(data)?;
    let mut entries = Vec::new();
    for id in &ids {
        let pair = load_pair(data, id)?;
        let f = load_gray_255(&fused.join(format!("{id}.png")))?;
        let a = gray_to_norm(&pair.swir).scale(255.0);
        let b = gray_to_norm(&pair.lwir).scale(255.0);
        entries.push((id.clone(), evaluate_image(&f, &a, &b)?));
    }
    let report = MetricReport::from_entries(entries);
    print!("{}", report.format());
    Ok(())
}

fn cmd_eval_detect(dets: &Path, data: &Path) -> Result<()> {
    let ids = list_ids(data)?;
    let mut by_id: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let entries = fs::read_dir(dets).map_err(|e| Error::io(dets, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dets, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "txt").unwrap_or(false) {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (id, d) in parse_detections(&text)? {
                by_id.entry(id).or_default().push(d);
            }
        }
    }
    let mut dets_per_image = Vec::with_capacity(ids.len());
    let mut gts_per_image = Vec::with_capacity(ids.len());
    for id in &ids {
        let pair = load_pair(data, id)?;
        dets_per_image.push(by_id.get(id).cloned().unwrap_or_default());
        gts_per_image.push(pair.boxes);
    }
    let report = evaluate(&dets_per_image, &gts_per_image, &iou_thresholds_50_95())?;
    println!(
        "P={:.4} R={:.4} mAP50={:.4} mAP50:95={:.4}",
        report.precision, report.recall, report.map50, report.map5095
    );
    Ok(())
}

/// Draw a 1-px white rectangle in place.
fn draw_box(img: &mut GrayImage, d: &Detection) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((d.cx - d.w / 2.0) * w as f64).round() as i64;
    let x1 = ((d.cx + d.w / 2.0) * w as f64).round() as i64;
    let y0 = ((d.cy - d.h / 2.0) * h as f64).round() as i64;
    let y1 = ((d.cy + d.h / 2.0) * h as f64).round() as i64;
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, image::Luma([255u8]));
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn cmd_panel(data: &Path, fused: &Path, dets: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids = list_ids(data)?;
    let mut by_id: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    if let Some(dir) = dets {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.extension().map(|e| e == "txt").unwrap_or(false) {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for (id, d) in parse_detections(&text)? {
                    by_id.entry(id).or_default().push(d);
                }
            }
        }
    }
    const SEP: u32 = 2;
    for id in &ids {
        let pair = load_pair(data, id)?;
        let fused_path = fused.join(format!("{id}.png"));
        let fimg = image::open(&fused_path)
            .map_err(|source| Error::Image {
                path: fused_path.clone(),
                source,
            })?
            .into_luma8();
        let mut fimg = fimg;
        if let Some(ds) = by_id.get(id) {
            for d in ds {
                draw_box(&mut fimg, d);
            }
        }
        let (w, h) = (pair.swir.width(), pair.swir.height());
        let total_w = 3 * w + 2 * SEP;
        let mut panel = GrayImage::from_pixel(total_w, h, image::Luma([128u8]));
        let mut blit = |src: &GrayImage, x_off: u32| {
            for y in 0..h.min(src.height()) {
                for x in 0..w.min(src.width()) {
                    panel.put_pixel(x + x_off, y, *src.get_pixel(x, y));
                }
            }
        };
        blit(&pair.swir, 0);
        blit(&pair.lwir, w + SEP);
        blit(&fimg, 2 * (w + SEP));
        let path = out.join(format!("{id}.png"));
        panel.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    println!("wrote {} panels to {}", ids.len(), out.display());
    Ok(())
}
