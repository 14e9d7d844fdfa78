//! Dataset ingestion and generation: registered SWIR/LWIR pairs with
//! YOLO-style labels, gamma correction, synthetic maritime scenes, and
//! deterministic train/test splits.
//!
//! On-disk layout: `<root>/swir/<id>.png`, `<root>/lwir/<id>.png`,
//! `<root>/labels/<id>.txt` (optional, one `class cx cy w h` line per box),
//! plus an optional `manifest.txt` listing one id per line.

use std::fs;
use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized box annotation: center/size as fractions of the image dims.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxAnnotation {
    /// Clamp the box into the unit square, preserving a positive size.
    pub fn clamped(&self) -> Result<Self> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Parameter(format!(
                "box has non-positive size {}x{}",
                self.w, self.h
            )));
        }
        let (x0r, x1r) = (self.cx - self.w / 2.0, self.cx + self.w / 2.0);
        let (y0r, y1r) = (self.cy - self.h / 2.0, self.cy + self.h / 2.0);
        if x0r >= 0.0 && x1r <= 1.0 && y0r >= 0.0 && y1r <= 1.0 {
            return Ok(*self);
        }
        let (x0, x1) = (x0r.max(0.0), x1r.min(1.0));
        let (y0, y1) = (y0r.max(0.0), y1r.min(1.0));
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Parameter("box lies entirely outside the image".into()));
        }
        Ok(Self {
            class_id: self.class_id,
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Pixel rectangle `(x0, y0, w, h)` on an image of the given dims.
    pub fn pixel_rect(&self, img_w: usize, img_h: usize) -> (usize, usize, usize, usize) {
        let x0 = ((self.cx - self.w / 2.0) * img_w as f64).round().max(0.0) as usize;
        let y0 = ((self.cy - self.h / 2.0) * img_h as f64).round().max(0.0) as usize;
        let x1 = (((self.cx + self.w / 2.0) * img_w as f64).round() as usize).min(img_w);
        let y1 = (((self.cy + self.h / 2.0) * img_h as f64).round() as usize).min(img_h);
        (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
    }
}

/// A registered SWIR/LWIR pair with ship box annotations.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub swir: GrayImage,
    pub lwir: GrayImage,
    pub boxes: Vec<BoxAnnotation>,
}

impl ImagePair {
    pub fn width(&self) -> usize {
        self.swir.width() as usize
    }
    pub fn height(&self) -> usize {
        self.swir.height() as usize
    }

    /// Image plane as `[H,W]` f64 in `[0,1]`.
    pub fn swir_norm(&self) -> Tensor<f64> {
        gray_to_norm(&self.swir)
    }
    pub fn lwir_norm(&self) -> Tensor<f64> {
        gray_to_norm(&self.lwir)
    }
}

pub fn gray_to_norm(img: &GrayImage) -> Tensor<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(&[h, w], data)
}

pub fn norm_to_gray(t: &Tensor<f64>) -> GrayImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let data = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, data).expect("buffer size")
}

/// Disjoint id lists covering a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

/// Parse one `class cx cy w h` label line.
fn parse_label_line(line: &str, path: &Path, line_no: usize) -> Result<BoxAnnotation> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::LabelParse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("expected 5 whitespace-separated fields, got {}", fields.len()),
        });
    }
    let parse_f = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::LabelParse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid {what}: '{s}'"),
        })
    };
    let class_id = fields[0].parse::<u32>().map_err(|_| Error::LabelParse {
        path: path.to_path_buf(),
        line: line_no,
        msg: format!("invalid class id: '{}'", fields[0]),
    })?;
    let ann = BoxAnnotation {
        class_id,
        cx: parse_f(fields[1], "cx")?,
        cy: parse_f(fields[2], "cy")?,
        w: parse_f(fields[3], "w")?,
        h: parse_f(fields[4], "h")?,
    };
    ann.clamped().map_err(|e| Error::LabelParse {
        path: path.to_path_buf(),
        line: line_no,
        msg: e.to_string(),
    })
}

/// Load the pair `<root>/{swir,lwir}/<id>.png` and its optional label file.
pub fn load_pair(root: &Path, id: &str) -> Result<ImagePair> {
    let swir = load_gray(&root.join("swir").join(format!("{id}.png")))?;
    let lwir = load_gray(&root.join("lwir").join(format!("{id}.png")))?;
    if swir.dimensions() != lwir.dimensions() {
        return Err(Error::Registration {
            id: id.to_string(),
            sw_w: swir.width(),
            sw_h: swir.height(),
            lw_w: lwir.width(),
            lw_h: lwir.height(),
        });
    }
    if swir.width() == 0 || swir.height() == 0 {
        return Err(Error::Parameter(format!("pair '{id}' has an empty image")));
    }
    let label_path = root.join("labels").join(format!("{id}.txt"));
    let mut boxes = Vec::new();
    if label_path.exists() {
        let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            boxes.push(parse_label_line(line, &label_path, i + 1)?);
        }
    }
    Ok(ImagePair {
        id: id.to_string(),
        swir,
        lwir,
        boxes,
    })
}

/// Write a pair (and its labels) under the standard layout.
pub fn write_pair(root: &Path, pair: &ImagePair) -> Result<()> {
    for sub in ["swir", "lwir", "labels"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    let sw_path = root.join("swir").join(format!("{}.png", pair.id));
    pair.swir.save(&sw_path).map_err(|source| Error::Image {
        path: sw_path.clone(),
        source,
    })?;
    let lw_path = root.join("lwir").join(format!("{}.png", pair.id));
    pair.lwir.save(&lw_path).map_err(|source| Error::Image {
        path: lw_path.clone(),
        source,
    })?;
    let label_path = root.join("labels").join(format!("{}.txt", pair.id));
    let mut text = String::new();
    for b in &pair.boxes {
        text.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.cx, b.cy, b.w, b.h
        ));
    }
    fs::write(&label_path, text).map_err(|e| Error::io(&label_path, e))?;
    Ok(())
}

/// Read `manifest.txt` if present, else scan `swir/*.png`, sorted by id.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let manifest = root.join("manifest.txt");
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        return Ok(text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect());
    }
    let dir = root.join("swir");
    let mut ids = Vec::new();
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn write_manifest(root: &Path, ids: &[String]) -> Result<()> {
    let path = root.join("manifest.txt");
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Gamma correction
// ---------------------------------------------------------------------------

/// Power-law intensity remap on the 0..255 scale: `255 * (I/255)^gamma`.
/// Input and output are `[H,W]` tensors of intensities in `[0,255]`.
pub fn gamma_correct(img: &Tensor<f64>, gamma: f64) -> Result<Tensor<f64>> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if img.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
        return Err(Error::Parameter("intensities must lie in [0,255]".into()));
    }
    Ok(img.map(|v| 255.0 * (v / 255.0).powf(gamma)))
}

/// Same remap for images already normalized to `[0,1]` (the 255 factors
/// cancel, leaving `I^gamma`).
pub fn gamma_correct_norm(img: &Tensor<f64>, gamma: f64) -> Result<Tensor<f64>> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(img.map(|v| v.powf(gamma)))
}

// ---------------------------------------------------------------------------
// Synthetic maritime scenes
// ---------------------------------------------------------------------------

/// Generator constants; the loss/metric acceptance thresholds lean on the
/// ship/background contrast staying comfortably discriminative.
pub mod synth_params {
    /// Sea background level, normalized.
    pub const BG_LEVEL: f64 = 0.1;
    /// Minimum ship fill level, normalized.
    pub const SHIP_LEVEL: f64 = 0.75;
    /// SWIR speckle standard deviation before the correlating low-pass
    /// filter (clamped at 3 sigma; the filter only shrinks amplitudes).
    pub const SPECKLE_SIGMA: f64 = 0.12;
    /// LWIR background noise standard deviation.
    pub const LWIR_NOISE_SIGMA: f64 = 0.015;
    /// Guaranteed margin of mean ship-interior intensity over background.
    pub const CONTRAST_MARGIN: f64 = 0.4;
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn box_blur3(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += img.data()[yy as usize * w + xx as usize];
                        cnt += 1.0;
                    }
                }
            }
            out.data_mut()[y * w + x] = acc / cnt;
        }
    }
    out
}

/// Deterministic synthetic scene: dark speckled sea with `n_ships` bright
/// blobs. SWIR ships are sharp-edged and textured; LWIR ships are smooth
/// and uniformly bright. Returns ground-truth boxes matching blob extents.
pub fn synth_scene(seed: u64, n_ships: usize, height: usize, width: usize) -> Result<ImagePair> {
    if height < 64 || width < 64 {
        return Err(Error::Parameter(format!(
            "synthetic scenes need at least 64x64, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut swir = Tensor::full(&[height, width], synth_params::BG_LEVEL);
    let mut lwir = Tensor::full(&[height, width], synth_params::BG_LEVEL);

    // place non-overlapping ship rectangles by rejection
    let mut rects: Vec<(usize, usize, usize, usize, bool)> = Vec::new();
    let max_side = (height.min(width) / 3).max(12);
    let mut attempts = 0;
    while rects.len() < n_ships && attempts < 1000 {
        attempts += 1;
        let bw = rng.gen_range(10..=max_side);
        let bh = rng.gen_range(8..=max_side.max(9));
        if bw + 4 >= width || bh + 4 >= height {
            continue;
        }
        let x0 = rng.gen_range(2..width - bw - 2);
        let y0 = rng.gen_range(2..height - bh - 2);
        let elliptical = rng.gen_bool(0.5);
        let overlaps = rects.iter().any(|&(rx, ry, rw, rh, _)| {
            x0 < rx + rw + 3 && rx < x0 + bw + 3 && y0 < ry + rh + 3 && ry < y0 + bh + 3
        });
        if !overlaps {
            rects.push((x0, y0, bw, bh, elliptical));
        }
    }
    if rects.len() < n_ships {
        return Err(Error::Parameter(format!(
            "could not place {n_ships} non-overlapping ships on {height}x{width}"
        )));
    }

    let mut boxes = Vec::with_capacity(rects.len());
    for &(x0, y0, bw, bh, elliptical) in &rects {
        let level = synth_params::SHIP_LEVEL + rng.gen_range(0.0..0.15);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let inside = if elliptical {
                    let fy = (y as f64 - (y0 as f64 + bh as f64 / 2.0 - 0.5)) / (bh as f64 / 2.0);
                    let fx = (x as f64 - (x0 as f64 + bw as f64 / 2.0 - 0.5)) / (bw as f64 / 2.0);
                    fx * fx + fy * fy <= 1.0
                } else {
                    true
                };
                if inside {
                    swir.data_mut()[y * width + x] = level.clamp(0.0, 1.0);
                    lwir.data_mut()[y * width + x] = level.clamp(0.0, 1.0);
                }
            }
        }
        boxes.push(BoxAnnotation {
            class_id: 0,
            cx: (x0 as f64 + bw as f64 / 2.0) / width as f64,
            cy: (y0 as f64 + bh as f64 / 2.0) / height as f64,
            w: bw as f64 / width as f64,
            h: bh as f64 / height as f64,
        });
    }

    // LWIR: thermal diffusion -> smooth edges, uniform interiors
    lwir = box_blur3(&box_blur3(&lwir));

    // Speckle: spatially correlated, like real sea-surface glint. The raw
    // field is clamped at 3 sigma, then low-pass filtered; the blur only
    // shrinks amplitudes, so the 3-sigma bound survives.
    let clamp3 = 3.0 * synth_params::SPECKLE_SIGMA;
    let mut field = Tensor::zeros(&[height, width]);
    for v in field.data_mut().iter_mut() {
        *v = (gaussian(&mut rng) * synth_params::SPECKLE_SIGMA).clamp(-clamp3, clamp3);
    }
    let field = box_blur3(&field);
    for (v, n) in swir.data_mut().iter_mut().zip(field.data()) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
    for v in lwir.data_mut().iter_mut() {
        let n = gaussian(&mut rng) * synth_params::LWIR_NOISE_SIGMA;
        *v = (*v + n).clamp(0.0, 1.0);
    }

    Ok(ImagePair {
        id: format!("synth_{seed:08}"),
        swir: norm_to_gray(&swir),
        lwir: norm_to_gray(&lwir),
        boxes,
    })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Deterministic shuffled split; `|train| = round(ratio * N)`.
pub fn make_split(manifest: &[String], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if manifest.is_empty() {
        return Err(Error::Parameter("cannot split an empty manifest".into()));
    }
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Parameter(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let mut ids = manifest.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let (train, test) = ids.split_at(n_train.min(ids.len()));
    Ok(DatasetSplit {
        train_ids: train.to_vec(),
        test_ids: test.to_vec(),
    })
}
