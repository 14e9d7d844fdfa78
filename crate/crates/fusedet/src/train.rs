//! Joint end-to-end training: linear warmup/decay schedule, Adam over the
//! batched total loss, deterministic batching and cropping, checkpointing,
//! and the flat key=value config format.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BoxAnnotation, ImagePair};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{det_loss_g, fusion_loss_g, fusion_targets, total_loss_g, LossBreakdown, LossConfig};
use crate::model::{AblationFlags, FusionDetModel, ModelConfig};
use crate::params::{Adam, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Full training configuration. Serialized as flat `key = value` text; see
/// [`TrainConfig::to_kv_text`] for the key list with defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub patch_size: usize,
    pub attn_dim: usize,
    pub cross_residual: bool,
    pub loss: LossConfig,
    pub ablation: AblationFlags,
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_iters: 500,
            total_iters: 2000,
            batch_size: 4,
            crop_size: 64,
            seed: 0,
            patch_size: 4,
            attn_dim: 64,
            cross_residual: false,
            loss: LossConfig::default(),
            ablation: AblationFlags::default(),
            conf_thresh: 0.25,
            iou_thresh: 0.45,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::Parameter(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.patch_size == 0 || self.attn_dim == 0 {
            return Err(Error::Parameter("patch_size and attn_dim must be positive".into()));
        }
        let mult = self.model_config_multiple();
        if self.crop_size % mult != 0 {
            return Err(Error::Parameter(format!(
                "crop_size {} must be a multiple of {mult}",
                self.crop_size
            )));
        }
        self.loss.validate()
    }

    fn model_config_multiple(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let a = 16;
        let b = 2 * self.patch_size;
        a / gcd(a, b) * b
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            patch_size: self.patch_size,
            attn_dim: self.attn_dim,
            cross_residual: self.cross_residual,
        }
    }

    /// Flat key=value serialization; keys match [`TrainConfig::apply_kv`].
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("lr", format!("{}", self.lr));
        kv("warmup_iters", format!("{}", self.warmup_iters));
        kv("total_iters", format!("{}", self.total_iters));
        kv("batch_size", format!("{}", self.batch_size));
        kv("crop_size", format!("{}", self.crop_size));
        kv("seed", format!("{}", self.seed));
        kv("patch_size", format!("{}", self.patch_size));
        kv("attn_dim", format!("{}", self.attn_dim));
        kv("cross_residual", format!("{}", self.cross_residual));
        kv("object_weight", format!("{}", self.loss.object_weight));
        kv("intensity_weight", format!("{}", self.loss.intensity_weight));
        kv(
            "object_intensity_weight",
            format!("{}", self.loss.object_intensity_weight),
        );
        kv("gamma", format!("{}", self.loss.gamma));
        kv("det_weight", format!("{}", self.loss.det_weight));
        kv("sobel_l2", format!("{}", self.loss.sobel_l2));
        kv("oe_loss", format!("{}", self.ablation.oe_loss));
        kv("multimodal", format!("{}", self.ablation.multimodal));
        kv("multiscale", format!("{}", self.ablation.multiscale));
        kv("multitask", format!("{}", self.ablation.multitask));
        kv("fused_feature", format!("{}", self.ablation.fused_feature));
        kv("conf_thresh", format!("{}", self.conf_thresh));
        kv("iou_thresh", format!("{}", self.iou_thresh));
        kv("checkpoint_interval", format!("{}", self.checkpoint_interval));
        s
    }

    /// Apply one `key = value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let perr = |what: &str| Error::ConfigParse {
            line,
            msg: format!("invalid {what} value '{value}'"),
        };
        macro_rules! num {
            ($t:ty, $what:expr) => {
                value.parse::<$t>().map_err(|_| perr($what))?
            };
        }
        match key {
            "lr" => self.lr = num!(f64, "lr"),
            "warmup_iters" => self.warmup_iters = num!(usize, "warmup_iters"),
            "total_iters" => self.total_iters = num!(usize, "total_iters"),
            "batch_size" => self.batch_size = num!(usize, "batch_size"),
            "crop_size" => self.crop_size = num!(usize, "crop_size"),
            "seed" => self.seed = num!(u64, "seed"),
            "patch_size" => self.patch_size = num!(usize, "patch_size"),
            "attn_dim" => self.attn_dim = num!(usize, "attn_dim"),
            "cross_residual" => self.cross_residual = num!(bool, "cross_residual"),
            "object_weight" => self.loss.object_weight = num!(f64, "object_weight"),
            "intensity_weight" => self.loss.intensity_weight = num!(f64, "intensity_weight"),
            "object_intensity_weight" => {
                self.loss.object_intensity_weight = num!(f64, "object_intensity_weight")
            }
            "gamma" => self.loss.gamma = num!(f64, "gamma"),
            "det_weight" => self.loss.det_weight = num!(f64, "det_weight"),
            "sobel_l2" => self.loss.sobel_l2 = num!(bool, "sobel_l2"),
            "oe_loss" => self.ablation.oe_loss = num!(bool, "oe_loss"),
            "multimodal" => self.ablation.multimodal = num!(bool, "multimodal"),
            "multiscale" => self.ablation.multiscale = num!(bool, "multiscale"),
            "multitask" => self.ablation.multitask = num!(bool, "multitask"),
            "fused_feature" => self.ablation.fused_feature = num!(bool, "fused_feature"),
            "conf_thresh" => self.conf_thresh = num!(f64, "conf_thresh"),
            "iou_thresh" => self.iou_thresh = num!(f64, "iou_thresh"),
            "checkpoint_interval" => self.checkpoint_interval = num!(usize, "checkpoint_interval"),
            other => {
                return Err(Error::ConfigParse {
                    line,
                    msg: format!("unknown key '{other}'"),
                })
            }
        }
        Ok(())
    }

    /// Parse flat key=value text over the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{raw}'"),
            })?;
            cfg.apply_kv(key.trim(), value.trim(), i + 1)?;
        }
        Ok(cfg)
    }
}

/// Learning rate at `step`: linear ramp 0 -> lr over `warmup_iters`, then
/// linear decay lr -> 0 over the remainder.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_iters {
        return Err(Error::Parameter(format!(
            "step {step} outside schedule of {} iterations",
            cfg.total_iters
        )));
    }
    if step <= cfg.warmup_iters {
        if cfg.warmup_iters == 0 {
            return Ok(cfg.lr);
        }
        return Ok(cfg.lr * step as f64 / cfg.warmup_iters as f64);
    }
    let rest = (cfg.total_iters - cfg.warmup_iters) as f64;
    Ok(cfg.lr * (1.0 - (step - cfg.warmup_iters) as f64 / rest))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One logged step.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

pub struct TrainOutcome<F: Scalar> {
    pub model: FusionDetModel,
    pub params: ParamSet<F>,
    pub config: TrainConfig,
    pub log: String,
    pub steps: Vec<StepLog>,
    pub final_checkpoint: Option<PathBuf>,
}

struct Item {
    swir: Tensor<f64>,
    lwir: Tensor<f64>,
    boxes: Vec<BoxAnnotation>,
}

fn crop_item(item: &Item, y0: usize, x0: usize, size: usize) -> Item {
    let w = item.swir.shape()[1];
    let crop = |img: &Tensor<f64>| {
        let mut out = Tensor::zeros(&[size, size]);
        for y in 0..size {
            let src = (y0 + y) * w + x0;
            out.data_mut()[y * size..(y + 1) * size].copy_from_slice(&img.data()[src..src + size]);
        }
        out
    };
    let (h_full, w_full) = (item.swir.shape()[0] as f64, w as f64);
    let boxes = item
        .boxes
        .iter()
        .filter_map(|b| {
            // to crop-local fractions, then clip
            let cx = (b.cx * w_full - x0 as f64) / size as f64;
            let cy = (b.cy * h_full - y0 as f64) / size as f64;
            let bw = b.w * w_full / size as f64;
            let bh = b.h * h_full / size as f64;
            let x0f = (cx - bw / 2.0).max(0.0);
            let x1f = (cx + bw / 2.0).min(1.0);
            let y0f = (cy - bh / 2.0).max(0.0);
            let y1f = (cy + bh / 2.0).min(1.0);
            if x1f - x0f < 0.02 || y1f - y0f < 0.02 {
                return None;
            }
            Some(BoxAnnotation {
                class_id: b.class_id,
                cx: (x0f + x1f) / 2.0,
                cy: (y0f + y1f) / 2.0,
                w: x1f - x0f,
                h: y1f - y0f,
            })
        })
        .collect();
    Item {
        swir: crop(&item.swir),
        lwir: crop(&item.lwir),
        boxes,
    }
}

fn to_chw_node<F: Scalar>(g: &mut Graph<F>, img: &Tensor<f64>) -> NodeId {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let t = Tensor::new(&[1, h, w], img.data().iter().map(|&v| F::from_f64(v)).collect());
    g.constant(t)
}

fn format_step_line(s: &StepLog) -> String {
    let b = &s.breakdown;
    format!(
        "step={} total={} l_f={} l_det={} l_global={} l_object={} l_grad_g={} l_int_g={} l_grad_o={} l_int_o={} lr={}\n",
        s.step, b.total, b.l_f, b.l_det, b.l_global, b.l_object, b.l_grad_g, b.l_int_g,
        b.l_grad_o, b.l_int_o, s.lr
    )
}

/// Run the joint optimization. With `out_dir` set, writes `train_log.txt`,
/// `config_used.txt`, periodic checkpoints and `checkpoint_final.ckpt`.
pub fn train<F: Scalar>(
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let items: Vec<Item> = pairs
        .iter()
        .map(|p| {
            if p.height() < cfg.crop_size || p.width() < cfg.crop_size {
                return Err(Error::Parameter(format!(
                    "pair '{}' is {}x{}, smaller than crop_size {}",
                    p.id,
                    p.height(),
                    p.width(),
                    cfg.crop_size
                )));
            }
            Ok(Item {
                swir: p.swir_norm(),
                lwir: p.lwir_norm(),
                boxes: p.boxes.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut ps: ParamSet<F> = ParamSet::new();
    let model = FusionDetModel::new(&mut ps, cfg.seed, cfg.model_config());
    let mut adam: Adam<F> = Adam::new(&ps);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = Vec::new();
    let mut log = String::new();
    let mut steps: Vec<StepLog> = Vec::new();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config_used.txt");
        fs::write(&cfg_path, cfg.to_kv_text()).map_err(|e| Error::io(&cfg_path, e))?;
    }

    for step in 0..cfg.total_iters {
        // deterministic epoch-shuffled batch
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..items.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = order_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
            }
            batch.push(order.pop().expect("refilled above"));
        }

        let mut g: Graph<F> = Graph::new();
        let mut total_acc: Option<NodeId> = None;
        let mut bd = LossBreakdown::default();
        for &idx in &batch {
            let item = &items[idx];
            let (h, w) = (item.swir.shape()[0], item.swir.shape()[1]);
            let (y0, x0) = if h == cfg.crop_size && w == cfg.crop_size {
                (0, 0)
            } else {
                (
                    order_rng.gen_range(0..=h - cfg.crop_size),
                    order_rng.gen_range(0..=w - cfg.crop_size),
                )
            };
            let cropped = crop_item(item, y0, x0, cfg.crop_size);
            let targets = fusion_targets(
                &cropped.swir,
                &cropped.lwir,
                &cropped.boxes,
                &cfg.loss,
                cfg.ablation.oe_loss,
            )?;
            let swn = to_chw_node(&mut g, &cropped.swir);
            let lwn = to_chw_node(&mut g, &cropped.lwir);
            let out = model.forward(&mut g, &ps, swn, lwn, &cfg.ablation)?;
            let fl = fusion_loss_g(&mut g, out.i_f, &targets, &cfg.loss)?;
            let ld = det_loss_g(&mut g, &out.raws, &cropped.boxes);
            let item_total = total_loss_g(&mut g, fl.l_f, ld, cfg.loss.det_weight);

            let n = cfg.batch_size as f64;
            bd.total += g.scalar_value(item_total).as_f64() / n;
            bd.l_f += g.scalar_value(fl.l_f).as_f64() / n;
            bd.l_det += g.scalar_value(ld).as_f64() / n;
            bd.l_global += g.scalar_value(fl.l_global).as_f64() / n;
            bd.l_object += g.scalar_value(fl.l_object).as_f64() / n;
            bd.l_grad_g += g.scalar_value(fl.l_grad_g).as_f64() / n;
            bd.l_int_g += g.scalar_value(fl.l_int_g).as_f64() / n;
            bd.l_grad_o += g.scalar_value(fl.l_grad_o).as_f64() / n;
            bd.l_int_o += g.scalar_value(fl.l_int_o).as_f64() / n;
            bd.skipped_boxes += targets.skipped_boxes;

            total_acc = Some(match total_acc {
                Some(a) => g.add(a, item_total),
                None => item_total,
            });
        }
        let sum = total_acc.expect("batch_size >= 1");
        let batch_total = g.scale(sum, F::from_f64(1.0 / cfg.batch_size as f64));

        if !bd.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: bd.total,
            });
        }

        let lr = lr_at(step, cfg)?;
        let grads = g.backward(batch_total);
        adam.step(&mut ps, &g.param_grads(&grads), F::from_f64(lr));

        let entry = StepLog {
            step,
            lr,
            breakdown: bd,
        };
        log.push_str(&format_step_line(&entry));
        steps.push(entry);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0
                && (step + 1) % cfg.checkpoint_interval == 0
                && step + 1 < cfg.total_iters
            {
                let path = dir.join(format!("checkpoint_{:06}.ckpt", step + 1));
                save_checkpoint(&path, &ps, cfg, (step + 1) as u64)?;
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let log_path = dir.join("train_log.txt");
        fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        let path = dir.join("checkpoint_final.ckpt");
        save_checkpoint(&path, &ps, cfg, cfg.total_iters as u64)?;
        final_checkpoint = Some(path);
    }

    Ok(TrainOutcome {
        model,
        params: ps,
        config: cfg.clone(),
        log,
        steps,
        final_checkpoint,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"FDETCKPT";
const CKPT_VERSION: u32 = 1;

/// Write parameters, config, and step to a binary checkpoint (bit-exact).
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    ps: &ParamSet<F>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(F::BYTES as u8);
    buf.extend_from_slice(&step.to_le_bytes());
    let cfg_text = cfg.to_kv_text();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    buf.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for (_, name, tensor) in ps.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            let bits = v.to_bits_u64();
            buf.extend_from_slice(&bits.to_le_bytes()[..F::BYTES]);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint<F: Scalar> {
    pub config: TrainConfig,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<F>)>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CheckpointCorrupt {
                path: self.path.to_path_buf(),
                msg: format!("unexpected end of file at byte {}", self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a checkpoint written by [`save_checkpoint`] with the same scalar type.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            msg: "bad magic".into(),
        });
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let dtype = c.take(1)?[0] as usize;
    if dtype != F::BYTES {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            msg: format!(
                "stored scalar width {dtype} bytes, this build expects {}",
                F::BYTES
            ),
        });
    }
    let step = c.u64()?;
    let cfg_len = c.u32()? as usize;
    let cfg_text = std::str::from_utf8(c.take(cfg_len)?)
        .map_err(|_| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            msg: "config block is not utf-8".into(),
        })?
        .to_string();
    let config = TrainConfig::from_kv_text(&cfg_text)?;
    let n_params = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::CheckpointCorrupt {
                path: path.to_path_buf(),
                msg: "parameter name is not utf-8".into(),
            })?
            .to_string();
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * F::BYTES)?;
        let mut vals = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(F::BYTES) {
            let mut bits = [0u8; 8];
            bits[..F::BYTES].copy_from_slice(chunk);
            vals.push(F::from_bits_u64(u64::from_le_bytes(bits)));
        }
        tensors.push((name, Tensor::new(&shape, vals)));
    }
    Ok(LoadedCheckpoint {
        config,
        step,
        tensors,
    })
}

/// Rebuild the model from a checkpoint's config and load its weights.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(FusionDetModel, ParamSet<F>, TrainConfig, u64)> {
    let loaded = load_checkpoint::<F>(path)?;
    let mut ps: ParamSet<F> = ParamSet::new();
    let model = FusionDetModel::new(&mut ps, loaded.config.seed, loaded.config.model_config());
    if ps.len() != loaded.tensors.len() {
        return Err(Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            msg: format!(
                "parameter count mismatch: file has {}, model has {}",
                loaded.tensors.len(),
                ps.len()
            ),
        });
    }
    for (i, (name, tensor)) in loaded.tensors.into_iter().enumerate() {
        let id = crate::params::ParamId(i);
        if ps.name(id) != name || ps.get(id).shape() != tensor.shape() {
            return Err(Error::CheckpointCorrupt {
                path: path.to_path_buf(),
                msg: format!("parameter {i} mismatch: '{name}' vs '{}'", ps.name(id)),
            });
        }
        *ps.get_mut(id) = tensor;
    }
    Ok((model, ps, loaded.config, loaded.step))
}

/// Checkpoint flags win over requested flags; returns a warning when they
/// differ.
pub fn resolve_flags(
    requested: Option<AblationFlags>,
    checkpoint: &TrainConfig,
) -> (AblationFlags, Option<String>) {
    match requested {
        Some(req) if req != checkpoint.ablation => (
            checkpoint.ablation,
            Some(format!(
                "requested ablation flags {req:?} differ from checkpoint {:?}; using checkpoint flags",
                checkpoint.ablation
            )),
        ),
        _ => (checkpoint.ablation, None),
    }
}
