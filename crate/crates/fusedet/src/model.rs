//! Full network assembly: shared extractors, cross-modality fusion with the
//! detection residual, and the detection head, plus the ablation switchboard
//! and a padded inference path for arbitrary image sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::detect::{decode_and_nms, DetectHead, Detection};
use crate::error::{Error, Result};
use crate::extract::{BaseExtractor, DetectBackbone, FeatureAugment, FusionExtractor, BASE_CHANNELS};
use crate::fusion::{FusionToggles, MultiScaleFusion};
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Ablation switches. All on reproduces the full model; each switch removes
/// one coupling: the box-aware loss targets, the attention aggregation, the
/// low-scale fusion branch, the detection residual into fusion, or the fused
/// feature feeding the detection branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub oe_loss: bool,
    pub multimodal: bool,
    pub multiscale: bool,
    pub multitask: bool,
    pub fused_feature: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            oe_loss: true,
            multimodal: true,
            multiscale: true,
            multitask: true,
            fused_feature: true,
        }
    }
}

/// Architecture knobs that must match between construction and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub attn_dim: usize,
    pub cross_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            attn_dim: 64,
            cross_residual: false,
        }
    }
}

pub struct FusionDetModel {
    pub base_sw: BaseExtractor,
    pub base_lw: BaseExtractor,
    pub fus_sw: FusionExtractor,
    pub fus_lw: FusionExtractor,
    pub augment: FeatureAugment,
    pub backbone: DetectBackbone,
    pub fuser: MultiScaleFusion,
    pub head: DetectHead,
    pub cfg: ModelConfig,
}

/// Node handles of one full forward pass.
pub struct ModelOut {
    pub f_f: NodeId,
    pub f_f_det: NodeId,
    pub i_f: NodeId,
    pub pyramid: [NodeId; 3],
    pub raws: [NodeId; 3],
}

impl FusionDetModel {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, seed: u64, cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            base_sw: BaseExtractor::new(ps, &mut rng, "base_sw"),
            base_lw: BaseExtractor::new(ps, &mut rng, "base_lw"),
            fus_sw: FusionExtractor::new(ps, &mut rng, "fus_sw"),
            fus_lw: FusionExtractor::new(ps, &mut rng, "fus_lw"),
            augment: FeatureAugment::new(ps, &mut rng, "augment"),
            backbone: DetectBackbone::new(ps, &mut rng, "backbone"),
            fuser: MultiScaleFusion::new(
                ps,
                &mut rng,
                "fuse",
                cfg.patch_size,
                cfg.attn_dim,
                cfg.cross_residual,
            ),
            head: DetectHead::new(ps, &mut rng, "head"),
            cfg,
        }
    }

    /// Smallest input-dimension multiple the network accepts without padding.
    pub fn required_multiple(&self) -> usize {
        fn lcm(a: usize, b: usize) -> usize {
            fn gcd(a: usize, b: usize) -> usize {
                if b == 0 {
                    a
                } else {
                    gcd(b, a % b)
                }
            }
            a / gcd(a, b) * b
        }
        lcm(16, 2 * self.cfg.patch_size)
    }

    /// Full forward pass over `[1,H,W]` image nodes in `[0,1]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        swir: NodeId,
        lwir: NodeId,
        flags: &AblationFlags,
    ) -> Result<ModelOut> {
        let shape = g.value(swir).shape().to_vec();
        if shape != g.value(lwir).shape() {
            return Err(Error::Shape(format!(
                "modality shapes differ: {:?} vs {:?}",
                shape,
                g.value(lwir).shape()
            )));
        }
        let mult = self.required_multiple();
        if shape[1] % mult != 0 || shape[2] % mult != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} must be a multiple of {mult}; pad first",
                shape[1], shape[2]
            )));
        }

        let f_sw = self.base_sw.forward(g, ps, swir);
        let f_lw = self.base_lw.forward(g, ps, lwir);
        let f_sw_fus = self.fus_sw.forward(g, ps, f_sw);
        let f_lw_fus = self.fus_lw.forward(g, ps, f_lw);

        let toggles = FusionToggles {
            multimodal: flags.multimodal,
            multiscale: flags.multiscale,
        };
        let f_f = self.fuser.fuse_features(g, ps, f_sw_fus, f_lw_fus, toggles)?;

        let ff_for_det = if flags.fused_feature {
            f_f
        } else {
            let z = Tensor::zeros(g.value(f_f).shape());
            g.constant(z)
        };
        let (aug_sw, aug_lw) = self.augment.forward(g, ps, f_sw, f_lw, ff_for_det);
        let bb = self.backbone.forward(g, ps, aug_sw, aug_lw)?;

        let attn = if flags.multitask {
            bb.f_det_attn
        } else {
            let z = Tensor::zeros(&[BASE_CHANNELS, shape[1], shape[2]]);
            g.constant(z)
        };
        let f_f_det = g.add(f_f, attn);
        let i_f = self.fuser.decoder.forward(g, ps, f_f_det);
        let raws = self.head.forward(g, ps, &bb.pyramid);

        Ok(ModelOut {
            f_f,
            f_f_det,
            i_f,
            pyramid: bb.pyramid,
            raws,
        })
    }
}

// ---------------------------------------------------------------------------
// Padded inference over plain images
// ---------------------------------------------------------------------------

/// Reflect-pad a `[H,W]` image on the bottom/right edges up to multiples of
/// `mult`. Padding never exceeds the image size for the supported inputs.
pub fn pad_to_multiple(img: &Tensor<f64>, mult: usize) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;
    if hp == h && wp == w {
        return img.clone();
    }
    fn mirror(i: usize, n: usize) -> usize {
        if i < n {
            i
        } else {
            (2 * n).saturating_sub(2 + i).min(n - 1)
        }
    }
    let mut out = Tensor::zeros(&[hp, wp]);
    for y in 0..hp {
        let sy = mirror(y, h);
        for x in 0..wp {
            out.data_mut()[y * wp + x] = img.data()[sy * w + mirror(x, w)];
        }
    }
    out
}

/// Result of one padded inference pass over a pair.
pub struct Inference {
    /// Fused image at the original resolution, `[H,W]` in `[0,1]`.
    pub fused: Tensor<f64>,
    /// Detections in original-image fractions, after NMS.
    pub detections: Vec<Detection>,
}

/// Run the network on one pair, padding to the accepted multiple and mapping
/// outputs back to the original geometry.
pub fn infer<F: Scalar>(
    model: &FusionDetModel,
    ps: &ParamSet<F>,
    pair: &ImagePair,
    flags: &AblationFlags,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Inference> {
    let (h, w) = (pair.height(), pair.width());
    let mult = model.required_multiple();
    let sw = pad_to_multiple(&pair.swir_norm(), mult);
    let lw = pad_to_multiple(&pair.lwir_norm(), mult);
    let (hp, wp) = (sw.shape()[0], sw.shape()[1]);

    let mut g: Graph<F> = Graph::new();
    let swn = g.constant(Tensor::from_f64_tensor(&Tensor::new(
        &[1, hp, wp],
        sw.data().to_vec(),
    )));
    let lwn = g.constant(Tensor::from_f64_tensor(&Tensor::new(
        &[1, hp, wp],
        lw.data().to_vec(),
    )));
    let out = model.forward(&mut g, ps, swn, lwn, flags)?;

    let i_f = g.value(out.i_f).to_f64_tensor();
    let mut fused = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            fused.data_mut()[y * w + x] = i_f.data()[y * wp + x];
        }
    }

    let raws: Vec<Tensor<f64>> = out.raws.iter().map(|&r| g.value(r).to_f64_tensor()).collect();
    let dets_padded = decode_and_nms(&raws, conf_thresh, iou_thresh)?;
    // map padded fractions back to original fractions; drop boxes whose
    // center fell in the padding
    let (sx, sy) = (wp as f64 / w as f64, hp as f64 / h as f64);
    let detections = dets_padded
        .into_iter()
        .filter_map(|d| {
            let cx = d.cx * sx;
            let cy = d.cy * sy;
            if cx >= 1.0 || cy >= 1.0 {
                return None;
            }
            Some(Detection {
                cx,
                cy,
                w: d.w * sx,
                h: d.h * sy,
                score: d.score,
                class_id: d.class_id,
            })
        })
        .collect();

    Ok(Inference { fused, detections })
}
