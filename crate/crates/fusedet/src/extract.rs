//! Shared feature extraction feeding both the fusion and detection branches:
//! a stride-1 base extractor per modality, a fusion-branch refiner, the
//! fused-feature augmentation of the detection inputs, and a small strided
//! backbone with per-scale cross-modality aggregation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Act, ConvBlock, FeatureMap, LayerSpec};
use crate::params::ParamSet;
use crate::tensor::Scalar;

/// Channel width of the shared shallow features.
pub const BASE_CHANNELS: usize = 8;
/// Backbone stage widths at strides 4/8/16.
pub const PYRAMID_CHANNELS: [usize; 3] = [16, 32, 64];

/// Three 3x3 stride-1 convolutions producing 8-channel shallow features.
/// SWIR and LWIR share the architecture but carry separate weights.
pub struct BaseExtractor {
    block: ConvBlock,
}

impl BaseExtractor {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let c = BASE_CHANNELS;
        let block = ConvBlock::new(
            ps,
            rng,
            name,
            1,
            &[
                LayerSpec::new(c, 3, 1, Act::Silu),
                LayerSpec::new(c, 3, 1, Act::Silu),
                LayerSpec::new(c, 3, 1, Act::Silu),
            ],
        );
        Self { block }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: NodeId) -> NodeId {
        self.block.forward(g, ps, x)
    }

    pub fn eval<F: Scalar>(&self, ps: &ParamSet<F>, img: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        self.block.eval(ps, img)
    }
}

/// Fusion-branch refiner: expands 8 channels to 32 and back to 8.
pub struct FusionExtractor {
    block: ConvBlock,
}

impl FusionExtractor {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let block = ConvBlock::new(
            ps,
            rng,
            name,
            BASE_CHANNELS,
            &[
                LayerSpec::new(32, 3, 1, Act::Silu),
                LayerSpec::new(BASE_CHANNELS, 3, 1, Act::Silu),
            ],
        );
        Self { block }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: NodeId) -> NodeId {
        self.block.forward(g, ps, x)
    }

    pub fn eval<F: Scalar>(&self, ps: &ParamSet<F>, f: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        if f.channels() != BASE_CHANNELS {
            return Err(Error::Shape(format!(
                "fusion extractor expects {BASE_CHANNELS} channels, got {}",
                f.channels()
            )));
        }
        self.block.eval(ps, f)
    }
}

/// Residual concat-project augmentation: `aug = x + proj(concat(x, f_f))`.
/// With zero projection weights the op is an exact identity on `x`.
pub struct FeatureAugment {
    proj_sw: ConvBlock,
    proj_lw: ConvBlock,
}

impl FeatureAugment {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let c = BASE_CHANNELS;
        let spec = [LayerSpec::new(c, 3, 1, Act::None)];
        Self {
            proj_sw: ConvBlock::new(ps, rng, &format!("{name}.sw"), 2 * c, &spec),
            proj_lw: ConvBlock::new(ps, rng, &format!("{name}.lw"), 2 * c, &spec),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        f_sw: NodeId,
        f_lw: NodeId,
        f_f: NodeId,
    ) -> (NodeId, NodeId) {
        let cat_sw = g.concat_channels(f_sw, f_f);
        let delta_sw = self.proj_sw.forward(g, ps, cat_sw);
        let aug_sw = g.add(f_sw, delta_sw);
        let cat_lw = g.concat_channels(f_lw, f_f);
        let delta_lw = self.proj_lw.forward(g, ps, cat_lw);
        let aug_lw = g.add(f_lw, delta_lw);
        (aug_sw, aug_lw)
    }

    pub fn eval<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        f_sw: &FeatureMap<F>,
        f_lw: &FeatureMap<F>,
        f_f: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, FeatureMap<F>)> {
        if f_sw.data.shape() != f_lw.data.shape()
            || f_sw.data.shape()[1..] != f_f.data.shape()[1..]
            || f_f.channels() != BASE_CHANNELS
        {
            return Err(Error::Shape(format!(
                "feature augment shapes differ: {:?} / {:?} / {:?}",
                f_sw.data.shape(),
                f_lw.data.shape(),
                f_f.data.shape()
            )));
        }
        let mut g = Graph::new();
        let sw = g.constant(f_sw.data.clone());
        let lw = g.constant(f_lw.data.clone());
        let ff = g.constant(f_f.data.clone());
        let (a, b) = self.forward(&mut g, ps, sw, lw, ff);
        Ok((
            FeatureMap::new("F_SW_aug", g.value(a).clone())?,
            FeatureMap::new("F_LW_aug", g.value(b).clone())?,
        ))
    }
}

/// Per-modality strided conv tower plus per-scale concat-mix aggregation.
///
/// Stem (stride 2) then three stages (each stride 2) produce per-modality
/// features at strides 4/8/16 with widths 16/32/64. At each scale the SWIR
/// and LWIR features are concatenated and mixed by a 3x3 convolution. The
/// stride-4 mixed feature is projected to 8 channels and bilinearly
/// upsampled back to input resolution as the detection attention feature.
pub struct DetectBackbone {
    tower_sw: ConvBlock,
    tower_lw: ConvBlock,
    stage_sw: [ConvBlock; 2],
    stage_lw: [ConvBlock; 2],
    mix: [ConvBlock; 3],
    attn_proj: ConvBlock,
}

pub struct BackboneOut {
    /// Mixed multimodal features at strides 4/8/16.
    pub pyramid: [NodeId; 3],
    /// Aggregated detection feature at input resolution, 8 channels.
    pub f_det_attn: NodeId,
}

impl DetectBackbone {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let c = BASE_CHANNELS;
        let [w4, w8, w16] = PYRAMID_CHANNELS;
        // stem + first stage reach stride 4
        let head_spec = [
            LayerSpec::new(w4, 3, 2, Act::Silu),
            LayerSpec::new(w4, 3, 2, Act::Silu),
        ];
        let tower_sw = ConvBlock::new(ps, rng, &format!("{name}.sw.head"), c, &head_spec);
        let tower_lw = ConvBlock::new(ps, rng, &format!("{name}.lw.head"), c, &head_spec);
        let stage = |ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, n: &str, ci: usize, co: usize| {
            ConvBlock::new(ps, rng, n, ci, &[LayerSpec::new(co, 3, 2, Act::Silu)])
        };
        let stage_sw = [
            stage(ps, rng, &format!("{name}.sw.s8"), w4, w8),
            stage(ps, rng, &format!("{name}.sw.s16"), w8, w16),
        ];
        let stage_lw = [
            stage(ps, rng, &format!("{name}.lw.s8"), w4, w8),
            stage(ps, rng, &format!("{name}.lw.s16"), w8, w16),
        ];
        let mix = [
            ConvBlock::new(ps, rng, &format!("{name}.mix4"), 2 * w4, &[LayerSpec::new(w4, 3, 1, Act::Silu)]),
            ConvBlock::new(ps, rng, &format!("{name}.mix8"), 2 * w8, &[LayerSpec::new(w8, 3, 1, Act::Silu)]),
            ConvBlock::new(ps, rng, &format!("{name}.mix16"), 2 * w16, &[LayerSpec::new(w16, 3, 1, Act::Silu)]),
        ];
        let attn_proj = ConvBlock::new(
            ps,
            rng,
            &format!("{name}.attn"),
            w4,
            &[LayerSpec::new(c, 1, 1, Act::None)],
        );
        Self {
            tower_sw,
            tower_lw,
            stage_sw,
            stage_lw,
            mix,
            attn_proj,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        aug_sw: NodeId,
        aug_lw: NodeId,
    ) -> Result<BackboneOut> {
        let shape = g.value(aug_sw).shape().to_vec();
        if shape[1] < 16 || shape[2] < 16 {
            return Err(Error::Shape(format!(
                "backbone needs at least 16x16 input, got {}x{}",
                shape[1], shape[2]
            )));
        }
        let sw4 = self.tower_sw.forward(g, ps, aug_sw);
        let lw4 = self.tower_lw.forward(g, ps, aug_lw);
        let sw8 = self.stage_sw[0].forward(g, ps, sw4);
        let lw8 = self.stage_lw[0].forward(g, ps, lw4);
        let sw16 = self.stage_sw[1].forward(g, ps, sw8);
        let lw16 = self.stage_lw[1].forward(g, ps, lw8);

        let cat4 = g.concat_channels(sw4, lw4);
        let m4 = self.mix[0].forward(g, ps, cat4);
        let cat8 = g.concat_channels(sw8, lw8);
        let m8 = self.mix[1].forward(g, ps, cat8);
        let cat16 = g.concat_channels(sw16, lw16);
        let m16 = self.mix[2].forward(g, ps, cat16);

        let proj = self.attn_proj.forward(g, ps, m4);
        let up2 = g.upsample_bilinear2(proj);
        let f_det_attn = g.upsample_bilinear2(up2);

        Ok(BackboneOut {
            pyramid: [m4, m8, m16],
            f_det_attn,
        })
    }
}

/// Deterministic extractor rng.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
