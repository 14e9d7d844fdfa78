//! Cross-modality fusion: per-pair attention fusion blocks over two scales,
//! a residual coupling with the detection attention feature, and the decoder
//! that renders the fused grayscale image.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extract::BASE_CHANNELS;
use crate::graph::{Graph, NodeId};
use crate::nn::{cross_attend, self_attend, Act, Attention, ConvBlock, FeatureMap, LayerSpec};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// One attention fusion block: two input conv blocks, per-branch
/// self-attention, bidirectional cross-attention, and a four-layer decoder
/// over the folded-and-concatenated result (channel trace 16->16->8->8).
pub struct FusionBlock {
    pub conv_a: ConvBlock,
    pub conv_b: ConvBlock,
    pub self_a: Attention,
    pub self_b: Attention,
    /// Cross stage with Q from branch A, K/V from branch B.
    pub cross_a: Attention,
    pub cross_b: Attention,
    pub decoder: ConvBlock,
    pub p: usize,
    /// Residual add inside the cross-attention stage (off by default; the
    /// cross equations carry no residual term).
    pub cross_residual: bool,
}

impl FusionBlock {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        p: usize,
        d_p: usize,
        cross_residual: bool,
    ) -> Self {
        let c = BASE_CHANNELS;
        let d = p * p * c;
        let conv_spec = [LayerSpec::new(c, 3, 1, Act::Silu)];
        let decoder_spec = [
            LayerSpec::new(16, 3, 1, Act::Silu),
            LayerSpec::new(16, 3, 1, Act::Silu),
            LayerSpec::new(8, 3, 1, Act::Silu),
            LayerSpec::new(8, 3, 1, Act::None),
        ];
        Self {
            conv_a: ConvBlock::new(ps, rng, &format!("{name}.conv_a"), c, &conv_spec),
            conv_b: ConvBlock::new(ps, rng, &format!("{name}.conv_b"), c, &conv_spec),
            self_a: Attention::new(ps, rng, &format!("{name}.self_a"), d, d_p),
            self_b: Attention::new(ps, rng, &format!("{name}.self_b"), d, d_p),
            cross_a: Attention::new(ps, rng, &format!("{name}.cross_a"), d, d_p),
            cross_b: Attention::new(ps, rng, &format!("{name}.cross_b"), d, d_p),
            decoder: ConvBlock::new(ps, rng, &format!("{name}.dec"), 2 * c, &decoder_spec),
            p,
            cross_residual,
        }
    }

    /// Full attention pipeline. With `multimodal` false the attention stages
    /// are skipped and the conv outputs are concatenated and decoded directly.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        a: NodeId,
        b: NodeId,
        multimodal: bool,
    ) -> Result<NodeId> {
        let sa = g.value(a).shape().to_vec();
        let sb = g.value(b).shape().to_vec();
        if sa != sb || sa[0] != BASE_CHANNELS {
            return Err(Error::Shape(format!(
                "fusion block expects matching {BASE_CHANNELS}-channel maps, got {sa:?} vs {sb:?}"
            )));
        }
        if sa[1] % self.p != 0 || sa[2] % self.p != 0 {
            return Err(Error::Shape(format!(
                "fusion block input {}x{} not a multiple of patch size {}",
                sa[1], sa[2], self.p
            )));
        }
        let fa = self.conv_a.forward(g, ps, a);
        let fb = self.conv_b.forward(g, ps, b);

        let (ca, cb) = if multimodal {
            let (pa, grid) = g.patchify(fa, self.p);
            let (pb, _) = g.patchify(fb, self.p);
            let sa = self_attend(g, ps, &self.self_a, pa).out;
            let sb = self_attend(g, ps, &self.self_b, pb).out;
            let xa = cross_attend(g, ps, &self.cross_a, sa, sb, self.cross_residual).out;
            let xb = cross_attend(g, ps, &self.cross_b, sb, sa, self.cross_residual).out;
            (g.fold(xa, grid), g.fold(xb, grid))
        } else {
            (fa, fb)
        };
        let cat = g.concat_channels(ca, cb);
        Ok(self.decoder.forward(g, ps, cat))
    }

    /// Evaluate on plain feature maps (scratch graph).
    pub fn eval<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        a: &FeatureMap<F>,
        b: &FeatureMap<F>,
    ) -> Result<FeatureMap<F>> {
        let mut g = Graph::new();
        let an = g.constant(a.data.clone());
        let bn = g.constant(b.data.clone());
        let out = self.forward(&mut g, ps, an, bn, true)?;
        FeatureMap::new("F_f", g.value(out).clone())
    }
}

/// Decoder from the 8-channel fused feature to a grayscale image in [0,1]:
/// conv stack 8->8->4->1 with a sigmoid squash.
pub struct FusionDecoder {
    block: ConvBlock,
}

impl FusionDecoder {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let block = ConvBlock::new(
            ps,
            rng,
            name,
            BASE_CHANNELS,
            &[
                LayerSpec::new(8, 3, 1, Act::Silu),
                LayerSpec::new(4, 3, 1, Act::Silu),
                LayerSpec::new(1, 3, 1, Act::None),
            ],
        );
        Self { block }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: NodeId) -> NodeId {
        let y = self.block.forward(g, ps, x);
        g.sigmoid(y)
    }

    pub fn eval<F: Scalar>(&self, ps: &ParamSet<F>, f: &FeatureMap<F>) -> Result<Tensor<F>> {
        if f.channels() != BASE_CHANNELS {
            return Err(Error::Shape(format!(
                "fusion decoder expects {BASE_CHANNELS} channels, got {}",
                f.channels()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(f.data.clone());
        let y = self.forward(&mut g, ps, x);
        Ok(g.value(y).clone())
    }
}

/// The three-block fusion arrangement over two scales.
pub struct MultiScaleFusion {
    pub block_full: FusionBlock,
    pub block_low: FusionBlock,
    pub block_merge: FusionBlock,
    pub decoder: FusionDecoder,
}

/// Node handles of one fusion forward pass.
pub struct FusionOut {
    /// Preliminary fused feature (before the detection residual).
    pub f_f: NodeId,
    /// Fused feature after the detection-attention residual.
    pub f_f_det: NodeId,
    /// Fused grayscale image, `[1,H,W]` in [0,1].
    pub i_f: NodeId,
}

/// Ablation switches for the fusion arrangement.
#[derive(Clone, Copy, Debug)]
pub struct FusionToggles {
    /// Attention aggregation inside each block (off = concat + decode).
    pub multimodal: bool,
    /// Low-scale branch (off = single-scale path).
    pub multiscale: bool,
}

impl Default for FusionToggles {
    fn default() -> Self {
        Self {
            multimodal: true,
            multiscale: true,
        }
    }
}

impl MultiScaleFusion {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        p: usize,
        d_p: usize,
        cross_residual: bool,
    ) -> Self {
        Self {
            block_full: FusionBlock::new(ps, rng, &format!("{name}.full"), p, d_p, cross_residual),
            block_low: FusionBlock::new(ps, rng, &format!("{name}.low"), p, d_p, cross_residual),
            block_merge: FusionBlock::new(ps, rng, &format!("{name}.merge"), p, d_p, cross_residual),
            decoder: FusionDecoder::new(ps, rng, &format!("{name}.img_dec")),
        }
    }

    /// Computes the preliminary fused feature only (no detection residual).
    pub fn fuse_features<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        f_sw_fus: NodeId,
        f_lw_fus: NodeId,
        toggles: FusionToggles,
    ) -> Result<NodeId> {
        let f_f_h = self
            .block_full
            .forward(g, ps, f_sw_fus, f_lw_fus, toggles.multimodal)?;
        if !toggles.multiscale {
            return Ok(f_f_h);
        }
        let shape = g.value(f_sw_fus).shape().to_vec();
        let p2 = 2 * self.block_low.p;
        if shape[1] % p2 != 0 || shape[2] % p2 != 0 {
            return Err(Error::Shape(format!(
                "low-scale branch needs dims divisible by {p2}, got {}x{}",
                shape[1], shape[2]
            )));
        }
        let sw_lo = g.avg_pool2(f_sw_fus);
        let lw_lo = g.avg_pool2(f_lw_fus);
        let lo = self
            .block_low
            .forward(g, ps, sw_lo, lw_lo, toggles.multimodal)?;
        let f_f_l = g.upsample_bilinear2(lo);
        self.block_merge
            .forward(g, ps, f_f_h, f_f_l, toggles.multimodal)
    }

    /// Full forward: fuse, add the detection residual, decode the image.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        f_sw_fus: NodeId,
        f_lw_fus: NodeId,
        f_det_attn: NodeId,
        toggles: FusionToggles,
    ) -> Result<FusionOut> {
        if g.value(f_det_attn).shape() != g.value(f_sw_fus).shape() {
            return Err(Error::Shape(format!(
                "detection attention feature {:?} does not match fusion features {:?}",
                g.value(f_det_attn).shape(),
                g.value(f_sw_fus).shape()
            )));
        }
        let f_f = self.fuse_features(g, ps, f_sw_fus, f_lw_fus, toggles)?;
        let f_f_det = g.add(f_f, f_det_attn);
        let i_f = self.decoder.forward(g, ps, f_f_det);
        Ok(FusionOut { f_f, f_f_det, i_f })
    }

    /// Evaluate on plain feature maps (scratch graph), returning values.
    pub fn eval<F: Scalar>(
        &self,
        ps: &ParamSet<F>,
        f_sw_fus: &FeatureMap<F>,
        f_lw_fus: &FeatureMap<F>,
        f_det_attn: &FeatureMap<F>,
    ) -> Result<(FeatureMap<F>, FeatureMap<F>, Tensor<F>)> {
        let mut g = Graph::new();
        let sw = g.constant(f_sw_fus.data.clone());
        let lw = g.constant(f_lw_fus.data.clone());
        let da = g.constant(f_det_attn.data.clone());
        let out = self.forward(&mut g, ps, sw, lw, da, FusionToggles::default())?;
        Ok((
            FeatureMap::new("F_f", g.value(out.f_f).clone())?,
            FeatureMap::new("F_f_det", g.value(out.f_f_det).clone())?,
            g.value(out.i_f).clone(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::seeded_rng;
    use crate::params::ParamId;
    use rand::Rng;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = seeded_rng(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new("t", Tensor::new(&[c, h, w], data)).unwrap()
    }

    /// Tie branch-B weights to branch-A weights so identical inputs produce
    /// identical halves.
    fn tie_branches(ps: &mut ParamSet<f64>, block: &FusionBlock) {
        let pairs = [
            (block.self_a.wq, block.self_b.wq),
            (block.self_a.wk, block.self_b.wk),
            (block.self_a.wv, block.self_b.wv),
            (block.self_a.w1, block.self_b.w1),
            (block.self_a.b1, block.self_b.b1),
            (block.self_a.w2, block.self_b.w2),
            (block.self_a.b2, block.self_b.b2),
            (block.cross_a.wq, block.cross_b.wq),
            (block.cross_a.wk, block.cross_b.wk),
            (block.cross_a.wv, block.cross_b.wv),
            (block.cross_a.w1, block.cross_b.w1),
            (block.cross_a.b1, block.cross_b.b1),
            (block.cross_a.w2, block.cross_b.w2),
            (block.cross_a.b2, block.cross_b.b2),
        ];
        for (src, dst) in pairs {
            let v = ps.get(src).clone();
            *ps.get_mut(dst) = v;
        }
        // conv blocks: copy layer params (each block has exactly one layer)
        // conv_a params come right before conv_b params by construction
    }

    #[test]
    fn identical_inputs_tied_weights_symmetric_halves() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(1);
        let block = FusionBlock::new(&mut ps, &mut rng, "mfa", 4, 8, false);
        tie_branches(&mut ps, &block);
        // also tie the input convs: copy conv_a's two params onto conv_b's.
        // conv_a registered first: ids 0,1 then conv_b: 2,3
        let w = ps.get(ParamId(0)).clone();
        *ps.get_mut(ParamId(2)) = w;
        let b = ps.get(ParamId(1)).clone();
        *ps.get_mut(ParamId(3)) = b;

        let a = rand_map(8, 8, 8, 2);
        let mut g = Graph::new();
        let an = g.constant(a.data.clone());
        let bn = g.constant(a.data.clone());

        // with a == b and tied weights, both cross outputs are identical, so
        // the concat halves agree; check at the concat input by re-running
        // the pipeline pieces
        let fa = block.conv_a.forward(&mut g, &ps, an);
        let fb = block.conv_b.forward(&mut g, &ps, bn);
        let (pa, _) = g.patchify(fa, block.p);
        let (pb, _) = g.patchify(fb, block.p);
        let sa = self_attend(&mut g, &ps, &block.self_a, pa).out;
        let sb = self_attend(&mut g, &ps, &block.self_b, pb).out;
        let xa = cross_attend(&mut g, &ps, &block.cross_a, sa, sb, false).out;
        let xb = cross_attend(&mut g, &ps, &block.cross_b, sb, sa, false).out;
        let va = g.value(xa).clone();
        let vb = g.value(xb).clone();
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_v_and_decoder_give_zero_output() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(3);
        let block = FusionBlock::new(&mut ps, &mut rng, "mfa", 4, 8, false);
        // zero all V projections, MLPs, and the decoder
        for attn in [&block.self_a, &block.self_b, &block.cross_a, &block.cross_b] {
            for pid in [attn.wv, attn.w1, attn.b1, attn.w2, attn.b2] {
                for v in ps.get_mut(pid).data_mut().iter_mut() {
                    *v = 0.0;
                }
            }
        }
        // decoder param ids: registered after cross_b, before nothing else.
        // zero every parameter whose name starts with "mfa.dec"
        let dec_ids: Vec<ParamId> = ps
            .iter()
            .filter(|(_, name, _)| name.starts_with("mfa.dec"))
            .map(|(id, _, _)| id)
            .collect();
        for pid in dec_ids {
            for v in ps.get_mut(pid).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let a = rand_map(8, 8, 8, 4);
        let b = rand_map(8, 8, 8, 5);
        let out = block.eval(&ps, &a, &b).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straight_line_oracle_single_block() {
        // Independent straight-line evaluation of the whole block pipeline
        // using only tensor-level kernels (no graph), compared against the
        // graph forward.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(6);
        let block = FusionBlock::new(&mut ps, &mut rng, "mfa", 4, 4, false);
        let a = rand_map(8, 8, 8, 7);
        let b = rand_map(8, 8, 8, 8);
        let got = block.eval(&ps, &a, &b).unwrap();

        use crate::tensor as tk;
        let silu = |t: &Tensor<f64>| t.map(|v| v / (1.0 + (-v).exp()));
        let conv =
            |x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, act: bool| -> Tensor<f64> {
                let y = tk::conv2d(x, w, Some(bias), 1, w.shape()[2] / 2);
                if act {
                    silu(&y)
                } else {
                    y
                }
            };
        let attn_step = |x: &Tensor<f64>,
                         kv: &Tensor<f64>,
                         at: &Attention,
                         residual: bool|
         -> Tensor<f64> {
            let q = tk::matmul(x, ps.get(at.wq));
            let k = tk::matmul(kv, ps.get(at.wk));
            let v = tk::matmul(kv, ps.get(at.wv));
            let scores = tk::matmul_nt(&q, &k).scale(1.0 / (at.d_p as f64).sqrt());
            let probs = tk::softmax_rows(&scores);
            let attn = tk::matmul(&probs, &v);
            let pre = if residual { x.add(&attn) } else { attn };
            let mut h = tk::matmul(&pre, ps.get(at.w1));
            let d_h = h.shape()[1];
            for row in h.data_mut().chunks_exact_mut(d_h) {
                for (v, &bv) in row.iter_mut().zip(ps.get(at.b1).data()) {
                    *v = (*v + bv).tanh();
                }
            }
            let mut y = tk::matmul(&h, ps.get(at.w2));
            let d_y = y.shape()[1];
            for row in y.data_mut().chunks_exact_mut(d_y) {
                for (v, &bv) in row.iter_mut().zip(ps.get(at.b2).data()) {
                    *v += bv;
                }
            }
            if residual {
                pre.add(&y)
            } else {
                y
            }
        };

        let ids: Vec<ParamId> = (0..ps.len()).map(ParamId).collect();
        // conv_a = ids[0..2], conv_b = ids[2..4] (one layer each)
        let fa = conv(&a.data, ps.get(ids[0]), ps.get(ids[1]), true);
        let fb = conv(&b.data, ps.get(ids[2]), ps.get(ids[3]), true);
        let (pa, grid) = tk::patchify(&fa, 4);
        let (pb, _) = tk::patchify(&fb, 4);
        let sa = attn_step(&pa, &pa, &block.self_a, true);
        let sb = attn_step(&pb, &pb, &block.self_b, true);
        let xa = attn_step(&sa, &sb, &block.cross_a, false);
        let xb = attn_step(&sb, &sa, &block.cross_b, false);
        let ma = tk::fold(&xa, grid);
        let mb = tk::fold(&xb, grid);
        let mut cat = Tensor::zeros(&[16, 8, 8]);
        cat.data_mut()[..ma.numel()].copy_from_slice(ma.data());
        cat.data_mut()[ma.numel()..].copy_from_slice(mb.data());
        // decoder: 4 layers, names mfa.dec.0..3
        let dec: Vec<ParamId> = ps
            .iter()
            .filter(|(_, name, _)| name.starts_with("mfa.dec"))
            .map(|(id, _, _)| id)
            .collect();
        let y0 = conv(&cat, ps.get(dec[0]), ps.get(dec[1]), true);
        let y1 = conv(&y0, ps.get(dec[2]), ps.get(dec[3]), true);
        let y2 = conv(&y1, ps.get(dec[4]), ps.get(dec[5]), true);
        let y3 = conv(&y2, ps.get(dec[6]), ps.get(dec[7]), false);

        assert_eq!(got.data.shape(), y3.shape());
        for (g_, o) in got.data.data().iter().zip(y3.data()) {
            assert!((g_ - o).abs() < 1e-12, "{g_} vs {o}");
        }
    }

    #[test]
    fn residual_identity_with_zero_det_attn() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(9);
        let fuser = MultiScaleFusion::new(&mut ps, &mut rng, "mlcf", 4, 8, false);
        let sw = rand_map(8, 16, 16, 10);
        let lw = rand_map(8, 16, 16, 11);
        let zero = FeatureMap::new("z", Tensor::zeros(&[8, 16, 16])).unwrap();
        let (f_f, f_f_det, i_f) = fuser.eval(&ps, &sw, &lw, &zero).unwrap();
        for (a, b) in f_f.data.data().iter().zip(f_f_det.data.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // i_f dims equal input dims and values in [0,1]
        assert_eq!(i_f.shape(), &[1, 16, 16]);
        assert!(i_f.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn composition_matches_manual_blocks() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(12);
        let fuser = MultiScaleFusion::new(&mut ps, &mut rng, "mlcf", 4, 8, false);
        let sw = rand_map(8, 16, 16, 13);
        let lw = rand_map(8, 16, 16, 14);

        let (f_f, _, _) = fuser
            .eval(&ps, &sw, &lw, &FeatureMap::new("z", Tensor::zeros(&[8, 16, 16])).unwrap())
            .unwrap();

        // manual composition of the three blocks
        let mut g = Graph::new();
        let a = g.constant(sw.data.clone());
        let b = g.constant(lw.data.clone());
        let h = fuser.block_full.forward(&mut g, &ps, a, b, true).unwrap();
        let a_lo = g.avg_pool2(a);
        let b_lo = g.avg_pool2(b);
        let lo = fuser.block_low.forward(&mut g, &ps, a_lo, b_lo, true).unwrap();
        let l = g.upsample_bilinear2(lo);
        let m = fuser.block_merge.forward(&mut g, &ps, h, l, true).unwrap();
        let manual = g.value(m).clone();
        for (x, y) in f_f.data.data().iter().zip(manual.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_zero_weights_midpoint() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(15);
        let before = ps.len();
        let dec = FusionDecoder::new(&mut ps, &mut rng, "dec");
        for i in before..ps.len() {
            for v in ps.get_mut(ParamId(i)).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let f = rand_map(8, 8, 8, 16);
        let img = dec.eval(&ps, &f).unwrap();
        for &v in img.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn decoder_monotone_in_single_weight() {
        // a single active path: 1x1-ish probe through the final layer bias
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(17);
        let before = ps.len();
        let dec = FusionDecoder::new(&mut ps, &mut rng, "dec");
        for i in before..ps.len() {
            for v in ps.get_mut(ParamId(i)).data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        // final layer bias id is the last registered param
        let last_bias = ParamId(ps.len() - 1);
        let f = rand_map(8, 4, 4, 18);
        let mut prev = -1.0;
        for scale in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            ps.get_mut(last_bias).data_mut()[0] = scale;
            let img = dec.eval(&ps, &f).unwrap();
            let v = img.data()[0];
            assert!(v > prev, "sigmoid response must increase");
            prev = v;
        }
    }

    #[test]
    fn output_in_unit_interval() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = seeded_rng(19);
        let dec = FusionDecoder::new(&mut ps, &mut rng, "dec");
        for seed in 20..25 {
            let f = rand_map(8, 8, 8, seed);
            let img = dec.eval(&ps, &f).unwrap();
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
