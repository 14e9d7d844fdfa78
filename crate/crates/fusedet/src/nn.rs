//! Network building blocks: feature maps, patch sequences, the patch
//! self-/cross-attention pair, and generic convolution stacks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{init_uniform, ParamId, ParamSet};
use crate::tensor::{PatchGrid, Scalar, Tensor};

/// A C x H x W activation tensor with a semantic role tag.
#[derive(Clone, Debug)]
pub struct FeatureMap<F: Scalar> {
    pub role: String,
    pub data: Tensor<F>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn new(role: impl Into<String>, data: Tensor<F>) -> Result<Self> {
        if data.shape().len() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "feature map must be CxHxW with positive dims, got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("feature map contains non-finite entries".into()));
        }
        Ok(Self {
            role: role.into(),
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Vectorized p x p patches of a feature map, one patch per row.
#[derive(Clone, Debug)]
pub struct PatchSequence<F: Scalar> {
    pub data: Tensor<F>,
    pub grid: PatchGrid,
}

/// Split a feature map into vectorized p x p patches (lossless rearrangement).
pub fn patchify<F: Scalar>(f: &FeatureMap<F>, p: usize) -> Result<PatchSequence<F>> {
    let (h, w) = (f.height(), f.width());
    if p == 0 || h % p != 0 || w % p != 0 {
        let need_h = (p - h % p) % p;
        let need_w = (p - w % p) % p;
        return Err(Error::Shape(format!(
            "patch size {p} does not divide {h}x{w}; pad by {need_h} rows and {need_w} cols first"
        )));
    }
    let (data, grid) = crate::tensor::patchify(&f.data, p);
    Ok(PatchSequence { data, grid })
}

/// Exact inverse of [`patchify`].
pub fn fold<F: Scalar>(s: &PatchSequence<F>) -> Result<FeatureMap<F>> {
    if s.data.shape()[0] != s.grid.n() || s.data.shape()[1] != s.grid.d() {
        return Err(Error::Shape(format!(
            "patch sequence {:?} inconsistent with grid {}x{} patches of width {}",
            s.data.shape(),
            s.grid.rows,
            s.grid.cols,
            s.grid.d()
        )));
    }
    FeatureMap::new("folded", crate::tensor::fold(&s.data, s.grid))
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Projection and MLP parameters for one attention layer.
///
/// Q and K project `d -> d_p`; V projects `d -> d` so the attention output can
/// be residually added to the input sequence and folded back into a feature
/// map. The MLP is two affine layers with a tanh between, hidden width
/// `2*d_p`, applied with a residual add in the self-attention configuration.
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d: usize,
    pub d_p: usize,
}

/// Output of an attention forward pass plus intermediate nodes kept visible
/// for normalization and zero-case checks.
pub struct AttentionTrace {
    pub out: NodeId,
    pub probs: NodeId,
    /// Attention term including the residual add when enabled, before the MLP.
    pub pre_mlp: NodeId,
}

impl Attention {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_p: usize,
    ) -> Self {
        let hidden = 2 * d_p;
        Self {
            wq: ps.register(format!("{name}.wq"), init_uniform(rng, &[d, d_p], d)),
            wk: ps.register(format!("{name}.wk"), init_uniform(rng, &[d, d_p], d)),
            wv: ps.register(format!("{name}.wv"), init_uniform(rng, &[d, d], d)),
            w1: ps.register(format!("{name}.w1"), init_uniform(rng, &[d, hidden], d)),
            b1: ps.register(format!("{name}.b1"), Tensor::zeros(&[hidden])),
            w2: ps.register(format!("{name}.w2"), init_uniform(rng, &[hidden, d], hidden)),
            b2: ps.register(format!("{name}.b2"), Tensor::zeros(&[d])),
            d,
            d_p,
        }
    }

    /// Scaled dot-product attention with Q from `q_src` and K,V from `kv_src`,
    /// followed by the MLP. With `residual` the attention term and the MLP are
    /// both added back (self-attention form); without it the raw attention
    /// output feeds the MLP directly (cross-attention form).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        q_src: NodeId,
        kv_src: NodeId,
        residual: bool,
    ) -> AttentionTrace {
        let wq = g.param_leaf(ps, self.wq);
        let wk = g.param_leaf(ps, self.wk);
        let wv = g.param_leaf(ps, self.wv);
        let q = g.matmul(q_src, wq);
        let k = g.matmul(kv_src, wk);
        let v = g.matmul(kv_src, wv);
        let scores = g.matmul_nt(q, k);
        let scaled = g.scale(scores, F::from_f64(1.0 / (self.d_p as f64).sqrt()));
        let probs = g.softmax_rows(scaled);
        let attn = g.matmul(probs, v);
        let pre_mlp = if residual { g.add(q_src, attn) } else { attn };

        let w1 = g.param_leaf(ps, self.w1);
        let b1 = g.param_leaf(ps, self.b1);
        let w2 = g.param_leaf(ps, self.w2);
        let b2 = g.param_leaf(ps, self.b2);
        let h = g.matmul(pre_mlp, w1);
        let h = g.bias_add_row(h, b1);
        let h = g.tanh(h);
        let y = g.matmul(h, w2);
        let y = g.bias_add_row(y, b2);
        let out = if residual { g.add(pre_mlp, y) } else { y };
        AttentionTrace { out, probs, pre_mlp }
    }
}

/// Self-attention with the mandatory residual structure.
pub fn self_attend<F: Scalar>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    attn: &Attention,
    x: NodeId,
) -> AttentionTrace {
    attn.forward(g, ps, x, x, true)
}

/// Cross-attention: Q from `q_src`, K and V from `kv_src`. Carries no
/// residual term unless `residual` is set.
pub fn cross_attend<F: Scalar>(
    g: &mut Graph<F>,
    ps: &ParamSet<F>,
    attn: &Attention,
    q_src: NodeId,
    kv_src: NodeId,
    residual: bool,
) -> AttentionTrace {
    attn.forward(g, ps, q_src, kv_src, residual)
}

/// Evaluate self-attention on a plain patch sequence (scratch graph).
pub fn self_attend_seq<F: Scalar>(
    s: &PatchSequence<F>,
    ps: &ParamSet<F>,
    attn: &Attention,
) -> Result<PatchSequence<F>> {
    if s.data.shape()[1] != attn.d {
        return Err(Error::Shape(format!(
            "sequence width {} vs attention d {}",
            s.data.shape()[1],
            attn.d
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(s.data.clone());
    let trace = self_attend(&mut g, ps, attn, x);
    let out = g.value(trace.out).clone();
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok(PatchSequence {
        data: out,
        grid: s.grid,
    })
}

/// Evaluate cross-attention on plain patch sequences (scratch graph).
pub fn cross_attend_seq<F: Scalar>(
    q_seq: &PatchSequence<F>,
    kv_seq: &PatchSequence<F>,
    ps: &ParamSet<F>,
    attn: &Attention,
    residual: bool,
) -> Result<PatchSequence<F>> {
    if q_seq.data.shape() != kv_seq.data.shape() {
        return Err(Error::Shape(format!(
            "cross-attention operands differ: {:?} vs {:?}",
            q_seq.data.shape(),
            kv_seq.data.shape()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(q_seq.data.clone());
    let kv = g.constant(kv_seq.data.clone());
    let trace = cross_attend(&mut g, ps, attn, q, kv, residual);
    let out = g.value(trace.out).clone();
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite attention output".into()));
    }
    Ok(PatchSequence {
        data: out,
        grid: q_seq.grid,
    })
}

// ---------------------------------------------------------------------------
// Convolution stacks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    None,
    Silu,
    Tanh,
    Sigmoid,
    Relu,
}

/// One layer of a [`ConvBlock`].
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Act,
}

impl LayerSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, activation: Act) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            activation,
        }
    }
}

struct ConvLayer {
    w: ParamId,
    b: ParamId,
    in_channels: usize,
    spec: LayerSpec,
}

/// A stack of 2-D convolutions with same-padding (`pad = kernel/2`).
pub struct ConvBlock {
    layers: Vec<ConvLayer>,
}

impl ConvBlock {
    pub fn new<F: Scalar>(
        ps: &mut ParamSet<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        specs: &[LayerSpec],
    ) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        let mut c = in_channels;
        for (i, spec) in specs.iter().enumerate() {
            let fan_in = c * spec.kernel * spec.kernel;
            let w = ps.register(
                format!("{name}.{i}.w"),
                init_uniform(rng, &[spec.out_channels, c, spec.kernel, spec.kernel], fan_in),
            );
            let b = ps.register(format!("{name}.{i}.b"), Tensor::zeros(&[spec.out_channels]));
            layers.push(ConvLayer {
                w,
                b,
                in_channels: c,
                spec: *spec,
            });
            c = spec.out_channels;
        }
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_channels).unwrap_or(0)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, mut x: NodeId) -> NodeId {
        for layer in &self.layers {
            debug_assert_eq!(g.value(x).shape()[0], layer.in_channels);
            let w = g.param_leaf(ps, layer.w);
            let b = g.param_leaf(ps, layer.b);
            x = g.conv2d(x, w, Some(b), layer.spec.stride, layer.spec.kernel / 2);
            x = match layer.spec.activation {
                Act::None => x,
                Act::Silu => g.silu(x),
                Act::Tanh => g.tanh(x),
                Act::Sigmoid => g.sigmoid(x),
                Act::Relu => g.relu(x),
            };
        }
        x
    }

    /// Evaluate on a plain feature map (scratch graph).
    pub fn eval<F: Scalar>(&self, ps: &ParamSet<F>, f: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        if let Some(first) = self.layers.first() {
            if f.channels() != first.in_channels {
                return Err(Error::Shape(format!(
                    "conv block expects {} input channels, got {}",
                    first.in_channels,
                    f.channels()
                )));
            }
        }
        let mut g = Graph::new();
        let x = g.constant(f.data.clone());
        let y = self.forward(&mut g, ps, x);
        FeatureMap::new(format!("{}:conv", f.role), g.value(y).clone())
    }
}

/// Spec-style one-shot convolution stack over a feature map.
pub fn conv_block<F: Scalar>(
    f: &FeatureMap<F>,
    ps: &ParamSet<F>,
    block: &ConvBlock,
) -> Result<FeatureMap<F>> {
    block.eval(ps, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new("t", Tensor::new(&[c, h, w], data)).unwrap()
    }

    fn zero_attention(ps: &mut ParamSet<f64>, d: usize, d_p: usize) -> Attention {
        Attention {
            wq: ps.register("wq", Tensor::zeros(&[d, d_p])),
            wk: ps.register("wk", Tensor::zeros(&[d, d_p])),
            wv: ps.register("wv", Tensor::zeros(&[d, d])),
            w1: ps.register("w1", Tensor::zeros(&[d, 2 * d_p])),
            b1: ps.register("b1", Tensor::zeros(&[2 * d_p])),
            w2: ps.register("w2", Tensor::zeros(&[2 * d_p, d])),
            b2: ps.register("b2", Tensor::zeros(&[d])),
            d,
            d_p,
        }
    }

    #[test]
    fn patchify_shapes() {
        let f = rand_map(8, 8, 8, 1);
        let s = patchify(&f, 4).unwrap();
        assert_eq!(s.data.shape(), &[4, 128]);
        let f1 = rand_map(1, 4, 4, 2);
        let s1 = patchify(&f1, 4).unwrap();
        assert_eq!(s1.data.shape(), &[1, 16]);
    }

    #[test]
    fn patchify_rejects_nondivisible() {
        let f = rand_map(2, 6, 8, 3);
        let err = patchify(&f, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pad by 2 rows"), "got: {msg}");
    }

    #[test]
    fn fold_is_exact_inverse() {
        let f = rand_map(3, 8, 12, 4);
        let s = patchify(&f, 4).unwrap();
        let back = fold(&s).unwrap();
        assert_eq!(back.data.data(), f.data.data());
    }

    #[test]
    fn fold_rejects_bad_grid() {
        let f = rand_map(2, 4, 4, 5);
        let mut s = patchify(&f, 2).unwrap();
        s.grid.rows += 1;
        assert!(fold(&s).is_err());
    }

    #[test]
    fn fold_detects_row_permutation() {
        // permuting two patch rows must change the folded map
        let f = rand_map(1, 4, 4, 6);
        let mut s = patchify(&f, 2).unwrap();
        let d = s.grid.d();
        let row0: Vec<f64> = s.data.data()[0..d].to_vec();
        let row1: Vec<f64> = s.data.data()[d..2 * d].to_vec();
        s.data.data_mut()[0..d].copy_from_slice(&row1);
        s.data.data_mut()[d..2 * d].copy_from_slice(&row0);
        let folded = fold(&s).unwrap();
        assert_ne!(folded.data.data(), f.data.data());
        // direct rearrangement oracle: patch (0,0) now holds old patch (0,1)
        assert_eq!(folded.data.data()[0], f.data.data()[2]);
    }

    #[test]
    fn self_attend_zero_projections_is_identity() {
        let f = rand_map(2, 4, 4, 7);
        let s = patchify(&f, 2).unwrap();
        let mut ps = ParamSet::new();
        let attn = zero_attention(&mut ps, s.grid.d(), 4);
        let out = self_attend_seq(&s, &ps, &attn).unwrap();
        assert_eq!(out.data.data(), s.data.data());
    }

    #[test]
    fn cross_attend_zero_v_gives_zero_pre_mlp() {
        // with V = 0 and zero MLP, the whole output is zero
        let fa = rand_map(2, 4, 4, 8);
        let fb = rand_map(2, 4, 4, 9);
        let sa = patchify(&fa, 2).unwrap();
        let sb = patchify(&fb, 2).unwrap();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = sa.grid.d();
        let mut attn = Attention::new(&mut ps, &mut rng, "a", d, 4);
        attn.wv = ps.register("wv0", Tensor::zeros(&[d, d]));
        // zero the MLP so nothing re-enters after the attention term
        attn.w1 = ps.register("w10", Tensor::zeros(&[d, 8]));
        attn.w2 = ps.register("w20", Tensor::zeros(&[8, d]));
        attn.b1 = ps.register("b10", Tensor::zeros(&[8]));
        attn.b2 = ps.register("b20", Tensor::zeros(&[d]));
        let out = cross_attend_seq(&sa, &sb, &ps, &attn, false).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_equals_self_attention_term_when_tied() {
        // q == kv with tied weights reduces cross attention to the
        // self-attention term (the part without residual).
        let f = rand_map(2, 4, 4, 11);
        let s = patchify(&f, 2).unwrap();
        let d = s.grid.d();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attn = Attention::new(&mut ps, &mut rng, "a", d, 4);

        let cross = cross_attend_seq(&s, &s, &ps, &attn, false).unwrap();

        // reference: attention term + MLP, no residual, built directly
        let mut g = Graph::new();
        let x = g.constant(s.data.clone());
        let trace = attn.forward(&mut g, &ps, x, x, false);
        let expect = g.value(trace.out).clone();
        for (a, b) in cross.data.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_patch_scalar_oracle() {
        // N=2 patches, d=1, d_p=1: hand computation of the attention equation.
        let s = PatchSequence {
            data: Tensor::new(&[2, 1], vec![0.3, -0.7]),
            grid: PatchGrid {
                rows: 2,
                cols: 1,
                p: 1,
                c: 1,
            },
        };
        let mut ps = ParamSet::new();
        let attn = Attention {
            wq: ps.register("wq", Tensor::new(&[1, 1], vec![0.5])),
            wk: ps.register("wk", Tensor::new(&[1, 1], vec![-0.4])),
            wv: ps.register("wv", Tensor::new(&[1, 1], vec![0.8])),
            w1: ps.register("w1", Tensor::zeros(&[1, 2])),
            b1: ps.register("b1", Tensor::zeros(&[2])),
            w2: ps.register("w2", Tensor::zeros(&[2, 1])),
            b2: ps.register("b2", Tensor::zeros(&[1])),
            d: 1,
            d_p: 1,
        };
        // hand oracle
        let x = [0.3, -0.7];
        let q: Vec<f64> = x.iter().map(|v| v * 0.5).collect();
        let k: Vec<f64> = x.iter().map(|v| v * -0.4).collect();
        let v: Vec<f64> = x.iter().map(|v| v * 0.8).collect();
        let mut expect = [0.0; 2];
        for i in 0..2 {
            let s0 = q[i] * k[0];
            let s1 = q[i] * k[1];
            let m = s0.max(s1);
            let e0 = (s0 - m).exp();
            let e1 = (s1 - m).exp();
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            expect[i] = x[i] + p0 * v[0] + p1 * v[1];
        }
        let out = self_attend_seq(&s, &ps, &attn).unwrap();
        for (a, b) in out.data.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // cross-attention oracle on two distinct sequences, with a hand-set
        // nonzero MLP so both the attention term and the MLP are exercised
        let mut attn = attn;
        attn.w1 = ps.register("w1c", Tensor::new(&[1, 2], vec![0.6, -0.3]));
        attn.b1 = ps.register("b1c", Tensor::new(&[2], vec![0.1, 0.2]));
        attn.w2 = ps.register("w2c", Tensor::new(&[2, 1], vec![1.1, -0.9]));
        attn.b2 = ps.register("b2c", Tensor::new(&[1], vec![0.05]));
        let s2 = PatchSequence {
            data: Tensor::new(&[2, 1], vec![0.9, 0.1]),
            grid: s.grid,
        };
        let y = [0.9, 0.1];
        let qc: Vec<f64> = x.iter().map(|v| v * 0.5).collect();
        let kc: Vec<f64> = y.iter().map(|v| v * -0.4).collect();
        let vc: Vec<f64> = y.iter().map(|v| v * 0.8).collect();
        let mut expect_attn = [0.0; 2];
        for i in 0..2 {
            let s0 = qc[i] * kc[0];
            let s1 = qc[i] * kc[1];
            let m = s0.max(s1);
            let e0 = (s0 - m).exp();
            let e1 = (s1 - m).exp();
            expect_attn[i] = (e0 * vc[0] + e1 * vc[1]) / (e0 + e1);
        }
        let expect_out: Vec<f64> = expect_attn
            .iter()
            .map(|&a| {
                let h0 = (a * 0.6 + 0.1).tanh();
                let h1 = (a * -0.3 + 0.2).tanh();
                h0 * 1.1 + h1 * -0.9 + 0.05
            })
            .collect();

        let mut g = Graph::new();
        let qn = g.constant(s.data.clone());
        let kvn = g.constant(s2.data.clone());
        let trace = cross_attend(&mut g, &ps, &attn, qn, kvn, false);
        for (a, b) in g.value(trace.pre_mlp).data().iter().zip(expect_attn.iter()) {
            assert!((a - b).abs() < 1e-12, "pre-mlp {a} vs {b}");
        }
        for (a, b) in g.value(trace.out).data().iter().zip(expect_out.iter()) {
            assert!((a - b).abs() < 1e-12, "out {a} vs {b}");
        }
    }

    #[test]
    fn attention_is_convex_combination_of_v_rows() {
        // with the MLP zeroed, each output column lies between the min and
        // max of the corresponding V column
        let f = rand_map(1, 4, 4, 13);
        let s = patchify(&f, 2).unwrap();
        let d = s.grid.d();
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut attn = Attention::new(&mut ps, &mut rng, "a", d, 4);
        attn.w1 = ps.register("w10", Tensor::zeros(&[d, 8]));
        attn.w2 = ps.register("w20", Tensor::zeros(&[8, d]));
        attn.b1 = ps.register("b10", Tensor::zeros(&[8]));
        attn.b2 = ps.register("b20", Tensor::zeros(&[d]));
        let out = cross_attend_seq(&s, &s, &ps, &attn, false).unwrap();
        let v = crate::tensor::matmul(&s.data, ps.get(attn.wv));
        for col in 0..d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in 0..s.grid.n() {
                lo = lo.min(v.data()[row * d + col]);
                hi = hi.max(v.data()[row * d + col]);
            }
            for row in 0..s.grid.n() {
                let o = out.data.data()[row * d + col];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn conv_block_identity_kernel() {
        let f = rand_map(3, 5, 5, 15);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let block = ConvBlock::new(&mut ps, &mut rng, "c", 3, &[LayerSpec::new(3, 1, 1, Act::None)]);
        // overwrite with the identity kernel
        let w = ps.get_mut(crate::params::ParamId(0));
        for v in w.data_mut().iter_mut() {
            *v = 0.0;
        }
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let out = block.eval(&ps, &f).unwrap();
        assert_eq!(out.data.data(), f.data.data());
    }

    #[test]
    fn conv_block_zero_weights_zero_output() {
        let f = rand_map(2, 6, 6, 17);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let block = ConvBlock::new(&mut ps, &mut rng, "c", 2, &[LayerSpec::new(4, 3, 1, Act::None)]);
        for v in ps.get_mut(crate::params::ParamId(0)).data_mut().iter_mut() {
            *v = 0.0;
        }
        let out = block.eval(&ps, &f).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_block_channel_mismatch() {
        let f = rand_map(2, 6, 6, 19);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let block = ConvBlock::new(&mut ps, &mut rng, "c", 5, &[LayerSpec::new(4, 3, 1, Act::Silu)]);
        assert!(matches!(block.eval(&ps, &f), Err(Error::Shape(_))));
    }
}
