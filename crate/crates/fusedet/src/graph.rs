//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass; each op computes its value
//! eagerly and records enough to run the backward sweep. Leaves are either
//! constants (no gradient) or parameters tracked by [`ParamId`].

use std::collections::HashMap;

use crate::params::{ParamId, ParamSet};
use crate::tensor::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, fold, matmul, matmul_nt, matmul_tn,
    pad_reflect, pad_reflect_backward, patchify, softmax_rows, softmax_rows_backward,
    upsample_bilinear2, upsample_bilinear2_backward, PatchGrid, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<F: Scalar> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Elementwise max; gradient routed to the winning input (first on ties).
    Max(NodeId, NodeId),
    Min(NodeId, NodeId),
    Scale(NodeId, F),
    MatMul(NodeId, NodeId),
    /// `a * b^T` with `b` stored `[n,k]`.
    MatMulNT(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    PadReflect {
        x: NodeId,
        pad: usize,
    },
    Silu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    SqrtEps(NodeId),
    SoftmaxRows(NodeId),
    Patchify {
        x: NodeId,
        grid: PatchGrid,
    },
    Fold {
        x: NodeId,
        grid: PatchGrid,
    },
    AvgPool2(NodeId),
    UpBilinear2(NodeId),
    ConcatC(NodeId, NodeId),
    Crop2d {
        x: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    MeanAll(NodeId),
    /// Per-channel bias add over a `[C,H,W]` input.
    BiasAddC(NodeId, NodeId),
    /// Per-column bias add over a `[N,D]` input.
    BiasAddRow(NodeId, NodeId),
    /// Extract channel `c` at cell `(y,x)` of a `[C,H,W]` input as a `[1]` tensor.
    GatherCell {
        x: NodeId,
        c: usize,
        y: usize,
        xcol: usize,
    },
    /// Weighted sum of elementwise binary cross-entropy with logits:
    /// `sum_i w_i * bce(z_i, t_i)` as a `[1]` tensor.
    BceSum {
        z: NodeId,
        targets: Tensor<F>,
        weights: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_leaves: HashMap<ParamId, NodeId>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<F: Scalar> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node[id.0].as_ref()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Differentiable leaf tied to a parameter slot.
    pub fn leaf(&mut self, value: Tensor<F>, param: Option<ParamId>) -> NodeId {
        self.push(value, Op::Leaf { param }, true)
    }

    /// Differentiable leaf for a registered parameter; each parameter gets one
    /// leaf per graph so repeated uses accumulate into a single gradient.
    pub fn param_leaf(&mut self, ps: &ParamSet<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_leaves.get(&id) {
            return n;
        }
        let n = self.leaf(ps.get(id).clone(), Some(id));
        self.param_leaves.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| if x >= y { x } else { y });
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Max(a, b), g)
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| if x <= y { x } else { y });
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Min(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).scale(c);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_nt(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), g)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv2d(
            self.value(x),
            self.value(w),
            b.map(|bb| self.value(bb)),
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(w) || b.map(|bb| self.ng(bb)).unwrap_or(false);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn pad_reflect(&mut self, x: NodeId, pad: usize) -> NodeId {
        let v = pad_reflect(self.value(x), pad);
        let g = self.ng(x);
        self.push(v, Op::PadReflect { x, pad }, g)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        let g = self.ng(x);
        self.push(v, Op::Silu(x), g)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let g = self.ng(x);
        self.push(v, Op::Tanh(x), g)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        let g = self.ng(x);
        self.push(v, Op::Sigmoid(x), g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.exp());
        let g = self.ng(x);
        self.push(v, Op::Exp(x), g)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let g = self.ng(x);
        self.push(v, Op::Relu(x), g)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.abs());
        let g = self.ng(x);
        self.push(v, Op::Abs(x), g)
    }

    /// `sqrt(x + 1e-12)`, keeping the derivative finite at zero.
    pub fn sqrt_eps(&mut self, x: NodeId) -> NodeId {
        let eps = F::from_f64(1e-12);
        let v = self.value(x).map(|v| (v + eps).sqrt());
        let g = self.ng(x);
        self.push(v, Op::SqrtEps(x), g)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(self.value(x));
        let g = self.ng(x);
        self.push(v, Op::SoftmaxRows(x), g)
    }

    pub fn patchify(&mut self, x: NodeId, p: usize) -> (NodeId, PatchGrid) {
        let (v, grid) = patchify(self.value(x), p);
        let g = self.ng(x);
        (self.push(v, Op::Patchify { x, grid }, g), grid)
    }

    pub fn fold(&mut self, x: NodeId, grid: PatchGrid) -> NodeId {
        let v = fold(self.value(x), grid);
        let g = self.ng(x);
        self.push(v, Op::Fold { x, grid }, g)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let v = avg_pool2(self.value(x));
        let g = self.ng(x);
        self.push(v, Op::AvgPool2(x), g)
    }

    pub fn upsample_bilinear2(&mut self, x: NodeId) -> NodeId {
        let v = upsample_bilinear2(self.value(x));
        let g = self.ng(x);
        self.push(v, Op::UpBilinear2(x), g)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape()[1..], vb.shape()[1..], "concat spatial mismatch");
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let shape = [va.shape()[0] + vb.shape()[0], va.shape()[1], va.shape()[2]];
        let g = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, data), Op::ConcatC(a, b), g)
    }

    pub fn crop2d(&mut self, x: NodeId, y0: usize, x0: usize, h: usize, w: usize) -> NodeId {
        let v = self.value(x);
        let (c, hh, ww) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(y0 + h <= hh && x0 + w <= ww, "crop out of bounds");
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                let src = (ci * hh + y0 + y) * ww + x0;
                let dst = (ci * h + y) * w;
                out.data_mut()[dst..dst + w].copy_from_slice(&v.data()[src..src + w]);
            }
        }
        let g = self.ng(x);
        self.push(out, Op::Crop2d { x, y0, x0, h, w }, g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        let g = self.ng(x);
        self.push(v, Op::MeanAll(x), g)
    }

    pub fn bias_add_c(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vb.numel(), c, "bias length mismatch");
        let mut out = vx.clone();
        for ci in 0..c {
            let bv = vb.data()[ci];
            for v in &mut out.data_mut()[ci * h * w..(ci + 1) * h * w] {
                *v += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(out, Op::BiasAddC(x, b), g)
    }

    pub fn bias_add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(b));
        let d = vx.shape()[1];
        assert_eq!(vb.numel(), d, "row bias length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, &bv) in row.iter_mut().zip(vb.data()) {
                *v += bv;
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(out, Op::BiasAddRow(x, b), g)
    }

    pub fn gather_cell(&mut self, x: NodeId, c: usize, y: usize, xcol: usize) -> NodeId {
        let v = self.value(x);
        let (hh, ww) = (v.shape()[1], v.shape()[2]);
        let out = Tensor::scalar(v.data()[(c * hh + y) * ww + xcol]);
        let g = self.ng(x);
        self.push(out, Op::GatherCell { x, c, y, xcol }, g)
    }

    /// `sum_i weights_i * bce_with_logits(z_i, targets_i)` in log-sum-exp form.
    pub fn bce_sum(&mut self, z: NodeId, targets: Tensor<F>, weights: Tensor<F>) -> NodeId {
        let vz = self.value(z);
        assert_eq!(vz.shape(), targets.shape(), "bce target shape");
        assert_eq!(vz.shape(), weights.shape(), "bce weight shape");
        let mut acc = F::zero();
        for ((&zv, &tv), &wv) in vz.data().iter().zip(targets.data()).zip(weights.data()) {
            if wv == F::zero() {
                continue;
            }
            let loss = zv.max(F::zero()) - zv * tv + (F::one() + (-zv.abs()).exp()).ln();
            acc += wv * loss;
        }
        let g = self.ng(z);
        self.push(Tensor::scalar(acc), Op::BceSum { z, targets, weights }, g)
    }

    /// Reverse sweep seeded with `d(loss)/d(loss) = 1`; `loss` must be `[1]`.
    pub fn backward(&self, loss: NodeId) -> Gradients<F> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                assert_eq!(g.shape(), delta.shape(), "gradient shape mismatch");
                g.axpy(F::one(), &delta);
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv));
                self.acc(grads, *b, g.zip(self.value(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip(vb, |gv, bv| gv / bv));
                let db = {
                    let mut t = g.clone();
                    for ((dv, &av), &bv) in
                        t.data_mut().iter_mut().zip(va.data()).zip(vb.data())
                    {
                        *dv = -*dv * av / (bv * bv);
                    }
                    t
                };
                self.acc(grads, *b, db);
            }
            Op::Max(a, b) => {
                let mask = self
                    .value(*a)
                    .zip(self.value(*b), |x, y| if x >= y { F::one() } else { F::zero() });
                self.acc(grads, *a, g.zip(&mask, |gv, m| gv * m));
                self.acc(grads, *b, g.zip(&mask, |gv, m| gv * (F::one() - m)));
            }
            Op::Min(a, b) => {
                let mask = self
                    .value(*a)
                    .zip(self.value(*b), |x, y| if x <= y { F::one() } else { F::zero() });
                self.acc(grads, *a, g.zip(&mask, |gv, m| gv * m));
                self.acc(grads, *b, g.zip(&mask, |gv, m| gv * (F::one() - m)));
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                // c = a*b: da = g*b^T, db = a^T*g
                self.acc(grads, *a, matmul_nt(g, self.value(*b)));
                self.acc(grads, *b, matmul_tn(self.value(*a), g));
            }
            Op::MatMulNT(a, b) => {
                // c = a*b^T with b [n,k]: da = g*b, db = g^T*a
                self.acc(grads, *a, matmul(g, self.value(*b)));
                self.acc(grads, *b, matmul_tn(g, self.value(*a)));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(bb) = b {
                    self.acc(grads, *bb, db);
                }
            }
            Op::PadReflect { x, pad } => {
                let v = self.value(*x);
                self.acc(
                    grads,
                    *x,
                    pad_reflect_backward(g, *pad, v.shape()[1], v.shape()[2]),
                );
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip(g, |xv, gv| {
                    let s = F::one() / (F::one() + (-xv).exp());
                    gv * s * (F::one() + xv * (F::one() - s))
                });
                self.acc(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                self.acc(grads, *x, y.zip(g, |yv, gv| gv * (F::one() - yv * yv)));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, *x, y.zip(g, |yv, gv| gv * yv * (F::one() - yv)));
            }
            Op::Exp(x) => {
                let y = &node.value;
                self.acc(grads, *x, y.zip(g, |yv, gv| gv * yv));
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip(g, |xv, gv| {
                    if xv > F::zero() {
                        gv
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, dx);
            }
            Op::Abs(x) => {
                let dx = self.value(*x).zip(g, |xv, gv| {
                    if xv > F::zero() {
                        gv
                    } else if xv < F::zero() {
                        -gv
                    } else {
                        F::zero()
                    }
                });
                self.acc(grads, *x, dx);
            }
            Op::SqrtEps(x) => {
                let y = &node.value;
                let half = F::from_f64(0.5);
                self.acc(grads, *x, y.zip(g, |yv, gv| gv * half / yv));
            }
            Op::SoftmaxRows(x) => {
                self.acc(grads, *x, softmax_rows_backward(&node.value, g));
            }
            Op::Patchify { x, grid } => {
                self.acc(grads, *x, fold(g, *grid));
            }
            Op::Fold { x, grid } => {
                let (dx, _) = patchify(g, grid.p);
                self.acc(grads, *x, dx);
            }
            Op::AvgPool2(x) => self.acc(grads, *x, avg_pool2_backward(g)),
            Op::UpBilinear2(x) => self.acc(grads, *x, upsample_bilinear2_backward(g)),
            Op::ConcatC(a, b) => {
                let ca = self.value(*a).shape()[0];
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let split = ca * h * w;
                let ga = Tensor::new(&[ca, h, w], g.data()[..split].to_vec());
                let cb = g.shape()[0] - ca;
                let gb = Tensor::new(&[cb, h, w], g.data()[split..].to_vec());
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Crop2d { x, y0, x0, h, w } => {
                let v = self.value(*x);
                let (c, hh, ww) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let mut dx = Tensor::zeros(&[c, hh, ww]);
                for ci in 0..c {
                    for y in 0..*h {
                        let dst = (ci * hh + y0 + y) * ww + x0;
                        let src = (ci * h + y) * w;
                        for i in 0..*w {
                            dx.data_mut()[dst + i] += g.data()[src + i];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let v = self.value(*x);
                let gv = g.item() / F::from_f64(v.numel() as f64);
                self.acc(grads, *x, Tensor::full(v.shape(), gv));
            }
            Op::BiasAddC(x, b) => {
                self.acc(grads, *x, g.clone());
                let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut db = Tensor::zeros(&[c]);
                for ci in 0..c {
                    db.data_mut()[ci] = g.data()[ci * h * w..(ci + 1) * h * w]
                        .iter()
                        .copied()
                        .sum();
                }
                self.acc(grads, *b, db);
            }
            Op::BiasAddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                let d = g.shape()[1];
                let mut db = Tensor::zeros(&[d]);
                for row in g.data().chunks_exact(d) {
                    for (dv, &gv) in db.data_mut().iter_mut().zip(row) {
                        *dv += gv;
                    }
                }
                self.acc(grads, *b, db);
            }
            Op::GatherCell { x, c, y, xcol } => {
                let v = self.value(*x);
                let (hh, ww) = (v.shape()[1], v.shape()[2]);
                let mut dx = Tensor::zeros(v.shape());
                dx.data_mut()[(c * hh + y) * ww + xcol] = g.item();
                self.acc(grads, *x, dx);
            }
            Op::BceSum { z, targets, weights } => {
                let vz = self.value(*z);
                let gv = g.item();
                let mut dz = Tensor::zeros(vz.shape());
                for (((dzv, &zv), &tv), &wv) in dz
                    .data_mut()
                    .iter_mut()
                    .zip(vz.data())
                    .zip(targets.data())
                    .zip(weights.data())
                {
                    if wv == F::zero() {
                        continue;
                    }
                    let s = F::one() / (F::one() + (-zv).exp());
                    *dzv = gv * wv * (s - tv);
                }
                self.acc(grads, *z, dz);
            }
        }
    }

    /// Gradients grouped by the parameter slot of each differentiable leaf.
    pub fn param_grads(&self, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = &grads.by_node[idx] {
                    out.push((pid, g.clone()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(shape, data)
    }

    /// Central-difference check of d(scalar out)/d(leaf) for a graph builder.
    fn grad_check(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        x0: &Tensor<f64>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), None);
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.wrt(x).expect("leaf gradient").clone();

        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(t, None);
                let loss = build(&mut g, x);
                g.scalar_value(loss)
            };
            let num = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = num.abs().max(a.abs()).max(1e-6);
            assert!(
                (num - a).abs() / denom < tol,
                "grad mismatch at {i}: numeric {num} vs analytic {a}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        let x = rand_tensor(&[2, 3], 1);
        grad_check(
            |g, x| {
                let a = g.silu(x);
                let b = g.tanh(a);
                let c = g.sigmoid(b);
                let d = g.mul(c, b);
                g.mean_all(d)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_softmax() {
        let x = rand_tensor(&[3, 4], 2);
        let w = rand_tensor(&[4, 3], 3);
        grad_check(
            |g, x| {
                let wn = g.constant(w.clone());
                let y = g.matmul(x, wn);
                let s = g.softmax_rows(y);
                let s2 = g.mul(s, s);
                g.mean_all(s2)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_conv_pool_upsample() {
        let x = rand_tensor(&[2, 4, 4], 4);
        let w = rand_tensor(&[3, 2, 3, 3], 5);
        let b = rand_tensor(&[3], 6);
        grad_check(
            |g, x| {
                let wn = g.leaf(w.clone(), None);
                let bn = g.leaf(b.clone(), None);
                let y = g.conv2d(x, wn, Some(bn), 1, 1);
                let y = g.silu(y);
                let p = g.avg_pool2(y);
                let u = g.upsample_bilinear2(p);
                let a = g.abs(u);
                g.mean_all(a)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_conv_weights() {
        let x = rand_tensor(&[2, 6, 6], 7);
        let w0 = rand_tensor(&[4, 2, 3, 3], 8);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.leaf(w0.clone(), None);
        let y = g.conv2d(xn, wn, None, 2, 1);
        let t = g.tanh(y);
        let loss = g.mean_all(t);
        let grads = g.backward(loss);
        let analytic = grads.wrt(wn).unwrap().clone();

        let h = 1e-5;
        for i in [0usize, 5, 17, 31, 70] {
            let eval = |wt: Tensor<f64>| {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let wn = g.leaf(wt, None);
                let y = g.conv2d(xn, wn, None, 2, 1);
                let t = g.tanh(y);
                let loss = g.mean_all(t);
                g.scalar_value(loss)
            };
            let mut plus = w0.clone();
            plus.data_mut()[i] += h;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= h;
            let num = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (num - a).abs() / num.abs().max(a.abs()).max(1e-6) < 1e-6,
                "conv dw mismatch at {i}: {num} vs {a}"
            );
        }
    }

    #[test]
    fn grad_patchify_fold_concat_crop() {
        let x = rand_tensor(&[2, 4, 4], 9);
        grad_check(
            |g, x| {
                let (s, grid) = g.patchify(x, 2);
                let sm = g.softmax_rows(s);
                let f = g.fold(sm, grid);
                let cat = g.concat_channels(f, x);
                let cr = g.crop2d(cat, 1, 1, 2, 2);
                let a = g.abs(cr);
                g.mean_all(a)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_reflect_pad_div_minmax() {
        let x = rand_tensor(&[1, 3, 3], 10);
        let c = rand_tensor(&[1, 5, 5], 11).map(|v| v.abs() + 1.5);
        grad_check(
            |g, x| {
                let p = g.pad_reflect(x, 1);
                let cn = g.constant(c.clone());
                let d = g.div(p, cn);
                let m = g.maximum(d, cn);
                let mn = g.minimum(m, p);
                let e = g.exp(mn);
                g.mean_all(e)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_bce_and_gather() {
        let x = rand_tensor(&[2, 3, 3], 12);
        let t = rand_tensor(&[2, 3, 3], 13).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let w = Tensor::full(&[2, 3, 3], 0.5);
        grad_check(
            |g, x| {
                let b = g.bce_sum(x, t.clone(), w.clone());
                let cell = g.gather_cell(x, 1, 2, 0);
                let s = g.sigmoid(cell);
                let e = g.exp(s);
                let sum = g.add(b, e);
                g.mean_all(sum)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn zero_lr_like_identity() {
        // backward on a graph must not alter values
        let x = rand_tensor(&[3, 3], 14);
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), None);
        let y = g.silu(xn);
        let loss = g.mean_all(y);
        let _ = g.backward(loss);
        assert_eq!(g.value(xn).data(), x.data());
    }
}
