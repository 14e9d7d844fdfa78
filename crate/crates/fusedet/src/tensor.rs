//! Dense row-major tensors and the numeric kernels behind the network ops.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training speed and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + std::iter::Sum + Debug + Display + Default + Copy + Send + Sync + 'static
{
    /// Byte width of the type, used by the checkpoint codec.
    const BYTES: usize;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }
}

/// Dense row-major tensor. Shapes in use: `[C,H,W]` feature maps, `[N,D]`
/// patch sequences, `[Co,Ci,Kh,Kw]` conv weights, `[C]` biases, `[1]` scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a `[1]` tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn max_elem(&self, other: &Self) -> Self {
        self.zip(other, |a, b| if a >= b { a } else { b })
    }

    pub fn mean(&self) -> F {
        let n = F::from_f64(self.numel() as f64);
        self.data.iter().copied().sum::<F>() / n
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: F, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in axpy");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| F::from_f64(v)).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

const LANES: usize = 16;

/// Accumulate elementwise products of `a` and `b` into 16 lanes. The fixed
/// lane layout keeps summation order deterministic while breaking the FMA
/// latency chain.
#[inline]
fn fma_lanes<F: Scalar>(acc: &mut [F; LANES], a: &[F], b: &[F]) {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] = x.mul_add(y, acc[l]);
    }
}

#[inline]
fn hsum<F: Scalar>(acc: &[F; LANES]) -> F {
    let mut s = [F::zero(); 4];
    for l in 0..LANES {
        s[l % 4] += acc[l];
    }
    (s[0] + s[2]) + (s[1] + s[3])
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    for (i, crow) in out.chunks_exact_mut(n).enumerate() {
        let arow = &a.data[i * k..(i + 1) * k];
        let mut kk = 0;
        // eight B rows per pass amortize the crow load/store traffic
        while kk + 8 <= k {
            let av: [F; 8] = arow[kk..kk + 8].try_into().unwrap();
            let b0 = &b.data[kk * n..(kk + 1) * n];
            let b1 = &b.data[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b.data[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b.data[(kk + 3) * n..(kk + 4) * n];
            let b4 = &b.data[(kk + 4) * n..(kk + 5) * n];
            let b5 = &b.data[(kk + 5) * n..(kk + 6) * n];
            let b6 = &b.data[(kk + 6) * n..(kk + 7) * n];
            let b7 = &b.data[(kk + 7) * n..(kk + 8) * n];
            for j in 0..n {
                let s0 = av[0].mul_add(b0[j], av[1] * b1[j]);
                let s1 = av[2].mul_add(b2[j], av[3] * b3[j]);
                let s2 = av[4].mul_add(b4[j], av[5] * b5[j]);
                let s3 = av[6].mul_add(b6[j], av[7] * b7[j]);
                crow[j] += (s0 + s1) + (s2 + s3);
            }
            kk += 8;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = av.mul_add(bv, *c);
            }
            kk += 1;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a [m,k] * b^T` where `b` is `[n,k]` -> `[m,n]`. Implemented by
/// transposing `b` once and reusing the row-major product.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (n, k) = (b.shape[0], b.shape[1]);
    assert_eq!(a.shape[1], k, "matmul_nt inner dims {} vs {k}", a.shape[1]);
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for kk in 0..k {
            bt[kk * n + j] = b.data[j * k + kk];
        }
    }
    matmul(a, &Tensor::new(&[k, n], bt))
}

/// `a^T * b` where `a` is `[k,m]`, `b` is `[k,n]` -> `[m,n]`.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (k, m) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, kb, "matmul_tn inner dims {k} vs {kb}");
    let mut out = vec![F::zero(); m * n];
    let mut kk = 0;
    while kk + 4 <= k {
        let a0 = &a.data[kk * m..(kk + 1) * m];
        let a1 = &a.data[(kk + 1) * m..(kk + 2) * m];
        let a2 = &a.data[(kk + 2) * m..(kk + 3) * m];
        let a3 = &a.data[(kk + 3) * m..(kk + 4) * m];
        let b0 = &b.data[kk * n..(kk + 1) * n];
        let b1 = &b.data[(kk + 1) * n..(kk + 2) * n];
        let b2 = &b.data[(kk + 2) * n..(kk + 3) * n];
        let b3 = &b.data[(kk + 3) * n..(kk + 4) * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            let (v0, v1, v2, v3) = (a0[i], a1[i], a2[i], a3[i]);
            for j in 0..n {
                let mut acc = crow[j];
                acc = v0.mul_add(b0[j], acc);
                acc = v1.mul_add(b1[j], acc);
                acc = v2.mul_add(b2[j], acc);
                acc = v3.mul_add(b3[j], acc);
                crow[j] = acc;
            }
        }
        kk += 4;
    }
    while kk < k {
        let arow = &a.data[kk * m..(kk + 1) * m];
        let brow = &b.data[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c = av.mul_add(bv, *c);
            }
        }
        kk += 1;
    }
    Tensor::new(&[m, n], out)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn zero_pad<F: Scalar>(x: &Tensor<F>, pad: usize) -> Tensor<F> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..h {
            let src = &x.data[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = &mut out.data[(ci * hp + y + pad) * wp + pad..];
            dst[..w].copy_from_slice(src);
        }
    }
    out
}

fn unpad_accumulate<F: Scalar>(dxp: &Tensor<F>, pad: usize, h: usize, w: usize) -> Tensor<F> {
    let c = dxp.shape[0];
    let wp = dxp.shape[2];
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let src = &dxp.data[(ci * dxp.shape[1] + y + pad) * wp + pad..];
            let dst = &mut out.data[(ci * h + y) * w..(ci * h + y + 1) * w];
            dst.copy_from_slice(&src[..w]);
        }
    }
    out
}

/// 2-D convolution (cross-correlation) of `x [Ci,H,W]` with `w [Co,Ci,Kh,Kw]`,
/// zero padding `pad`, stride `stride`.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let ci = x.shape[0];
    let (co, ciw, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(ci, ciw, "conv2d channel mismatch {ci} vs {ciw}");
    let padded;
    let xp = if pad > 0 {
        padded = zero_pad(x, pad);
        &padded
    } else {
        x
    };
    let (hp, wp) = (xp.shape[1], xp.shape[2]);
    assert!(hp >= kh && wp >= kw, "conv2d input smaller than kernel");
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for oc in 0..co {
        let oplane = &mut out.data[oc * ho * wo..(oc + 1) * ho * wo];
        if let Some(bias) = b {
            let bv = bias.data[oc];
            for v in oplane.iter_mut() {
                *v = bv;
            }
        }
        for ic in 0..ci {
            let xplane = &xp.data[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((oc * ci + ic) * kh + ky) * kw + kx];
                    if stride == 1 {
                        for oy in 0..ho {
                            let xrow = &xplane[(oy + ky) * wp + kx..(oy + ky) * wp + kx + wo];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            for (o, &xv) in orow.iter_mut().zip(xrow) {
                                *o = wv.mul_add(xv, *o);
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let base = (oy * stride + ky) * wp + kx;
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o = wv.mul_add(xplane[base + ox * stride], *o);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d`]: returns `(dx, dw, db)`.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let padded;
    let xp = if pad > 0 {
        padded = zero_pad(x, pad);
        &padded
    } else {
        x
    };
    let (hp, wp) = (xp.shape[1], xp.shape[2]);
    let (ho, wo) = (dy.shape[1], dy.shape[2]);

    let mut dw = Tensor::zeros(&[co, ci, kh, kw]);
    let mut db = Tensor::zeros(&[co]);
    let mut dxp = Tensor::zeros(&[ci, hp, wp]);

    // separate reduction (dw) and scatter (dx) passes so each inner loop
    // vectorizes on its own
    for oc in 0..co {
        let dyplane = &dy.data[oc * ho * wo..(oc + 1) * ho * wo];
        db.data[oc] = dyplane.iter().copied().sum();
        for ic in 0..ci {
            let xplane = &xp.data[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let acc = if stride == 1 {
                        let mut lanes = [F::zero(); LANES];
                        for oy in 0..ho {
                            let base = (oy + ky) * wp + kx;
                            fma_lanes(
                                &mut lanes,
                                &dyplane[oy * wo..(oy + 1) * wo],
                                &xplane[base..base + wo],
                            );
                        }
                        hsum(&lanes)
                    } else {
                        let mut acc = F::zero();
                        for oy in 0..ho {
                            let base = (oy * stride + ky) * wp + kx;
                            let dyrow = &dyplane[oy * wo..(oy + 1) * wo];
                            for (ox, &g) in dyrow.iter().enumerate() {
                                acc = g.mul_add(xplane[base + ox * stride], acc);
                            }
                        }
                        acc
                    };
                    dw.data[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
    for oc in 0..co {
        let dyplane = &dy.data[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..ci {
            let dxplane = &mut dxp.data[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data[((oc * ci + ic) * kh + ky) * kw + kx];
                    if stride == 1 {
                        for oy in 0..ho {
                            let base = (oy + ky) * wp + kx;
                            let dyrow = &dyplane[oy * wo..(oy + 1) * wo];
                            let dxrow = &mut dxplane[base..base + wo];
                            for (dx, &g) in dxrow.iter_mut().zip(dyrow) {
                                *dx = wv.mul_add(g, *dx);
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let base = (oy * stride + ky) * wp + kx;
                            let dyrow = &dyplane[oy * wo..(oy + 1) * wo];
                            for (ox, &g) in dyrow.iter().enumerate() {
                                dxp_scatter(dxplane, base + ox * stride, wv, g);
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = if pad > 0 {
        unpad_accumulate(&dxp, pad, h, wd)
    } else {
        dxp
    };
    (dx, dw, db)
}

#[inline(always)]
fn dxp_scatter<F: Scalar>(plane: &mut [F], idx: usize, wv: F, g: F) {
    plane[idx] = wv.mul_add(g, plane[idx]);
}

// ---------------------------------------------------------------------------
// Reflection padding (mirror about the edge pixel, i.e. pad(-1) = row 1)
// ---------------------------------------------------------------------------

fn reflect_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

/// Reflect-pad `x [C,H,W]` by `pad` pixels on every spatial side. Requires
/// `H,W >= 2` when `pad >= 1`.
pub fn pad_reflect<F: Scalar>(x: &Tensor<F>, pad: usize) -> Tensor<F> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h >= 2 && w >= 2, "reflect pad needs at least 2x2 input");
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..hp {
            let sy = reflect_idx(y as isize - pad as isize, h);
            for xcol in 0..wp {
                let sx = reflect_idx(xcol as isize - pad as isize, w);
                out.data[(ci * hp + y) * wp + xcol] = x.data[(ci * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Backward of [`pad_reflect`]: fold padded gradients back onto their sources.
pub fn pad_reflect_backward<F: Scalar>(
    dy: &Tensor<F>,
    pad: usize,
    h: usize,
    w: usize,
) -> Tensor<F> {
    let c = dy.shape[0];
    let (hp, wp) = (dy.shape[1], dy.shape[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..hp {
            let sy = reflect_idx(y as isize - pad as isize, h);
            for xcol in 0..wp {
                let sx = reflect_idx(xcol as isize - pad as isize, w);
                dx.data[(ci * h + sy) * w + sx] += dy.data[(ci * hp + y) * wp + xcol];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Patch rearrangement
// ---------------------------------------------------------------------------

/// Grid metadata needed to fold a patch sequence back into a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub p: usize,
    pub c: usize,
}

impl PatchGrid {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }
    pub fn d(&self) -> usize {
        self.p * self.p * self.c
    }
}

/// Rearrange `x [C,H,W]` into `[N, p*p*C]` patch rows. Row `k` holds patch
/// `(k / cols, k % cols)` flattened channel-major: index `c*p*p + py*p + px`.
pub fn patchify<F: Scalar>(x: &Tensor<F>, p: usize) -> (Tensor<F>, PatchGrid) {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(p >= 1 && h % p == 0 && w % p == 0, "patchify: p must divide H and W");
    let grid = PatchGrid {
        rows: h / p,
        cols: w / p,
        p,
        c,
    };
    let (n, d) = (grid.n(), grid.d());
    let mut out = Tensor::zeros(&[n, d]);
    for k in 0..n {
        let (r, q) = (k / grid.cols, k % grid.cols);
        let row = &mut out.data[k * d..(k + 1) * d];
        for ci in 0..c {
            for py in 0..p {
                let src = (ci * h + r * p + py) * w + q * p;
                let dst = ci * p * p + py * p;
                row[dst..dst + p].copy_from_slice(&x.data[src..src + p]);
            }
        }
    }
    (out, grid)
}

/// Exact inverse of [`patchify`].
pub fn fold<F: Scalar>(s: &Tensor<F>, grid: PatchGrid) -> Tensor<F> {
    let (n, d) = (s.shape[0], s.shape[1]);
    assert_eq!(n, grid.n(), "fold: row count {} vs grid {}", n, grid.n());
    assert_eq!(d, grid.d(), "fold: row width {} vs grid {}", d, grid.d());
    let (c, p) = (grid.c, grid.p);
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut out = Tensor::zeros(&[c, h, w]);
    for k in 0..n {
        let (r, q) = (k / grid.cols, k % grid.cols);
        let row = &s.data[k * d..(k + 1) * d];
        for ci in 0..c {
            for py in 0..p {
                let dst = (ci * h + r * p + py) * w + q * p;
                let src = ci * p * p + py * p;
                out.data[dst..dst + p].copy_from_slice(&row[src..src + p]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling; requires even spatial dims.
pub fn avg_pool2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = F::from_f64(0.25);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ci in 0..c {
        for oy in 0..ho {
            let r0 = &x.data[(ci * h + 2 * oy) * w..(ci * h + 2 * oy + 1) * w];
            let r1 = &x.data[(ci * h + 2 * oy + 1) * w..(ci * h + 2 * oy + 2) * w];
            let orow = &mut out.data[(ci * ho + oy) * wo..(ci * ho + oy + 1) * wo];
            for (ox, o) in orow.iter_mut().enumerate() {
                *o = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (c, ho, wo) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let (h, w) = (ho * 2, wo * 2);
    let quarter = F::from_f64(0.25);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy.data[(ci * ho + oy) * wo + ox] * quarter;
                dx.data[(ci * h + 2 * oy) * w + 2 * ox] += g;
                dx.data[(ci * h + 2 * oy) * w + 2 * ox + 1] += g;
                dx.data[(ci * h + 2 * oy + 1) * w + 2 * ox] += g;
                dx.data[(ci * h + 2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
    dx
}

/// Per-axis source taps for x2 bilinear interpolation (align_corners=false,
/// edge-clamped). Output index `o` samples `w0*in[i0] + w1*in[i1]`.
fn bilinear2_taps<F: Scalar>(n_in: usize) -> Vec<(usize, usize, F, F)> {
    let w75 = F::from_f64(0.75);
    let w25 = F::from_f64(0.25);
    (0..2 * n_in)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                let left = i.saturating_sub(1);
                (left, i, w25, w75)
            } else {
                let right = (i + 1).min(n_in - 1);
                (i, right, w75, w25)
            }
        })
        .collect()
}

/// Bilinear x2 upsampling of `x [C,H,W]` -> `[C,2H,2W]`.
pub fn upsample_bilinear2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let rows = bilinear2_taps::<F>(h);
    let cols = bilinear2_taps::<F>(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
            let r0 = &x.data[(ci * h + y0) * w..(ci * h + y0 + 1) * w];
            let r1 = &x.data[(ci * h + y1) * w..(ci * h + y1 + 1) * w];
            let orow = &mut out.data[(ci * ho + oy) * wo..(ci * ho + oy + 1) * wo];
            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                orow[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (c, ho, wo) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let (h, w) = (ho / 2, wo / 2);
    let rows = bilinear2_taps::<F>(h);
    let cols = bilinear2_taps::<F>(w);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
            let dyrow = &dy.data[(ci * ho + oy) * wo..(ci * ho + oy + 1) * wo];
            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                let g = dyrow[ox];
                dx.data[(ci * h + y0) * w + x0] += wy0 * wx0 * g;
                dx.data[(ci * h + y0) * w + x1] += wy0 * wx1 * g;
                dx.data[(ci * h + y1) * w + x0] += wy1 * wx0 * g;
                dx.data[(ci * h + y1) * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax of `x [N,M]`, computed with max-subtraction.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, m) = (x.shape[0], x.shape[1]);
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(m) {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let _ = n;
    out
}

/// Backward of row softmax: `dx = y * (dy - sum(dy * y))` per row.
pub fn softmax_rows_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let m = y.shape[1];
    let mut dx = Tensor::zeros(y.shape());
    for ((yrow, dyrow), dxrow) in y
        .data
        .chunks_exact(m)
        .zip(dy.data.chunks_exact(m))
        .zip(dx.data.chunks_exact_mut(m))
    {
        let dot: F = yrow.iter().zip(dyrow).map(|(&a, &b)| a * b).sum();
        for ((&yv, &gv), dxv) in yrow.iter().zip(dyrow).zip(dxrow.iter_mut()) {
            *dxv = yv * (gv - dot);
        }
    }
    dx
}
