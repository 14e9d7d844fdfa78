//! Fusion-quality metrics over 8-bit-scale grayscale images: entropy,
//! spatial frequency, standard deviation, sum of correlation differences,
//! pixel-domain visual information fidelity, and edge-transfer quality.
//!
//! All functions take `[H,W]` tensors with intensities on the 0..255 scale.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, pad_reflect, Tensor};

/// One image's metric values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricValues {
    pub en: f64,
    pub sf: f64,
    pub sd: f64,
    pub scd: f64,
    pub vif: f64,
    pub qabf: f64,
}

/// Per-image and aggregate metric values.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub per_image: Vec<(String, MetricValues)>,
    pub mean: MetricValues,
}

impl MetricReport {
    pub fn from_entries(per_image: Vec<(String, MetricValues)>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mut mean = MetricValues::default();
        for (_, v) in &per_image {
            mean.en += v.en / n;
            mean.sf += v.sf / n;
            mean.sd += v.sd / n;
            mean.scd += v.scd / n;
            mean.vif += v.vif / n;
            mean.qabf += v.qabf / n;
        }
        Self { per_image, mean }
    }

    /// Line-oriented text report; field names match the usual fusion
    /// benchmark column headers.
    pub fn format(&self) -> String {
        let mut s = String::new();
        let line = |out: &mut String, tag: &str, v: &MetricValues| {
            writeln!(
                out,
                "{tag} EN={:.4} SF={:.4} SD={:.4} SCD={:.4} VIF={:.4} Qabf={:.4}",
                v.en, v.sf, v.sd, v.scd, v.vif, v.qabf
            )
            .expect("string write");
        };
        for (id, v) in &self.per_image {
            line(&mut s, &format!("image={id}"), v);
        }
        line(&mut s, &format!("aggregate n={}", self.per_image.len()), &self.mean);
        s
    }
}

fn check_2d(img: &Tensor<f64>) -> Result<(usize, usize)> {
    if img.shape().len() != 2 || img.numel() == 0 {
        return Err(Error::Shape(format!(
            "metric input must be a nonempty HxW image, got {:?}",
            img.shape()
        )));
    }
    Ok((img.shape()[0], img.shape()[1]))
}

// ---------------------------------------------------------------------------
// Single-image metrics
// ---------------------------------------------------------------------------

/// Shannon entropy (bits) of the 256-bin histogram of the 8-bit quantized
/// image.
pub fn en(img: &Tensor<f64>) -> Result<f64> {
    check_2d(img)?;
    let mut hist = [0u64; 256];
    for &v in img.data() {
        let q = v.round().clamp(0.0, 255.0) as usize;
        hist[q] += 1;
    }
    let n = img.numel() as f64;
    let mut h = 0.0;
    for &c in &hist {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    Ok(h)
}

/// Spatial frequency: `sqrt(RF^2 + CF^2)` where RF/CF are the root mean
/// square of horizontal/vertical first differences over all H*W pixels.
pub fn sf(img: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_2d(img)?;
    let mut rf = 0.0;
    let mut cf = 0.0;
    for y in 0..h {
        for x in 1..w {
            let d = img.data()[y * w + x] - img.data()[y * w + x - 1];
            rf += d * d;
        }
    }
    for y in 1..h {
        for x in 0..w {
            let d = img.data()[y * w + x] - img.data()[(y - 1) * w + x];
            cf += d * d;
        }
    }
    let n = (h * w) as f64;
    Ok((rf / n + cf / n).sqrt())
}

/// Population standard deviation of intensities.
pub fn sd(img: &Tensor<f64>) -> Result<f64> {
    check_2d(img)?;
    let n = img.numel() as f64;
    let mean = img.data().iter().sum::<f64>() / n;
    let var = img.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Pearson correlation; `None` when either operand has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 1e-12 || vb <= 1e-12 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Sum of correlation differences: `corr(f-b, a-b) + corr(f-a, b-a)`.
/// A zero-variance operand makes its term contribute 0.
pub fn scd(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_2d(f)?;
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::Shape("scd operands must share dims".into()));
    }
    let fb: Vec<f64> = f.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let ab: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let fa: Vec<f64> = f.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
    let ba: Vec<f64> = b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect();
    let t1 = pearson(&fb, &ab).unwrap_or(0.0);
    let t2 = pearson(&fa, &ba).unwrap_or(0.0);
    Ok(t1 + t2)
}

// ---------------------------------------------------------------------------
// VIF (pixel domain, Gaussian scale mixture, 4 subband scales)
// ---------------------------------------------------------------------------

fn gaussian_kernel(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-(i as f64 - c) * (i as f64 - c) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable valid-mode filtering with a 1-D kernel applied to rows then
/// columns.
fn filter_valid(img: &Tensor<f64>, k: &[f64]) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let n = k.len();
    let wo = w + 1 - n;
    let mut rows = Tensor::zeros(&[h, wo]);
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img.data()[y * w + x + i];
            }
            rows.data_mut()[y * wo + x] = acc;
        }
    }
    let ho = h + 1 - n;
    let mut out = Tensor::zeros(&[ho, wo]);
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows.data()[(y + i) * wo + x];
            }
            out.data_mut()[y * wo + x] = acc;
        }
    }
    out
}

fn downsample2(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[ho, wo]);
    for y in 0..ho {
        for x in 0..wo {
            out.data_mut()[y * wo + x] = img.data()[2 * y * w + 2 * x];
        }
    }
    out
}

/// Pixel-domain VIF of a distorted image against one reference.
fn vif_single(reference: &Tensor<f64>, distorted: &Tensor<f64>) -> f64 {
    const SIGMA_N_SQ: f64 = 2.0;
    const EPS: f64 = 1e-10;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut r = reference.clone();
    let mut d = distorted.clone();
    for scale in 1..=4usize {
        let n = (1usize << (4 - scale + 1)) + 1;
        if r.shape()[0] < n || r.shape()[1] < n {
            break; // image too small for this and any finer scale
        }
        let k = gaussian_kernel(n);
        if scale > 1 {
            r = downsample2(&filter_valid(&r, &k));
            d = downsample2(&filter_valid(&d, &k));
            if r.shape()[0] < n || r.shape()[1] < n {
                break;
            }
        }
        let mu1 = filter_valid(&r, &k);
        let mu2 = filter_valid(&d, &k);
        let rr = filter_valid(&r.zip(&r, |a, b| a * b), &k);
        let dd = filter_valid(&d.zip(&d, |a, b| a * b), &k);
        let rd = filter_valid(&r.zip(&d, |a, b| a * b), &k);
        for i in 0..mu1.numel() {
            let m1 = mu1.data()[i];
            let m2 = mu2.data()[i];
            let mut s1 = (rr.data()[i] - m1 * m1).max(0.0);
            let s2 = (dd.data()[i] - m2 * m2).max(0.0);
            let s12 = rd.data()[i] - m1 * m2;
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + SIGMA_N_SQ)).log10();
            den += (1.0 + s1 / SIGMA_N_SQ).log10();
        }
    }
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Visual information fidelity of the fused image, averaged over the two
/// sources.
pub fn vif(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_2d(f)?;
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::Shape("vif operands must share dims".into()));
    }
    if h < 17 || w < 17 {
        return Err(Error::Shape(format!(
            "vif needs at least 17x17 images, got {h}x{w}"
        )));
    }
    Ok((vif_single(a, f) + vif_single(b, f)) / 2.0)
}

// ---------------------------------------------------------------------------
// Edge-transfer quality
// ---------------------------------------------------------------------------

/// Sigmoid constants of the edge-strength and orientation preservation
/// terms. Chosen so identical edge maps score ~0.9985 (strength
/// 1/(1+e^(-7.5)) times orientation 1/(1+e^(-7))) while zero transfer
/// scores ~5e-4.
pub mod qabf_params {
    pub const K_G: f64 = -15.0;
    pub const S_G: f64 = 0.5;
    pub const K_A: f64 = -35.0;
    pub const S_A: f64 = 0.8;
}

fn sobel_pair(img: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let chw = Tensor::new(&[1, h, w], img.data().to_vec());
    let padded = pad_reflect(&chw, 1);
    let kx = Tensor::new(
        &[1, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    );
    let ky = Tensor::new(
        &[1, 1, 3, 3],
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    );
    let gx = conv2d(&padded, &kx, None, 1, 0);
    let gy = conv2d(&padded, &ky, None, 1, 0);
    (
        Tensor::new(&[h, w], gx.data().to_vec()),
        Tensor::new(&[h, w], gy.data().to_vec()),
    )
}

fn edge_strength_orientation(img: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel_pair(img);
    let strength: Vec<f64> = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .collect();
    let orient: Vec<f64> = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&x, &y)| {
            if x == 0.0 && y == 0.0 {
                0.0
            } else if x == 0.0 {
                std::f64::consts::FRAC_PI_2 * y.signum()
            } else {
                (y / x).atan()
            }
        })
        .collect();
    (strength, orient)
}

fn edge_preservation(g_s: f64, a_s: f64, g_f: f64, a_f: f64) -> f64 {
    use qabf_params::*;
    // relative strength, always <= 1
    let g_rel = if g_s == 0.0 && g_f == 0.0 {
        1.0
    } else if g_f > g_s {
        g_s / g_f
    } else {
        g_f / g_s.max(1e-12)
    };
    let q_g = 1.0 / (1.0 + (K_G * (g_rel - S_G)).exp());
    let a_rel = 1.0 - (a_s - a_f).abs() / std::f64::consts::FRAC_PI_2;
    let q_a = 1.0 / (1.0 + (K_A * (a_rel - S_A)).exp());
    q_g * q_a
}

/// Edge-transfer quality: per-pixel strength/orientation preservation from
/// each source to the fused image, weighted by source edge strength.
pub fn qabf(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_2d(f)?;
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::Shape("qabf operands must share dims".into()));
    }
    let (gf, af) = edge_strength_orientation(f);
    let (ga, aa) = edge_strength_orientation(a);
    let (gb, ab) = edge_strength_orientation(b);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        let qaf = edge_preservation(ga[i], aa[i], gf[i], af[i]);
        let qbf = edge_preservation(gb[i], ab[i], gf[i], af[i]);
        num += qaf * ga[i] + qbf * gb[i];
        den += ga[i] + gb[i];
    }
    if den <= 0.0 {
        Ok(0.0)
    } else {
        Ok(num / den)
    }
}

/// All six metrics for one fused image and its sources.
pub fn evaluate_image(f: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<MetricValues> {
    Ok(MetricValues {
        en: en(f)?,
        sf: sf(f)?,
        sd: sd(f)?,
        scd: scd(f, a, b)?,
        vif: vif(f, a, b)?,
        qabf: qabf(f, a, b)?,
    })
}
