//! The joint training objective: Sobel gradient operator, global and
//! box-localized fusion losses against max-of-sources targets, the simplified
//! detection loss, and their weighted combinations.

use crate::data::{gamma_correct_norm, BoxAnnotation};
use crate::detect::{CLS, OBJ, TH, TW, TX, TY};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Loss weights. `object_weight` balances global vs box-localized fusion
/// terms, `intensity_weight` balances gradient vs intensity inside the global
/// term, `object_intensity_weight` does the same inside the object term,
/// `gamma` is the LWIR contrast exponent and `det_weight` balances fusion vs
/// detection in the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub object_weight: f64,
    pub intensity_weight: f64,
    pub object_intensity_weight: f64,
    pub gamma: f64,
    pub det_weight: f64,
    pub sobel_l2: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            object_weight: 0.2,
            intensity_weight: 0.5,
            object_intensity_weight: 0.5,
            gamma: 2.0,
            det_weight: 0.5,
            sobel_l2: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("object_weight", self.object_weight),
            ("intensity_weight", self.intensity_weight),
            ("object_intensity_weight", self.object_intensity_weight),
            ("det_weight", self.det_weight),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.gamma <= 0.0 {
            return Err(Error::Parameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Per-component values of one loss evaluation, for logging and tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_f: f64,
    pub l_det: f64,
    pub l_global: f64,
    pub l_object: f64,
    pub l_grad_g: f64,
    pub l_int_g: f64,
    pub l_grad_o: f64,
    pub l_int_o: f64,
    pub skipped_boxes: usize,
}

// ---------------------------------------------------------------------------
// Sobel
// ---------------------------------------------------------------------------

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sobel gradient magnitude of a `[1,H,W]` node with reflect padding.
/// L1 combination `|gx| + |gy|` by default; `l2` switches to
/// `sqrt(gx^2 + gy^2)`.
pub fn sobel_mag_g<F: Scalar>(g: &mut Graph<F>, x: NodeId, l2: bool) -> NodeId {
    let kx = g.constant(Tensor::new(
        &[1, 1, 3, 3],
        SOBEL_X.iter().map(|&v| F::from_f64(v)).collect(),
    ));
    let ky = g.constant(Tensor::new(
        &[1, 1, 3, 3],
        SOBEL_Y.iter().map(|&v| F::from_f64(v)).collect(),
    ));
    let padded = g.pad_reflect(x, 1);
    let gx = g.conv2d(padded, kx, None, 1, 0);
    let gy = g.conv2d(padded, ky, None, 1, 0);
    if l2 {
        let gx2 = g.mul(gx, gx);
        let gy2 = g.mul(gy, gy);
        let sum = g.add(gx2, gy2);
        g.sqrt_eps(sum)
    } else {
        let ax = g.abs(gx);
        let ay = g.abs(gy);
        g.add(ax, ay)
    }
}

/// Sobel gradient magnitude of a `[H,W]` image (pure).
pub fn sobel_grad(img: &Tensor<f64>, l2: bool) -> Tensor<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let chw = Tensor::new(&[1, h, w], img.data().to_vec());
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(chw);
    let m = sobel_mag_g(&mut g, x, l2);
    let out = g.value(m);
    Tensor::new(&[h, w], out.data().to_vec())
}

// ---------------------------------------------------------------------------
// Fusion loss targets (constants w.r.t. the network)
// ---------------------------------------------------------------------------

/// Precomputed constants the fusion loss compares against. The global
/// intensity target is `max(I_SW, I_th)` with `I_th = (I_SW + I_LW^gamma)/2`;
/// per-box targets use the unmodified LWIR. With `oe` disabled both targets
/// collapse to plain `max(I_SW, I_LW)` and the box list empties.
pub struct FusionTargets {
    pub int_global: Tensor<f64>,
    pub grad_global: Tensor<f64>,
    pub boxes: Vec<BoxTarget>,
    pub skipped_boxes: usize,
}

pub struct BoxTarget {
    /// Pixel rect (x0, y0, w, h) on the full image.
    pub rect: (usize, usize, usize, usize),
    pub int_crop: Tensor<f64>,
    pub grad_crop: Tensor<f64>,
}

fn crop2(img: &Tensor<f64>, rect: (usize, usize, usize, usize)) -> Tensor<f64> {
    let (x0, y0, w, h) = rect;
    let iw = img.shape()[1];
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        let src = (y0 + y) * iw + x0;
        out.data_mut()[y * w..(y + 1) * w].copy_from_slice(&img.data()[src..src + w]);
    }
    out
}

/// Build the loss targets from normalized `[H,W]` source images.
pub fn fusion_targets(
    i_sw: &Tensor<f64>,
    i_lw: &Tensor<f64>,
    boxes: &[BoxAnnotation],
    cfg: &LossConfig,
    oe: bool,
) -> Result<FusionTargets> {
    if i_sw.shape() != i_lw.shape() {
        return Err(Error::Shape(format!(
            "source images differ: {:?} vs {:?}",
            i_sw.shape(),
            i_lw.shape()
        )));
    }
    cfg.validate()?;
    let (h, w) = (i_sw.shape()[0], i_sw.shape()[1]);

    let reference = if oe {
        gamma_correct_norm(i_lw, cfg.gamma)?
            .zip(i_sw, |lwg, sw| (sw + lwg) / 2.0)
    } else {
        i_lw.clone()
    };
    let int_global = i_sw.max_elem(&reference);
    let grad_global = sobel_grad(i_sw, cfg.sobel_l2).max_elem(&sobel_grad(&reference, cfg.sobel_l2));

    let mut box_targets = Vec::new();
    let mut skipped = 0usize;
    if oe {
        for b in boxes {
            let rect = b.pixel_rect(w, h);
            if rect.2 <= 1 || rect.3 <= 1 {
                skipped += 1;
                continue;
            }
            let sw_crop = crop2(i_sw, rect);
            let lw_crop = crop2(i_lw, rect);
            let int_crop = sw_crop.max_elem(&lw_crop);
            let grad_crop =
                sobel_grad(&sw_crop, cfg.sobel_l2).max_elem(&sobel_grad(&lw_crop, cfg.sobel_l2));
            box_targets.push(BoxTarget {
                rect,
                int_crop,
                grad_crop,
            });
        }
    }
    Ok(FusionTargets {
        int_global,
        grad_global,
        boxes: box_targets,
        skipped_boxes: skipped,
    })
}

// ---------------------------------------------------------------------------
// Fusion loss (graph)
// ---------------------------------------------------------------------------

/// Scalar nodes of one fusion-loss evaluation.
pub struct FusionLossNodes {
    pub l_f: NodeId,
    pub l_global: NodeId,
    pub l_object: NodeId,
    pub l_grad_g: NodeId,
    pub l_int_g: NodeId,
    pub l_grad_o: NodeId,
    pub l_int_o: NodeId,
}

fn to_chw<F: Scalar>(t: &Tensor<f64>) -> Tensor<F> {
    let shaped = Tensor::new(
        &[1, t.shape()[0], t.shape()[1]],
        t.data().iter().map(|&v| F::from_f64(v)).collect(),
    );
    shaped
}

fn mean_abs_diff<F: Scalar>(g: &mut Graph<F>, a: NodeId, b: NodeId) -> NodeId {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean_all(ad)
}

/// Build the fusion loss over the fused-image node `i_f` (`[1,H,W]`).
pub fn fusion_loss_g<F: Scalar>(
    g: &mut Graph<F>,
    i_f: NodeId,
    targets: &FusionTargets,
    cfg: &LossConfig,
) -> Result<FusionLossNodes> {
    let shape = g.value(i_f).shape().to_vec();
    if shape.len() != 3
        || shape[0] != 1
        || shape[1] != targets.int_global.shape()[0]
        || shape[2] != targets.int_global.shape()[1]
    {
        return Err(Error::Shape(format!(
            "fused image {:?} does not match targets {:?}",
            shape,
            targets.int_global.shape()
        )));
    }
    let alpha = F::from_f64(cfg.intensity_weight);
    let beta = F::from_f64(cfg.object_intensity_weight);
    let sigma = F::from_f64(cfg.object_weight);
    let one = F::one();

    // global terms
    let int_target = g.constant(to_chw::<F>(&targets.int_global));
    let grad_target = g.constant(to_chw::<F>(&targets.grad_global));
    let grad_f = sobel_mag_g(g, i_f, cfg.sobel_l2);
    let l_grad_g = mean_abs_diff(g, grad_f, grad_target);
    let l_int_g = mean_abs_diff(g, i_f, int_target);
    let wg = g.scale(l_grad_g, one - alpha);
    let wi = g.scale(l_int_g, alpha);
    let l_global = g.add(wg, wi);

    // object terms, averaged over processed boxes
    let (l_grad_o, l_int_o) = if targets.boxes.is_empty() {
        let z1 = g.constant(Tensor::scalar(F::zero()));
        let z2 = g.constant(Tensor::scalar(F::zero()));
        (z1, z2)
    } else {
        let mut grad_acc: Option<NodeId> = None;
        let mut int_acc: Option<NodeId> = None;
        for bt in &targets.boxes {
            let (x0, y0, w, h) = bt.rect;
            let crop = g.crop2d(i_f, y0, x0, h, w);
            let grad_crop = sobel_mag_g(g, crop, cfg.sobel_l2);
            let gt = g.constant(to_chw::<F>(&bt.grad_crop));
            let it = g.constant(to_chw::<F>(&bt.int_crop));
            let lg = mean_abs_diff(g, grad_crop, gt);
            let li = mean_abs_diff(g, crop, it);
            grad_acc = Some(match grad_acc {
                Some(a) => g.add(a, lg),
                None => lg,
            });
            int_acc = Some(match int_acc {
                Some(a) => g.add(a, li),
                None => li,
            });
        }
        let inv_n = F::from_f64(1.0 / targets.boxes.len() as f64);
        let lg = g.scale(grad_acc.unwrap(), inv_n);
        let li = g.scale(int_acc.unwrap(), inv_n);
        (lg, li)
    };
    let wgo = g.scale(l_grad_o, one - beta);
    let wio = g.scale(l_int_o, beta);
    let l_object = g.add(wgo, wio);

    let wglobal = g.scale(l_global, one - sigma);
    let wobject = g.scale(l_object, sigma);
    let l_f = g.add(wglobal, wobject);

    Ok(FusionLossNodes {
        l_f,
        l_global,
        l_object,
        l_grad_g,
        l_int_g,
        l_grad_o,
        l_int_o,
    })
}

// ---------------------------------------------------------------------------
// Detection loss (graph)
// ---------------------------------------------------------------------------

/// Cell assignment of one ground-truth box at one scale.
struct Positive {
    scale: usize,
    gy: usize,
    gx: usize,
    gt: BoxAnnotation,
}

fn assign_positives(grids: &[(usize, usize)], boxes: &[BoxAnnotation]) -> Vec<Positive> {
    let mut out = Vec::new();
    for (scale, &(gh, gw)) in grids.iter().enumerate() {
        let mut taken = vec![false; gh * gw];
        for b in boxes {
            let gx = ((b.cx * gw as f64).floor() as usize).min(gw - 1);
            let gy = ((b.cy * gh as f64).floor() as usize).min(gh - 1);
            if taken[gy * gw + gx] {
                continue; // first box claims the cell at this scale
            }
            taken[gy * gw + gx] = true;
            out.push(Positive {
                scale,
                gy,
                gx,
                gt: *b,
            });
        }
    }
    out
}

/// Differentiable IoU of the decoded cell prediction against a constant
/// ground-truth box, built from scalar graph ops.
fn iou_node<F: Scalar>(
    g: &mut Graph<F>,
    raw: NodeId,
    gy: usize,
    gx: usize,
    gt: &BoxAnnotation,
) -> NodeId {
    let shape = g.value(raw).shape().to_vec();
    let (gh, gw) = (shape[1], shape[2]);
    let tx = g.gather_cell(raw, TX, gy, gx);
    let ty = g.gather_cell(raw, TY, gy, gx);
    let tw = g.gather_cell(raw, TW, gy, gx);
    let th = g.gather_cell(raw, TH, gy, gx);

    let sx = g.sigmoid(tx);
    let sy = g.sigmoid(ty);
    let cx_off = g.constant(Tensor::scalar(F::from_f64(gx as f64)));
    let cy_off = g.constant(Tensor::scalar(F::from_f64(gy as f64)));
    let cx_sum = g.add(sx, cx_off);
    let cy_sum = g.add(sy, cy_off);
    let cx = g.scale(cx_sum, F::from_f64(1.0 / gw as f64));
    let cy = g.scale(cy_sum, F::from_f64(1.0 / gh as f64));
    let w = g.exp(tw);
    let h = g.exp(th);

    let half = F::from_f64(0.5);
    let wh = g.scale(w, half);
    let hh = g.scale(h, half);
    let px0 = g.sub(cx, wh);
    let px1 = g.add(cx, wh);
    let py0 = g.sub(cy, hh);
    let py1 = g.add(cy, hh);

    let gx0 = g.constant(Tensor::scalar(F::from_f64(gt.cx - gt.w / 2.0)));
    let gx1 = g.constant(Tensor::scalar(F::from_f64(gt.cx + gt.w / 2.0)));
    let gy0 = g.constant(Tensor::scalar(F::from_f64(gt.cy - gt.h / 2.0)));
    let gy1 = g.constant(Tensor::scalar(F::from_f64(gt.cy + gt.h / 2.0)));

    let ix0 = g.maximum(px0, gx0);
    let ix1 = g.minimum(px1, gx1);
    let iy0 = g.maximum(py0, gy0);
    let iy1 = g.minimum(py1, gy1);
    let iw_raw = g.sub(ix1, ix0);
    let ih_raw = g.sub(iy1, iy0);
    let iw = g.relu(iw_raw);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih);

    let area_p = g.mul(w, h);
    let area_g = g.constant(Tensor::scalar(F::from_f64(gt.w * gt.h)));
    let sum_areas = g.add(area_p, area_g);
    let union = g.sub(sum_areas, inter);
    let eps = g.constant(Tensor::scalar(F::from_f64(1e-9)));
    let union_safe = g.add(union, eps);
    g.div(inter, union_safe)
}

/// Detection loss over raw per-scale predictions: objectness BCE over all
/// cells, plus `1 - IoU` box loss and class BCE on positive cells, the sum
/// normalized by the positive count (at least 1).
pub fn det_loss_g<F: Scalar>(
    g: &mut Graph<F>,
    raws: &[NodeId; 3],
    boxes: &[BoxAnnotation],
) -> NodeId {
    let grids: Vec<(usize, usize)> = raws
        .iter()
        .map(|&r| {
            let s = g.value(r).shape();
            (s[1], s[2])
        })
        .collect();
    let positives = assign_positives(&grids, boxes);
    let n_pos = positives.len().max(1);

    let mut acc: Option<NodeId> = None;
    let add_term = |g: &mut Graph<F>, term: NodeId, acc: &mut Option<NodeId>| {
        *acc = Some(match *acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    };

    for (scale, &raw) in raws.iter().enumerate() {
        let (gh, gw) = grids[scale];
        let shape = g.value(raw).shape().to_vec();
        // objectness targets/weights over the whole tensor; only the OBJ
        // channel carries weight
        let mut targets = Tensor::zeros(&shape);
        let mut weights = Tensor::zeros(&shape);
        for y in 0..gh {
            for x in 0..gw {
                weights.data_mut()[(OBJ * gh + y) * gw + x] = F::one();
            }
        }
        for p in positives.iter().filter(|p| p.scale == scale) {
            targets.data_mut()[(OBJ * gh + p.gy) * gw + p.gx] = F::one();
            // class BCE on positives, single ship class
            targets.data_mut()[(CLS * gh + p.gy) * gw + p.gx] = F::one();
            weights.data_mut()[(CLS * gh + p.gy) * gw + p.gx] = F::one();
        }
        let bce = g.bce_sum(raw, targets, weights);
        add_term(g, bce, &mut acc);
    }

    for p in &positives {
        let iou = iou_node(g, raws[p.scale], p.gy, p.gx, &p.gt);
        let one = g.constant(Tensor::scalar(F::one()));
        let box_loss = g.sub(one, iou);
        add_term(g, box_loss, &mut acc);
    }

    let total = acc.expect("at least one scale");
    g.scale(total, F::from_f64(1.0 / n_pos as f64))
}

/// Convex combination of the fusion and detection losses.
pub fn total_loss_g<F: Scalar>(
    g: &mut Graph<F>,
    l_f: NodeId,
    l_det: NodeId,
    det_weight: f64,
) -> NodeId {
    let a = g.scale(l_f, F::from_f64(1.0 - det_weight));
    let b = g.scale(l_det, F::from_f64(det_weight));
    g.add(a, b)
}

/// Plain-value convex combination.
pub fn total_loss(l_f: f64, l_det: f64, det_weight: f64) -> f64 {
    (1.0 - det_weight) * l_f + det_weight * l_det
}

// ---------------------------------------------------------------------------
// Pure wrappers over plain images (scratch graphs)
// ---------------------------------------------------------------------------

/// Global fusion loss of a fused image against its sources.
/// Returns `(l_global, l_grad_g, l_int_g)`.
pub fn global_loss(
    i_f: &Tensor<f64>,
    i_sw: &Tensor<f64>,
    i_lw: &Tensor<f64>,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64)> {
    let targets = fusion_targets(i_sw, i_lw, &[], cfg, true)?;
    let mut g: Graph<f64> = Graph::new();
    let f = g.constant(to_chw::<f64>(i_f));
    let nodes = fusion_loss_g(&mut g, f, &targets, cfg)?;
    Ok((
        g.scalar_value(nodes.l_global),
        g.scalar_value(nodes.l_grad_g),
        g.scalar_value(nodes.l_int_g),
    ))
}

/// Box-localized fusion loss. Returns `(l_object, l_grad_o, l_int_o, skipped)`.
pub fn object_loss(
    i_f: &Tensor<f64>,
    i_sw: &Tensor<f64>,
    i_lw: &Tensor<f64>,
    boxes: &[BoxAnnotation],
    cfg: &LossConfig,
) -> Result<(f64, f64, f64, usize)> {
    let targets = fusion_targets(i_sw, i_lw, boxes, cfg, true)?;
    let mut g: Graph<f64> = Graph::new();
    let f = g.constant(to_chw::<f64>(i_f));
    let nodes = fusion_loss_g(&mut g, f, &targets, cfg)?;
    Ok((
        g.scalar_value(nodes.l_object),
        g.scalar_value(nodes.l_grad_o),
        g.scalar_value(nodes.l_int_o),
        targets.skipped_boxes,
    ))
}

/// Full fusion loss. Returns the scalar and its component breakdown
/// (detection fields zeroed).
pub fn oe_loss(
    i_f: &Tensor<f64>,
    i_sw: &Tensor<f64>,
    i_lw: &Tensor<f64>,
    boxes: &[BoxAnnotation],
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown)> {
    let targets = fusion_targets(i_sw, i_lw, boxes, cfg, true)?;
    let mut g: Graph<f64> = Graph::new();
    let f = g.constant(to_chw::<f64>(i_f));
    let nodes = fusion_loss_g(&mut g, f, &targets, cfg)?;
    let breakdown = LossBreakdown {
        total: g.scalar_value(nodes.l_f),
        l_f: g.scalar_value(nodes.l_f),
        l_det: 0.0,
        l_global: g.scalar_value(nodes.l_global),
        l_object: g.scalar_value(nodes.l_object),
        l_grad_g: g.scalar_value(nodes.l_grad_g),
        l_int_g: g.scalar_value(nodes.l_int_g),
        l_grad_o: g.scalar_value(nodes.l_grad_o),
        l_int_o: g.scalar_value(nodes.l_int_o),
        skipped_boxes: targets.skipped_boxes,
    };
    Ok((breakdown.l_f, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::seeded_rng;
    use rand::Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn sobel_constant_is_zero() {
        // zero image: exactly zero; nonzero constant: zero up to roundoff
        let zero = Tensor::zeros(&[6, 7]);
        assert!(sobel_grad(&zero, false).data().iter().all(|&v| v == 0.0));
        let img = Tensor::full(&[6, 7], 0.42);
        let m = sobel_grad(&img, false);
        assert!(m.data().iter().all(|&v| v < 1e-12));
        let m2 = sobel_grad(&img, true);
        assert!(m2.data().iter().all(|&v| v < 1e-5));
    }

    #[test]
    fn sobel_step_edge_magnitude_four() {
        // vertical step of height 1: ... 0 0 | 1 1 ...
        let (h, w) = (6, 8);
        let mut img = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 4..w {
                img.data_mut()[y * w + x] = 1.0;
            }
        }
        let m = sobel_grad(&img, false);
        // direct 3x3 correlation oracle with reflect padding
        let at = |y: isize, x: isize| -> f64 {
            let yy = y.clamp(0, h as isize - 1); // reflect == clamp for this image
            let xx = if x < 0 {
                -x
            } else if x >= w as isize {
                2 * (w as isize - 1) - x
            } else {
                x
            };
            img.data()[yy as usize * w + xx as usize]
        };
        for y in 0..h {
            for x in 0..w {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = at(y as isize + ky - 1, x as isize + kx - 1);
                        gx += SOBEL_X[(ky * 3 + kx) as usize] * v;
                        gy += SOBEL_Y[(ky * 3 + kx) as usize] * v;
                    }
                }
                let expect = gx.abs() + gy.abs();
                let got = m.data()[y * w + x];
                assert!((got - expect).abs() < 1e-12);
            }
        }
        // the two columns adjacent to the step carry magnitude 4
        for y in 0..h {
            assert_eq!(m.data()[y * w + 3], 4.0);
            assert_eq!(m.data()[y * w + 4], 4.0);
        }
        // nonnegative everywhere
        assert!(m.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn global_loss_zero_on_matching_target() {
        let sw = rand_img(8, 8, 1);
        let lw = rand_img(8, 8, 2);
        let c = cfg();
        let targets = fusion_targets(&sw, &lw, &[], &c, true).unwrap();
        // i_f equal to the intensity target: intensity term vanishes; use a
        // fused image equal to the target so gradients also match only if the
        // gradient of the max equals the max of gradients -- not generally
        // true, so check the documented zero case on constants instead.
        let (_l, _lg, li) = global_loss(&targets.int_global, &sw, &lw, &c).unwrap();
        assert!(li < 1e-15, "intensity term must vanish, got {li}");

        // constants: everything zero
        let z = Tensor::zeros(&[8, 8]);
        let (l, lg, li) = global_loss(&z, &z, &z, &c).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(lg, 0.0);
        assert_eq!(li, 0.0);
    }

    #[test]
    fn global_loss_constant_case_closed_form() {
        // I_f = 0, I_SW = 0.5 constant, I_LW = 0, alpha = 0.5:
        // I_th = (0.5 + 0)/2 = 0.25, target = max(0.5, 0.25) = 0.5,
        // gradients all zero, l_int = 0.5, l_global = 0.25
        let h = 8;
        let i_f = Tensor::zeros(&[h, h]);
        let sw = Tensor::full(&[h, h], 0.5);
        let lw = Tensor::zeros(&[h, h]);
        let (l, lg, li) = global_loss(&i_f, &sw, &lw, &cfg()).unwrap();
        assert!(lg.abs() < 1e-15);
        assert!((li - 0.5).abs() < 1e-12);
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn global_loss_max_symmetry() {
        // swapping I_SW and I_th inside the max targets leaves the loss
        // unchanged; realize by swapping roles via gamma = 1 and mirrored
        // sources, where I_th = (a+b)/2 is symmetric
        let a = rand_img(8, 8, 3);
        let b = rand_img(8, 8, 4);
        let mut c = cfg();
        c.gamma = 1.0;
        let f = rand_img(8, 8, 5);
        // max(x, (x+y)/2) compares the same pixels either way only when the
        // targets themselves are equal; here we check the implementation's
        // max against a hand-computed max
        let th = a.zip(&b, |x, y| (x + y) / 2.0);
        let expect_target = a.max_elem(&th);
        let targets = fusion_targets(&a, &b, &[], &c, true).unwrap();
        assert_eq!(targets.int_global.data(), expect_target.data());
        let swapped = th.max_elem(&a);
        assert_eq!(targets.int_global.data(), swapped.data());
        let _ = f;
    }

    #[test]
    fn object_loss_zero_cases() {
        let sw = rand_img(16, 16, 6);
        let lw = rand_img(16, 16, 7);
        // n = 0 boxes
        let (l, lg, li, skipped) = object_loss(&rand_img(16, 16, 8), &sw, &lw, &[], &cfg()).unwrap();
        assert_eq!((l, lg, li, skipped), (0.0, 0.0, 0.0, 0));
        // crop target equality: fused crop equal to max target
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.5,
            h: 0.5,
        };
        let target = sw.max_elem(&lw);
        let (_, _, li, _) = object_loss(&target, &sw, &lw, &[b], &cfg()).unwrap();
        assert!(li < 1e-15);
    }

    #[test]
    fn object_loss_full_image_box_matches_global_form() {
        // a full-image box with gamma = 1 reduces the object intensity term
        // to the global form with I_LW in place of I_th
        let sw = rand_img(8, 8, 9);
        let lw = rand_img(8, 8, 10);
        let f = rand_img(8, 8, 11);
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        };
        let (_, _, li_o, _) = object_loss(&f, &sw, &lw, &[b], &cfg()).unwrap();
        // hand-computed: mean |f - max(sw, lw)|
        let target = sw.max_elem(&lw);
        let expect: f64 =
            f.data().iter().zip(target.data()).map(|(a, t)| (a - t).abs()).sum::<f64>()
                / f.numel() as f64;
        assert!((li_o - expect).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_skipped_with_count() {
        let sw = rand_img(32, 32, 12);
        let lw = rand_img(32, 32, 13);
        let f = rand_img(32, 32, 14);
        let tiny = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.01,
            h: 0.01,
        };
        let ok = BoxAnnotation {
            class_id: 0,
            cx: 0.25,
            cy: 0.25,
            w: 0.3,
            h: 0.3,
        };
        let (_, _, _, skipped) = object_loss(&f, &sw, &lw, &[tiny, ok], &cfg()).unwrap();
        assert_eq!(skipped, 1);
    }

    #[test]
    fn oe_weighting_endpoints_and_arithmetic() {
        let sw = rand_img(16, 16, 15);
        let lw = rand_img(16, 16, 16);
        let f = rand_img(16, 16, 17);
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.5,
            h: 0.5,
        };
        let mut c = cfg();
        c.object_weight = 0.0;
        let (l0, bd0) = oe_loss(&f, &sw, &lw, &[b], &c).unwrap();
        assert!((l0 - bd0.l_global).abs() < 1e-15);
        c.object_weight = 1.0;
        let (l1, bd1) = oe_loss(&f, &sw, &lw, &[b], &c).unwrap();
        assert!((l1 - bd1.l_object).abs() < 1e-15);
        // sigma = 0.2 with hand values: 0.8*0.25 + 0.2*0.1 = 0.22
        assert!((0.8 * 0.25 + 0.2 * 0.1 - 0.22f64).abs() < 1e-15);
        // recombination identity on the actual breakdown
        c.object_weight = 0.2;
        let (l, bd) = oe_loss(&f, &sw, &lw, &[b], &c).unwrap();
        assert!((l - (0.8 * bd.l_global + 0.2 * bd.l_object)).abs() < 1e-12);
        assert!(
            (bd.l_global
                - ((1.0 - c.intensity_weight) * bd.l_grad_g + c.intensity_weight * bd.l_int_g))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn total_loss_endpoints() {
        assert_eq!(total_loss(0.2, 0.4, 0.0), 0.2);
        assert_eq!(total_loss(0.2, 0.4, 1.0), 0.4);
        assert!((total_loss(0.2, 0.4, 0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn intensity_monotone_in_single_pixel() {
        // raising one fused pixel strictly above its target increases l_int_g
        let sw = rand_img(8, 8, 18);
        let lw = rand_img(8, 8, 19);
        let c = cfg();
        let targets = fusion_targets(&sw, &lw, &[], &c, true).unwrap();
        let mut f = targets.int_global.clone();
        let (_, _, li0) = global_loss(&f, &sw, &lw, &c).unwrap();
        f.data_mut()[10] += 0.2;
        let (_, _, li1) = global_loss(&f, &sw, &lw, &c).unwrap();
        assert!(li1 > li0);
        f.data_mut()[10] += 0.2;
        let (_, _, li2) = global_loss(&f, &sw, &lw, &c).unwrap();
        assert!((li2 - li1 - 0.2 / 64.0).abs() < 1e-12, "L1 slope is 1/HW");
    }

    #[test]
    fn det_loss_zero_and_saturated_cases() {
        use crate::detect::HEAD_CHANNELS;
        // no GT, strongly negative objectness -> loss ~ 0
        let mut g: Graph<f64> = Graph::new();
        let mk = |g: &mut Graph<f64>, gh: usize, gw: usize, obj: f64| {
            let mut t = Tensor::zeros(&[HEAD_CHANNELS, gh, gw]);
            for y in 0..gh {
                for x in 0..gw {
                    t.data_mut()[(OBJ * gh + y) * gw + x] = obj;
                }
            }
            g.leaf(t, None)
        };
        let raws = [mk(&mut g, 4, 4, -40.0), mk(&mut g, 2, 2, -40.0), mk(&mut g, 1, 1, -40.0)];
        let l = det_loss_g(&mut g, &raws, &[]);
        assert!(g.scalar_value(l) < 1e-12);

        // GT exactly encoded with saturated logits -> loss below 1e-3
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5 + 0.5 / 4.0, // cell (2,2) of a 4x4 grid, centered
            cy: 0.5 + 0.5 / 4.0,
            w: 0.25,
            h: 0.25,
        };
        let mut g: Graph<f64> = Graph::new();
        let mut t = Tensor::full(&[HEAD_CHANNELS, 4, 4], 0.0);
        for y in 0..4 {
            for x in 0..4 {
                t.data_mut()[(OBJ * 4 + y) * 4 + x] = -40.0;
            }
        }
        // positive cell: (gy,gx) = (2,2); tx=ty=0 puts the center at
        // (2.5/4, 2.5/4) which matches the GT above
        t.data_mut()[(OBJ * 4 + 2) * 4 + 2] = 40.0;
        t.data_mut()[(CLS * 4 + 2) * 4 + 2] = 40.0;
        t.data_mut()[(TW * 4 + 2) * 4 + 2] = (0.25f64).ln();
        t.data_mut()[(TH * 4 + 2) * 4 + 2] = (0.25f64).ln();
        let r0 = g.leaf(t, None);
        let r1 = mk(&mut g, 2, 2, -40.0);
        let r2 = mk(&mut g, 1, 1, -40.0);
        // the GT also lands in cells of scales 1 and 2; saturate those too
        let fix = |g: &mut Graph<f64>, node: NodeId, gh: usize, gw: usize, b: &BoxAnnotation| {
            let mut t = g.value(node).clone();
            let gx = ((b.cx * gw as f64).floor() as usize).min(gw - 1);
            let gy = ((b.cy * gh as f64).floor() as usize).min(gh - 1);
            t.data_mut()[(OBJ * gh + gy) * gw + gx] = 40.0;
            t.data_mut()[(CLS * gh + gy) * gw + gx] = 40.0;
            // tx solves (gx + sigmoid(tx))/gw = cx
            let fx = b.cx * gw as f64 - gx as f64;
            let fy = b.cy * gh as f64 - gy as f64;
            let logit = |p: f64| (p / (1.0 - p)).ln();
            t.data_mut()[(TX * gh + gy) * gw + gx] = logit(fx);
            t.data_mut()[(TY * gh + gy) * gw + gx] = logit(fy);
            t.data_mut()[(TW * gh + gy) * gw + gx] = b.w.ln();
            t.data_mut()[(TH * gh + gy) * gw + gx] = b.h.ln();
            g.leaf(t, None)
        };
        let r1 = fix(&mut g, r1, 2, 2, &b);
        let r2 = fix(&mut g, r2, 1, 1, &b);
        let raws = [r0, r1, r2];
        let l = det_loss_g(&mut g, &raws, &[b]);
        assert!(g.scalar_value(l) < 1e-3, "got {}", g.scalar_value(l));
    }

    #[test]
    fn det_loss_single_cell_scalar_oracle() {
        use crate::detect::HEAD_CHANNELS;
        // 1x1 grids at every scale, one GT box: hand-compute BCE + IoU
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.5,
            cy: 0.5,
            w: 0.4,
            h: 0.4,
        };
        let vals = [0.3, -0.2, 0.1, 0.4, -0.9, -1.1]; // obj cls tx ty tw th
        let mut g: Graph<f64> = Graph::new();
        let mut raws = Vec::new();
        for _ in 0..3 {
            let mut t = Tensor::zeros(&[HEAD_CHANNELS, 1, 1]);
            for (c, &v) in vals.iter().enumerate() {
                t.data_mut()[c] = v;
            }
            raws.push(g.leaf(t, None));
        }
        let raws = [raws[0], raws[1], raws[2]];
        let l = det_loss_g(&mut g, &raws, &[b]);

        // oracle
        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let bce = |z: f64, t: f64| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        let mut expect = 0.0;
        for _scale in 0..3 {
            expect += bce(vals[0], 1.0); // objectness, positive
            expect += bce(vals[1], 1.0); // class
            let cx = sigmoid(vals[2]);
            let cy = sigmoid(vals[3]);
            let w = vals[4].exp();
            let h = vals[5].exp();
            let ix = (cx + w / 2.0).min(b.cx + b.w / 2.0) - (cx - w / 2.0).max(b.cx - b.w / 2.0);
            let iy = (cy + h / 2.0).min(b.cy + b.h / 2.0) - (cy - h / 2.0).max(b.cy - b.h / 2.0);
            let inter = ix.max(0.0) * iy.max(0.0);
            let union = w * h + b.w * b.h - inter;
            expect += 1.0 - inter / (union + 1e-9);
        }
        expect /= 3.0; // three positives
        assert!((g.scalar_value(l) - expect).abs() < 1e-9);
    }

    #[test]
    fn oe_loss_gradient_matches_finite_differences() {
        // d(oe_loss)/d(i_f) on an 8x8 image, central differences, step 1e-4
        let sw = rand_img(8, 8, 20);
        let lw = rand_img(8, 8, 21);
        let f0 = rand_img(8, 8, 22);
        let b = BoxAnnotation {
            class_id: 0,
            cx: 0.4,
            cy: 0.6,
            w: 0.4,
            h: 0.4,
        };
        let c = cfg();
        let targets = fusion_targets(&sw, &lw, &[b], &c, true).unwrap();

        let mut g: Graph<f64> = Graph::new();
        let f = g.leaf(to_chw::<f64>(&f0), None);
        let nodes = fusion_loss_g(&mut g, f, &targets, &c).unwrap();
        let grads = g.backward(nodes.l_f);
        let analytic = grads.wrt(f).unwrap().clone();

        let h = 1e-4;
        let eval = |img: &Tensor<f64>| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let f = g.constant(to_chw::<f64>(img));
            let nodes = fusion_loss_g(&mut g, f, &targets, &c).unwrap();
            g.scalar_value(nodes.l_f)
        };
        for i in (0..64).step_by(7) {
            let mut plus = f0.clone();
            plus.data_mut()[i] += h;
            let mut minus = f0.clone();
            minus.data_mut()[i] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (num - a).abs() / num.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {i}: numeric {num} vs analytic {a}");
        }
    }
}
