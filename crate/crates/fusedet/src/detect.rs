//! Anchor-free three-scale detection head, box decoding, greedy NMS, and
//! precision/recall/mAP evaluation.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::data::BoxAnnotation;
use crate::error::{Error, Result};
use crate::extract::PYRAMID_CHANNELS;
use crate::graph::{Graph, NodeId};
use crate::nn::{Act, ConvBlock, LayerSpec};
use crate::params::{ParamSet, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Output channels per cell: objectness, class, tx, ty, tw, th.
pub const HEAD_CHANNELS: usize = 6;
/// Index of each regressand in the head output.
pub const OBJ: usize = 0;
pub const CLS: usize = 1;
pub const TX: usize = 2;
pub const TY: usize = 3;
pub const TW: usize = 4;
pub const TH: usize = 5;

/// Confidence operating point for precision/recall reporting.
pub const PR_CONFIDENCE: f64 = 0.25;
/// IoU threshold of the mAP50 column and the P/R operating point.
pub const PR_IOU: f64 = 0.5;

/// One box prediction in image fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Scalar detection quality report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetEvalReport {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
}

/// Per-scale conv head: one 3x3 mixing conv then a 1x1 projection to the six
/// per-cell outputs. The tw/th biases start at log(0.2) so zero-weight boxes
/// decode to a plausible ship size, and the objectness bias starts negative.
pub struct DetectHead {
    scales: Vec<ConvBlock>,
}

impl DetectHead {
    pub fn new<F: Scalar>(ps: &mut ParamSet<F>, rng: &mut ChaCha8Rng, name: &str) -> Self {
        let mut scales = Vec::new();
        for (i, &c) in PYRAMID_CHANNELS.iter().enumerate() {
            let block = ConvBlock::new(
                ps,
                rng,
                &format!("{name}.s{i}"),
                c,
                &[
                    LayerSpec::new(c, 3, 1, Act::Silu),
                    LayerSpec::new(HEAD_CHANNELS, 1, 1, Act::None),
                ],
            );
            // output bias is the last registered parameter of the block
            let bias = ParamId(ps.len() - 1);
            let b = ps.get_mut(bias);
            b.data_mut()[OBJ] = F::from_f64(-2.0);
            b.data_mut()[TW] = F::from_f64((0.2f64).ln());
            b.data_mut()[TH] = F::from_f64((0.2f64).ln());
            scales.push(block);
        }
        Self { scales }
    }

    /// Raw per-cell predictions for each pyramid level.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        pyramid: &[NodeId; 3],
    ) -> [NodeId; 3] {
        let mut out = [pyramid[0]; 3];
        for (i, (&level, block)) in pyramid.iter().zip(&self.scales).enumerate() {
            out[i] = block.forward(g, ps, level);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode one cell of a raw prediction tensor into a detection.
pub fn decode_cell(raw: &Tensor<f64>, gy: usize, gx: usize) -> Detection {
    let (gh, gw) = (raw.shape()[1], raw.shape()[2]);
    let at = |c: usize| raw.data()[(c * gh + gy) * gw + gx];
    let score = sigmoid(at(OBJ)) * sigmoid(at(CLS));
    Detection {
        cx: (gx as f64 + sigmoid(at(TX))) / gw as f64,
        cy: (gy as f64 + sigmoid(at(TY))) / gh as f64,
        w: at(TW).exp(),
        h: at(TH).exp(),
        score,
        class_id: 0,
    }
}

/// Intersection-over-union of two center-format boxes.
pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let ax0 = a.cx - a.w / 2.0;
    let ax1 = a.cx + a.w / 2.0;
    let ay0 = a.cy - a.h / 2.0;
    let ay1 = a.cy + a.h / 2.0;
    let bx0 = b.cx - b.w / 2.0;
    let bx1 = b.cx + b.w / 2.0;
    let by0 = b.cy - b.h / 2.0;
    let by1 = b.cy + b.h / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Decode raw per-scale predictions, keep cells above `conf_thresh`, and run
/// greedy NMS suppressing overlaps with IoU strictly greater than
/// `iou_thresh`. Deterministic regardless of input order.
pub fn decode_and_nms(
    raws: &[Tensor<f64>],
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&conf_thresh) || !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::Parameter(format!(
            "thresholds must lie in [0,1], got conf={conf_thresh} iou={iou_thresh}"
        )));
    }
    let mut dets = Vec::new();
    for raw in raws {
        let (gh, gw) = (raw.shape()[1], raw.shape()[2]);
        for gy in 0..gh {
            for gx in 0..gw {
                let d = decode_cell(raw, gy, gx);
                if d.score >= conf_thresh {
                    dets.push(d);
                }
            }
        }
    }
    Ok(nms(dets, iou_thresh))
}

/// Greedy NMS by descending score with a total tie-break order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(det_order);
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for d in dets {
        for k in &keep {
            if iou(k, &d) > iou_thresh {
                continue 'outer;
            }
        }
        keep.push(d);
    }
    keep
}

fn annotation_to_det(b: &BoxAnnotation) -> Detection {
    Detection {
        cx: b.cx,
        cy: b.cy,
        w: b.w,
        h: b.h,
        score: 1.0,
        class_id: b.class_id,
    }
}

/// Average precision by all-point precision-envelope interpolation at one
/// IoU threshold, over the whole prediction set.
fn average_precision(
    dets: &[(usize, Detection)],
    gts: &HashMap<usize, Vec<Detection>>,
    n_gt: usize,
    iou_t: f64,
) -> f64 {
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    // greedy matching in descending score order
    let mut matched: HashMap<usize, Vec<bool>> = gts
        .iter()
        .map(|(&img, v)| (img, vec![false; v.len()]))
        .collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for (img, d) in dets {
        let mut best = -1.0;
        let mut best_j = None;
        if let Some(gt_list) = gts.get(img) {
            let taken = matched.get(img).unwrap();
            for (j, gt) in gt_list.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(d, gt);
                if v >= iou_t && v > best {
                    best = v;
                    best_j = Some(j);
                }
            }
        }
        match best_j {
            Some(j) => {
                matched.get_mut(img).unwrap()[j] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    // precision envelope over the cumulative PR points
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Evaluate detections against ground truth. `iou_list` carries the mAP
/// thresholds; precision/recall are reported at confidence
/// [`PR_CONFIDENCE`] and IoU [`PR_IOU`].
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<BoxAnnotation>],
    iou_list: &[f64],
) -> Result<DetEvalReport> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::Parameter(format!(
            "detection/gt image counts differ: {} vs {}",
            dets_per_image.len(),
            gts_per_image.len()
        )));
    }
    let gts: HashMap<usize, Vec<Detection>> = gts_per_image
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.iter().map(annotation_to_det).collect()))
        .collect();
    let n_gt: usize = gts_per_image.iter().map(|v| v.len()).sum();

    // one global score-sorted list with a deterministic tie-break
    let mut all: Vec<(usize, Detection)> = dets_per_image
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.iter().map(move |d| (i, *d)))
        .collect();
    all.sort_by(|a, b| det_order(&a.1, &b.1).then(a.0.cmp(&b.0)));

    let map50 = average_precision(&all, &gts, n_gt, PR_IOU);
    let mut acc = 0.0;
    for &t in iou_list {
        acc += average_precision(&all, &gts, n_gt, t);
    }
    let map5095 = if iou_list.is_empty() {
        map50
    } else {
        acc / iou_list.len() as f64
    };

    // P/R at the fixed operating point
    let conf: Vec<(usize, Detection)> = all
        .iter()
        .filter(|(_, d)| d.score >= PR_CONFIDENCE)
        .cloned()
        .collect();
    let mut matched: HashMap<usize, Vec<bool>> = gts
        .iter()
        .map(|(&img, v)| (img, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    for (img, d) in &conf {
        if let Some(gt_list) = gts.get(img) {
            let taken = matched.get_mut(img).unwrap();
            let mut best = -1.0;
            let mut best_j = None;
            for (j, gt) in gt_list.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(d, gt);
                if v >= PR_IOU && v > best {
                    best = v;
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                taken[j] = true;
                tp += 1;
            }
        }
    }
    let precision = if conf.is_empty() {
        if n_gt == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / conf.len() as f64
    };
    let recall = if n_gt == 0 {
        1.0
    } else {
        tp as f64 / n_gt as f64
    };

    Ok(DetEvalReport {
        precision,
        recall,
        map50,
        map5095,
    })
}

/// The ten COCO-style thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds_50_95() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

// ---------------------------------------------------------------------------
// Detection text format: one line per box, `id class score cx cy w h`
// ---------------------------------------------------------------------------

pub fn format_detections(id: &str, dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&format!(
            "{id} {} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class_id, d.score, d.cx, d.cy, d.w, d.h
        ));
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::Parameter(format!(
                "detection line {} has {} fields, expected 7",
                i + 1,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parameter(format!("bad number '{s}' on detection line {}", i + 1)))
        };
        out.push((
            f[0].to_string(),
            Detection {
                class_id: f[1]
                    .parse()
                    .map_err(|_| Error::Parameter(format!("bad class on line {}", i + 1)))?,
                score: num(f[2])?,
                cx: num(f[3])?,
                cy: num(f[4])?,
                w: num(f[5])?,
                h: num(f[6])?,
            },
        ));
    }
    Ok(out)
}
