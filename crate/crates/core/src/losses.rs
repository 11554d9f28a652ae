//! Training objectives: least-squares adversarial loss, cycle consistency,
//! the three-part detection loss and their weighted total.

use crate::autograd::Var;
use crate::detection::{iou, BBox, BoxSet, DenseMaps};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// CIoU penalty charged for a ground-truth box no prediction matched.
///
/// Any matched pair has IoU >= [`MATCH_IOU`], which keeps its `1 - CIoU`
/// below this value.
pub const UNMATCHED_CIOU_PENALTY: f64 = 2.0;
/// Minimum IoU for a dense prediction to match a ground-truth box.
pub const MATCH_IOU: f64 = 0.5;
const BCE_EPS: f64 = 1e-7;
const BOX_EPS: f64 = 1e-9;
const ALPHA_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Detection term.
    pub k1: f64,
    /// Adversarial term.
    pub k2: f64,
    /// Cycle-consistency term.
    pub k3: f64,
    /// CIoU part of the detection loss.
    pub a: f64,
    /// Classification part.
    pub b: f64,
    /// Confidence (objectness) part.
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { k1: 0.8, k2: 1.0, k3: 10.0, a: 0.4, b: 0.3, c: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [("k1", self.k1), ("k2", self.k2), ("k3", self.k3), ("a", self.a), ("b", self.b), ("c", self.c)];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {} must be finite and nonnegative, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub det: f64,
    pub adv: f64,
    pub cyc: f64,
    pub det_ciou: f64,
    pub det_cls: f64,
    pub det_conf: f64,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = ["total", "det", "adv", "cyc", "det_ciou", "det_cls", "det_conf"];

    /// Builds a report from raw components; `det` and `total` are derived.
    pub fn from_components(adv: f64, cyc: f64, det_parts: (f64, f64, f64), w: &LossWeights) -> Result<Self> {
        let (det_ciou, det_cls, det_conf) = det_parts;
        for (name, v) in [("adv", adv), ("cyc", cyc), ("det_ciou", det_ciou), ("det_cls", det_cls), ("det_conf", det_conf)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component `{}` ({})", name, v)));
            }
        }
        let det = w.a * det_ciou + w.b * det_cls + w.c * det_conf;
        let total = w.k1 * det + w.k2 * adv + w.k3 * cyc;
        Ok(Self { total, det, adv, cyc, det_ciou, det_cls, det_conf })
    }

    pub fn values(&self) -> [f64; 7] {
        [self.total, self.det, self.adv, self.cyc, self.det_ciou, self.det_cls, self.det_conf]
    }

    /// Largest violation of the two weighted-sum identities.
    pub fn identity_error(&self, w: &LossWeights) -> f64 {
        let det = w.a * self.det_ciou + w.b * self.det_cls + w.c * self.det_conf;
        let total = w.k1 * self.det + w.k2 * self.adv + w.k3 * self.cyc;
        (det - self.det).abs().max((total - self.total).abs())
    }
}

fn ensure_finite<T: Scalar>(v: Var<'_, T>, name: &str) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn mean_abs_diff<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>, what: &str) -> Result<Var<'g, T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{}: {:?} vs {:?}", what, a.shape(), b.shape())));
    }
    Ok(a.sub(b).abs().mean())
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn cycle_loss<'g, T: Scalar>(
    x: Var<'g, T>,
    x_reconstructed: Var<'g, T>,
    y: Var<'g, T>,
    y_reconstructed: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let fwd = mean_abs_diff(x_reconstructed, x, "normal-domain reconstruction")?;
    let bwd = mean_abs_diff(y_reconstructed, y, "adverse-domain reconstruction")?;
    Ok(fwd.add(bwd))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialRole {
    Generator,
    Critic,
}

/// Least-squares GAN objective for one direction.
///
/// Critic: `mean((real - 1)^2) + mean(fake^2)`; generator: `mean((fake - 1)^2)`
/// (`real` is ignored and may be `None`).
pub fn adversarial_loss<'g, T: Scalar>(
    real: Option<Var<'g, T>>,
    fake: Var<'g, T>,
    role: AdversarialRole,
) -> Result<Var<'g, T>> {
    ensure_finite(fake, "fake critic scores")?;
    let one = T::one();
    match role {
        AdversarialRole::Generator => Ok(fake.add_scalar(-one).square().mean()),
        AdversarialRole::Critic => {
            let real = real.ok_or_else(|| Error::InvalidInput("critic role needs real scores".into()))?;
            ensure_finite(real, "real critic scores")?;
            Ok(real.add_scalar(-one).square().mean().add(fake.square().mean()))
        }
    }
}

/// Differentiable `1 - CIoU` for rows of `pred` `[M, 4]` against constant `gt` `[M, 4]`.
///
pub fn ciou_loss_rows<'g, T: Scalar>(pred: Var<'g, T>, gt: &Tensor<T>) -> Var<'g, T> {
    let m = gt.shape()[0];
    let graph = pred.graph();
    let col = |v: Var<'g, T>, i: usize| v.narrow(1, i, 1);
    let (px, py, pw, ph) = (col(pred, 0), col(pred, 1), col(pred, 2), col(pred, 3));
    let g = graph.constant(gt.clone());
    let (gx, gy, gw, gh) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let half = T::c(0.5);
    let (px1, px2) = (px.sub(pw.scale(half)), px.add(pw.scale(half)));
    let (py1, py2) = (py.sub(ph.scale(half)), py.add(ph.scale(half)));
    let (gx1, gx2) = (gx.sub(gw.scale(half)), gx.add(gw.scale(half)));
    let (gy1, gy2) = (gy.sub(gh.scale(half)), gy.add(gh.scale(half)));
    let iw = px2.minimum(gx2).sub(px1.maximum(gx1)).relu();
    let ih = py2.minimum(gy2).sub(py1.maximum(gy1)).relu();
    let inter = iw.mul(ih);
    let union = pw.mul(ph).add(gw.mul(gh)).sub(inter).add_scalar(T::c(BOX_EPS));
    let iou_v = inter.div(union);
    let cw = px2.maximum(gx2).sub(px1.minimum(gx1));
    let ch = py2.maximum(gy2).sub(py1.minimum(gy1));
    let c2 = cw.square().add(ch.square()).add_scalar(T::c(BOX_EPS));
    let rho2 = px.sub(gx).square().add(py.sub(gy).square());
    let four_over_pi2 = T::c(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let v = gw.div(gh).atan().sub(pw.div(ph).atan()).square().scale(four_over_pi2);
    // alpha = v / (1 - IoU + v), differentiated like every other term; the
    // offset only matters when v = 0 and IoU = 1, where alpha * v is 0 anyway
    let alpha = v.div(iou_v.neg().add_scalar(T::one()).add(v).add_scalar(T::c(ALPHA_EPS)));
    let ciou = iou_v.sub(rho2.div(c2)).sub(v.mul(alpha));
    ciou.neg().add_scalar(T::one()).reshape(&[m])
}

/// `(L_CIoU, L_cls, L_conf)` of a detector's dense output against ground truth.
pub struct DetectionLoss<'g, T> {
    pub ciou: Var<'g, T>,
    pub cls: Var<'g, T>,
    pub conf: Var<'g, T>,
}

impl<'g, T: Scalar> DetectionLoss<'g, T> {
    pub fn weighted(&self, w: &LossWeights) -> Var<'g, T> {
        self.ciou.scale(T::c(w.a)).add(self.cls.scale(T::c(w.b))).add(self.conf.scale(T::c(w.c)))
    }

    pub fn values(&self) -> (f64, f64, f64) {
        (self.ciou.item().to_f64c(), self.cls.item().to_f64c(), self.conf.item().to_f64c())
    }
}

/// Greedy one-to-one matching of ground-truth boxes to dense cells by IoU.
///
/// Returns `(gt index, cell index)` pairs, highest IoU first; pairs below
/// `min_iou` never match.
pub fn match_cells(gt: &BoxSet, cells: &[BBox], min_iou: f64) -> Vec<(usize, usize)> {
    let mut cand = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (ci, c) in cells.iter().enumerate() {
            let v = iou(g, c);
            if v >= min_iou {
                cand.push((v, gi, ci));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut cell_used = vec![false; cells.len()];
    let mut out = Vec::new();
    for (_, gi, ci) in cand {
        if !gt_used[gi] && !cell_used[ci] {
            gt_used[gi] = true;
            cell_used[ci] = true;
            out.push((gi, ci));
        }
    }
    out
}

/// Detection loss of dense maps against per-image ground truth.
///
/// * `L_CIoU`: mean over ground-truth boxes of `1 - CIoU` with the matched
///   cell's box, or [`UNMATCHED_CIOU_PENALTY`] when unmatched.
/// * `L_cls`: BCE of matched cells' class probabilities against one-hot targets.
/// * `L_conf`: BCE of every cell's objectness against "matched or not".
///
/// With no ground truth at all, the first two are 0 and `L_conf` is the
/// all-background loss.
pub fn detection_loss<'g, T: Scalar>(maps: &DenseMaps<'g, T>, ground_truth: &[BoxSet]) -> Result<DetectionLoss<'g, T>> {
    let obj_shape = maps.objectness.shape();
    let box_shape = maps.boxes.shape();
    let cls_shape = maps.class_probs.shape();
    if obj_shape.len() != 2 || box_shape.len() != 3 || cls_shape.len() != 3 {
        return Err(Error::module("detection", "dense maps have unexpected rank"));
    }
    let (n, cells, k) = (obj_shape[0], obj_shape[1], cls_shape[2]);
    if ground_truth.len() != n {
        return Err(Error::InvalidInput(format!("{} label sets for a batch of {}", ground_truth.len(), n)));
    }
    for (name, v) in [("objectness", maps.objectness), ("class maps", maps.class_probs), ("box maps", maps.boxes)] {
        if !v.value().is_finite() {
            return Err(Error::module("detection", format!("detector produced non-finite {}", name)));
        }
    }
    let graph = maps.objectness.graph();
    let boxes_v = maps.boxes.value();
    let mut obj_target = Tensor::zeros(&[n, cells]);
    let mut box_idx = Vec::new();
    let mut box_gt = Vec::new();
    let mut cls_idx = Vec::new();
    let mut cls_target = Vec::new();
    let mut n_gt = 0usize;
    let mut unmatched = 0usize;
    for (i, gt) in ground_truth.iter().enumerate() {
        for b in gt.iter() {
            if b.class_id >= k {
                return Err(Error::InvalidInput(format!("class {} outside detector's {} classes", b.class_id, k)));
            }
        }
        let cell_boxes: Vec<BBox> = (0..cells)
            .map(|s| {
                let d = &boxes_v.data()[(i * cells + s) * 4..(i * cells + s + 1) * 4];
                BBox::gt(0, d[0].to_f64c(), d[1].to_f64c(), d[2].to_f64c(), d[3].to_f64c())
            })
            .collect();
        let matches = match_cells(gt, &cell_boxes, MATCH_IOU);
        n_gt += gt.len();
        unmatched += gt.len() - matches.len();
        for (gi, ci) in matches {
            let g = &gt.boxes[gi];
            let cell = i * cells + ci;
            obj_target.data_mut()[cell] = T::one();
            box_idx.extend((0..4).map(|j| cell * 4 + j));
            box_gt.extend([g.cx, g.cy, g.w, g.h].map(T::c));
            cls_idx.extend((0..k).map(|c| cell * k + c));
            cls_target.extend((0..k).map(|c| if c == g.class_id { T::one() } else { T::zero() }));
        }
    }
    let matched = box_idx.len() / 4;
    let zero = || graph.constant(Tensor::scalar(T::zero()));
    let ciou = if n_gt == 0 {
        zero()
    } else {
        let penalty = T::c(UNMATCHED_CIOU_PENALTY * unmatched as f64);
        let sum = if matched > 0 {
            let pred = maps.boxes.gather_flat(&box_idx).reshape(&[matched, 4]);
            ciou_loss_rows(pred, &Tensor::from_vec(&[matched, 4], box_gt)).sum().add_scalar(penalty)
        } else {
            graph.constant(Tensor::scalar(penalty))
        };
        sum.scale(T::c(1.0 / n_gt as f64))
    };
    let cls = if matched > 0 {
        let p = maps.class_probs.gather_flat(&cls_idx);
        p.bce_prob(&Tensor::from_vec(&[cls_idx.len()], cls_target), BCE_EPS).mean()
    } else {
        zero()
    };
    let conf = maps.objectness.bce_prob(&obj_target, BCE_EPS).mean();
    Ok(DetectionLoss { ciou, cls, conf })
}

/// Combines component losses into `k1·det + k2·adv + k3·cyc`.
///
/// Any non-finite component aborts with its name.
pub fn total_loss<'g, T: Scalar>(
    adv: Var<'g, T>,
    cyc: Var<'g, T>,
    det: Option<&DetectionLoss<'g, T>>,
    w: &LossWeights,
) -> Result<(Var<'g, T>, LossReport)> {
    let det_parts = det.map_or((0.0, 0.0, 0.0), DetectionLoss::values);
    let report = LossReport::from_components(adv.item().to_f64c(), cyc.item().to_f64c(), det_parts, w)?;
    let mut total = adv.scale(T::c(w.k2)).add(cyc.scale(T::c(w.k3)));
    if let Some(d) = det {
        total = total.add(d.weighted(w).scale(T::c(w.k1)));
    }
    Ok((total, report))
}
