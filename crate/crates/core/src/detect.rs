//! Anchor-based BEV detection: anchors, target assignment, focal and
//! smooth-L1 losses, and decoding of head outputs into scored boxes.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, BevBox};
use crate::nnet::{HeadOutputs, Scalar, REG_DIM};
use crate::spg::{CellIndex, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_sq: f64,
    pub iou_target: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            gamma: 2.0,
            sigma_sq: 1.0,
            iou_target: 0.5,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.gamma < 0.0 || !(self.sigma_sq > 0.0) {
            return Err(Error::Config(
                "loss params need 0 < alpha < 1, gamma >= 0, sigma_sq > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub orientations: Vec<f64>,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            orientations: vec![0.0, PI / 2.0],
            score_thresh: 0.3,
            nms_iou: 0.3,
        }
    }
}

/// One fixed-size anchor per orientation per grid cell, centered on the cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub grid: GridSpec,
    /// `(w, l)` in meters.
    pub base_size: (f64, f64),
    pub orientations: Vec<f64>,
}

impl AnchorSet {
    pub fn per_cell(&self) -> usize {
        self.orientations.len()
    }

    pub fn len(&self) -> usize {
        self.per_cell() * self.grid.num_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor index layout matches the classification head: `a * H * W + u * W + v`.
    pub fn index(&self, a: usize, c: CellIndex) -> usize {
        (a * self.grid.cells_x + c.u) * self.grid.cells_z + c.v
    }

    pub fn anchor(&self, idx: usize) -> BevBox {
        let n = self.grid.num_cells();
        let (a, cell) = (idx / n, idx % n);
        let c = CellIndex {
            u: cell / self.grid.cells_z,
            v: cell % self.grid.cells_z,
        };
        let (x, z) = self.grid.cell_center(c);
        BevBox::new(x, z, self.base_size.0, self.base_size.1, self.orientations[a])
    }

    /// Diagonal of the anchor footprint.
    pub fn diag(&self) -> f64 {
        self.base_size.0.hypot(self.base_size.1)
    }
}

/// Anchors sized by the mean ground-truth `(w, l)` over the training labels.
pub fn make_anchors(g: &GridSpec, train_labels: &[BevBox], orientations: &[f64]) -> Result<AnchorSet> {
    if train_labels.is_empty() {
        return Err(Error::Validation("anchor sizing needs at least one training label".into()));
    }
    if orientations.is_empty() {
        return Err(Error::Config("at least one anchor orientation is required".into()));
    }
    let n = train_labels.len() as f64;
    let w = train_labels.iter().map(|b| b.w).sum::<f64>() / n;
    let l = train_labels.iter().map(|b| b.l).sum::<f64>() / n;
    Ok(AnchorSet {
        grid: g.clone(),
        base_size: (w, l),
        orientations: orientations.to_vec(),
    })
}

/// Wraps an angle into `[-pi/2, pi/2)`; boxes are symmetric under `yaw + pi`.
fn wrap_half_pi(a: f64) -> f64 {
    (a + PI / 2.0).rem_euclid(PI) - PI / 2.0
}

pub fn encode_box(anchor: &BevBox, gt: &BevBox) -> [f64; REG_DIM] {
    let d = anchor.w.hypot(anchor.l);
    let dyaw = wrap_half_pi(gt.yaw - anchor.yaw);
    [
        (gt.cx - anchor.cx) / d,
        (gt.cy - anchor.cy) / d,
        (gt.w / anchor.w).ln(),
        (gt.l / anchor.l).ln(),
        dyaw.sin(),
        dyaw.cos(),
    ]
}

pub fn decode_box(anchor: &BevBox, t: &[f64; REG_DIM]) -> BevBox {
    let d = anchor.w.hypot(anchor.l);
    BevBox::new(
        anchor.cx + t[0] * d,
        anchor.cy + t[1] * d,
        anchor.w * t[2].exp(),
        anchor.l * t[3].exp(),
        anchor.yaw + t[4].atan2(t[5]),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    /// Positive/negative label per anchor.
    pub positive: Vec<bool>,
    /// `(anchor index, ground-truth index, regression target)` for positives,
    /// in anchor order.
    pub regression: Vec<(usize, usize, [f64; REG_DIM])>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.regression.len()
    }
}

/// Positive iff IoU with some ground truth reaches `iou_target` (matched to
/// the best one); each ground truth's best anchor is forced positive.
pub fn assign_targets(a: &AnchorSet, gts: &[BevBox], p: &LossParams) -> TargetAssignment {
    let total = a.len();
    let mut best_iou = vec![0.0f64; total];
    let mut matched: Vec<Option<usize>> = vec![None; total];
    let mut forced: Vec<Option<usize>> = Vec::with_capacity(gts.len());
    let g = &a.grid;
    let anchor_r = 0.5 * a.diag();
    for (gi, gt) in gts.iter().enumerate() {
        let reach = gt.radius() + anchor_r;
        let u_lo = ((gt.cx - reach - g.x_range[0]) / g.cell_x()).floor().max(0.0) as usize;
        let u_hi = (((gt.cx + reach - g.x_range[0]) / g.cell_x()).ceil().max(0.0) as usize).min(g.cells_x);
        let v_lo = ((gt.cy - reach - g.z_range[0]) / g.cell_z()).floor().max(0.0) as usize;
        let v_hi = (((gt.cy + reach - g.z_range[0]) / g.cell_z()).ceil().max(0.0) as usize).min(g.cells_z);
        let mut best: Option<(f64, usize)> = None;
        for ai in 0..a.per_cell() {
            for u in u_lo..u_hi {
                for v in v_lo..v_hi {
                    let idx = a.index(ai, CellIndex { u, v });
                    let iou = rotated_iou(&a.anchor(idx), gt);
                    if iou > 0.0 && best.is_none_or(|(b, bi)| iou > b || (iou == b && idx < bi)) {
                        best = Some((iou, idx));
                    }
                    if iou >= p.iou_target && iou > best_iou[idx] {
                        best_iou[idx] = iou;
                        matched[idx] = Some(gi);
                    }
                }
            }
        }
        let best_idx = match best {
            Some((_, idx)) => idx,
            // no overlap at all: nearest anchor center
            None => (0..total)
                .min_by(|&i, &j| {
                    let (ai, aj) = (a.anchor(i), a.anchor(j));
                    let di = (ai.cx - gt.cx).hypot(ai.cy - gt.cy);
                    let dj = (aj.cx - gt.cx).hypot(aj.cy - gt.cy);
                    di.total_cmp(&dj).then(i.cmp(&j))
                })
                .unwrap_or(0),
        };
        forced.push(Some(best_idx));
    }
    for (gi, f) in forced.iter().enumerate() {
        if let Some(idx) = f {
            matched[*idx] = Some(gi);
        }
    }
    let positive: Vec<bool> = matched.iter().map(Option::is_some).collect();
    let regression = matched
        .iter()
        .enumerate()
        .filter_map(|(idx, m)| m.map(|gi| (idx, gi, encode_box(&a.anchor(idx), &gts[gi]))))
        .collect();
    TargetAssignment {
        positive,
        regression,
    }
}

pub const PT_CLAMP: f64 = 1e-7;

/// Focal term `-w (1 - p_t)^gamma ln p_t` for one anchor, with `w = alpha`
/// for positives and `1 - alpha` for negatives.
pub fn focal_term(p_t: f64, positive: bool, p: &LossParams) -> f64 {
    let pt = p_t.clamp(PT_CLAMP, 1.0 - PT_CLAMP);
    let w = if positive { p.alpha } else { 1.0 - p.alpha };
    -w * (1.0 - pt).powf(p.gamma) * pt.ln()
}

/// Mean focal loss over anchors given `p_t` values.
pub fn focal_loss(p_t: &[f64], positive: &[bool], p: &LossParams) -> f64 {
    if p_t.is_empty() {
        return 0.0;
    }
    let s: f64 = p_t.iter().zip(positive).map(|(&pt, &pos)| focal_term(pt, pos, p)).sum();
    s / p_t.len() as f64
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean focal loss from logits, and its gradient with respect to each logit.
pub fn focal_loss_logits(logits: &[f64], positive: &[bool], p: &LossParams) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &pos) in logits.iter().zip(positive) {
        let s = if pos { 1.0 } else { -1.0 };
        let w = if pos { p.alpha } else { 1.0 - p.alpha };
        let pt = sigmoid(s * z).clamp(PT_CLAMP, 1.0 - PT_CLAMP);
        let q = 1.0 - pt;
        loss += -w * q.powf(p.gamma) * pt.ln();
        // dL/dz = w s (1-p_t)^gamma (gamma p_t ln p_t - (1 - p_t))
        grad.push(w * s * q.powf(p.gamma) * (p.gamma * pt * pt.ln() - q) / n);
    }
    (loss / n, grad)
}

/// Elementwise smooth L1, averaged over the residuals; zero when empty.
pub fn smooth_l1(deltas: &[f64], p: &LossParams) -> (f64, Vec<f64>) {
    if deltas.is_empty() {
        return (0.0, Vec::new());
    }
    let knee = 1.0 / p.sigma_sq;
    let n = deltas.len() as f64;
    let mut loss = 0.0;
    let grad = deltas
        .iter()
        .map(|&d| {
            if d.abs() < knee {
                loss += 0.5 * p.sigma_sq * d * d;
                p.sigma_sq * d / n
            } else {
                loss += d.abs() - 0.5 / p.sigma_sq;
                d.signum() / n
            }
        })
        .collect();
    (loss / n, grad)
}

#[derive(Clone, Debug)]
pub struct LossReport<T> {
    pub total: f64,
    pub focal: f64,
    pub smooth_l1: f64,
    pub grads: HeadOutputs<T>,
}

/// `focal + smooth_l1` over a batch; `targets[i]` belongs to sample `i`.
/// Focal is averaged over all anchors of the batch, smooth L1 over all
/// regression residuals of positive anchors.
pub fn total_loss<T: Scalar>(
    heads: &HeadOutputs<T>,
    targets: &[&TargetAssignment],
    p: &LossParams,
) -> Result<LossReport<T>> {
    let n = heads.batch();
    if targets.len() != n {
        return Err(Error::shape("loss", format!("{} targets for batch {n}", targets.len())));
    }
    let per = heads.cls.len() / n.max(1);
    let reg_per = heads.reg.len() / n.max(1);
    if per * REG_DIM != reg_per || targets.iter().any(|t| t.positive.len() != per) {
        return Err(Error::shape("loss", "targets do not match the head layout"));
    }
    let logits: Vec<f64> = heads.cls.data().iter().map(|v| v.to_f64()).collect();
    let labels: Vec<bool> = targets.iter().flat_map(|t| t.positive.iter().copied()).collect();
    let (focal, dcls) = focal_loss_logits(&logits, &labels, p);

    let plane = heads.cls.shape()[2] * heads.cls.shape()[3];
    let mut positions = Vec::new();
    let mut deltas = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        for (idx, _, target) in &t.regression {
            let (a, cell) = (idx / plane, idx % plane);
            for (k, tk) in target.iter().enumerate() {
                let pos = i * reg_per + (a * REG_DIM + k) * plane + cell;
                positions.push(pos);
                deltas.push(heads.reg.data()[pos].to_f64() - tk);
            }
        }
    }
    let (sl1, dreg) = smooth_l1(&deltas, p);
    let mut grads = heads.zeros_like();
    for (g, d) in grads.cls.data_mut().iter_mut().zip(dcls) {
        *g = T::from_f64(d);
    }
    let rd = grads.reg.data_mut();
    for (pos, d) in positions.into_iter().zip(dreg) {
        rd[pos] = T::from_f64(d);
    }
    Ok(LossReport {
        total: focal + sl1,
        focal,
        smooth_l1: sl1,
        grads,
    })
}

/// Scored boxes sorted by descending score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub boxes: Vec<BevBox>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(&self.boxes).expect("detections serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut boxes = crate::radar_io::parse_labels(bytes, None)?;
        for b in &boxes {
            match b.score {
                Some(s) if (0.0..=1.0).contains(&s) => {}
                _ => return Err(Error::Validation("detections need a score in [0,1]".into())),
            }
        }
        sort_by_score(&mut boxes);
        Ok(Self { boxes })
    }
}

fn score(b: &BevBox) -> f64 {
    b.score.unwrap_or(0.0)
}

/// Stable descending sort; equal scores keep their input order.
fn sort_by_score(boxes: &mut [BevBox]) {
    boxes.sort_by(|a, b| score(b).total_cmp(&score(a)));
}

/// Greedy rotated-IoU suppression: a box is dropped when its IoU with an
/// already kept, higher-ranked box exceeds `iou_thresh`.
pub fn nms(dets: &DetectionSet, iou_thresh: f64) -> DetectionSet {
    let mut boxes = dets.boxes.clone();
    sort_by_score(&mut boxes);
    let mut kept: Vec<BevBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| rotated_iou(k, &b) <= iou_thresh) {
            kept.push(b);
        }
    }
    DetectionSet { boxes: kept }
}

/// Decodes sample `n` of the head outputs: sigmoid scores at or above
/// `score_thresh` are kept, boxes are decoded from their anchors, then NMS.
pub fn decode_predictions<T: Scalar>(
    heads: &HeadOutputs<T>,
    n: usize,
    a: &AnchorSet,
    cfg: &DetectConfig,
    class_id: u32,
) -> DetectionSet {
    let cls = heads.cls.sample(n);
    let reg = heads.reg.sample(n);
    let plane = a.grid.num_cells();
    let mut boxes = Vec::new();
    for (idx, z) in cls.iter().enumerate() {
        let s = sigmoid(z.to_f64());
        if s < cfg.score_thresh {
            continue;
        }
        let (ai, cell) = (idx / plane, idx % plane);
        let t: [f64; REG_DIM] = std::array::from_fn(|k| reg[(ai * REG_DIM + k) * plane + cell].to_f64());
        let mut b = decode_box(&a.anchor(idx), &t);
        if !(b.w.is_finite() && b.l.is_finite() && b.w > 0.0 && b.l > 0.0) {
            continue;
        }
        b.class_id = class_id;
        b.score = Some(s);
        boxes.push(b);
    }
    nms(&DetectionSet { boxes }, cfg.nms_iou)
}
