//! BEV average precision, evaluation modes that corrupt the inputs, and a
//! top-down figure renderer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{ImageRgb, WeatherKind};
use crate::detect::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, BevBox};
use crate::radar_io::RadarPointCloud;
use crate::spg::{GridSpec, SemanticSource, RADAR_RANGE};
use crate::synthgen::{degrade_mask, Dataset};
use crate::train::Detector;

pub const MATCH_IOU: f64 = 0.5;

/// Greedy matching in score order: each detection takes the unmatched ground
/// truth with the highest IoU if that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &DetectionSet, gts: &[BevBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.boxes
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let iou = rotated_iou(d, g);
                if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall after each detection, in score order.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            PrPoint {
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
                precision: tp as f64 / (i + 1) as f64,
            }
        })
        .collect()
}

/// All-point interpolated AP: area under the PR curve after replacing each
/// precision with the best precision at equal or higher recall.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Clear,
    /// Degraded masks standing in for segmentation of weather-augmented images.
    Weather(WeatherKind),
    /// Label flips at rate 0.3 plus half of the mask hidden.
    CorruptSemantics,
    /// Semantic channels zeroed.
    RadarOnly,
    /// Occupancy and all point-statistic channels zeroed.
    CorruptRadar,
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            Self::Clear => "clear".into(),
            Self::Weather(k) => format!("weather:{}", serde_json::to_value(k).unwrap().as_str().unwrap()),
            Self::CorruptSemantics => "corrupt-semantics".into(),
            Self::RadarOnly => "radar-only".into(),
            Self::CorruptRadar => "corrupt-radar".into(),
        }
    }

    /// `(label flip rate, hidden fraction)` applied to the masks.
    pub fn mask_degradation(&self) -> Option<(f64, f64)> {
        match self {
            Self::Weather(WeatherKind::Fog) => Some((0.05, 0.4)),
            Self::Weather(WeatherKind::Rain) => Some((0.15, 0.15)),
            Self::Weather(WeatherKind::Snow) => Some((0.1, 0.25)),
            Self::CorruptSemantics => Some((0.3, 0.5)),
            _ => None,
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clear" => Self::Clear,
            "corrupt-semantics" => Self::CorruptSemantics,
            "radar-only" => Self::RadarOnly,
            "corrupt-radar" => Self::CorruptRadar,
            _ => match s.strip_prefix("weather:") {
                Some(k) => Self::Weather(k.parse()?),
                None => {
                    return Err(Error::Config(format!(
                        "unknown eval mode '{s}' (clear, weather:<fog|rain|snow>, corrupt-semantics, radar-only, corrupt-radar)"
                    )))
                }
            },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub ap: f64,
    pub ap_by_class: std::collections::BTreeMap<String, f64>,
    pub counts: Counts,
    /// Up to 50 evenly spaced samples of the PR curve.
    pub pr_curve: Vec<PrPoint>,
    /// Relative AP change versus the clear mode, in percent.
    pub drop_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, name: &str) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == name)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<20} {:>8} {:>9} {:>6} {:>6} {:>6} {:>6}\n", "mode", "AP", "change", "tp", "fp", "fn", "gt");
        for m in &self.modes {
            let change = m.drop_pct.map_or("-".to_string(), |d| format!("{:+.2}%", -d));
            let c = m.counts;
            let _ = writeln!(
                s,
                "{:<20} {:>8.4} {:>9} {:>6} {:>6} {:>6} {:>6}",
                m.mode, m.ap, change, c.tp, c.fp, c.fn_, c.num_gt
            );
        }
        s
    }
}

/// Detections for one frame under an evaluation mode.
pub fn detect_frame(det: &Detector, ds: &Dataset, index: usize, mode: EvalMode, seed: u64) -> Result<DetectionSet> {
    let f = &ds.frames[index];
    let degraded = mode
        .mask_degradation()
        .map(|(flip, hide)| degrade_mask(&f.mask, flip, hide, seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let sem: Option<&dyn SemanticSource> = match mode {
        EvalMode::RadarOnly => None,
        _ => Some(degraded.as_ref().unwrap_or(&f.mask)),
    };
    let mut spg = det.encode(&f.cloud, sem, &ds.calib)?;
    if mode == EvalMode::CorruptRadar {
        spg.zero_channels(RADAR_RANGE);
    }
    det.detect(&spg)
}

/// AP over `frames` of `ds`. Frames run on `jobs` threads; the global score
/// sort is stable over frame order, so the result does not depend on `jobs`.
pub fn evaluate_mode(det: &Detector, ds: &Dataset, frames: &[usize], mode: EvalMode, seed: u64, jobs: usize) -> Result<ModeReport> {
    if frames.is_empty() {
        return Err(Error::Validation("evaluation needs at least one frame".into()));
    }
    let per_frame = crate::parallel_map(frames.len(), jobs, |k| {
        let i = frames[k];
        let dets = detect_frame(det, ds, i, mode, seed)?;
        let flags = match_detections(&dets, &ds.frames[i].labels, MATCH_IOU);
        Ok(dets.boxes.iter().map(|b| b.score.unwrap_or(0.0)).zip(flags).collect::<Vec<_>>())
    })?;
    let num_gt: usize = frames.iter().map(|&i| ds.frames[i].labels.len()).sum();
    let mut all: Vec<(f64, bool)> = per_frame.into_iter().flatten().collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = all.iter().map(|a| a.1).collect();
    let ap = average_precision(&flags, num_gt);
    let tp = flags.iter().filter(|&&f| f).count();
    let curve = pr_curve(&flags, num_gt);
    let stride = curve.len().div_ceil(50).max(1);
    let mut pr: Vec<PrPoint> = curve.iter().step_by(stride).copied().collect();
    if let Some(last) = curve.last() {
        if pr.last() != Some(last) {
            pr.push(*last);
        }
    }
    Ok(ModeReport {
        mode: mode.name(),
        ap,
        ap_by_class: [("car".to_string(), ap)].into(),
        counts: Counts {
            tp,
            fp: flags.len() - tp,
            fn_: num_gt - tp,
            num_gt,
        },
        pr_curve: pr,
        drop_pct: None,
    })
}

/// Evaluates every mode; clear is always included first and the others carry
/// their percentage drop relative to it.
pub fn run_eval(det: &Detector, ds: &Dataset, frames: &[usize], modes: &[EvalMode], seed: u64, jobs: usize) -> Result<EvalReport> {
    let mut list = vec![EvalMode::Clear];
    list.extend(modes.iter().copied().filter(|m| *m != EvalMode::Clear));
    let mut reports = Vec::new();
    for m in list {
        reports.push(evaluate_mode(det, ds, frames, m, seed, jobs)?);
    }
    let clear = reports[0].ap;
    for r in reports.iter_mut().skip(1) {
        r.drop_pct = Some(if clear > 0.0 { 100.0 * (clear - r.ap) / clear } else { 0.0 });
    }
    Ok(EvalReport {
        frames: frames.len(),
        modes: reports,
    })
}

fn draw_box(img: &mut ImageRgb, to_px: &dyn Fn(f64, f64) -> (f64, f64), b: &BevBox, color: [u8; 3]) {
    let c = b.corners();
    for i in 0..4 {
        let (p, q) = (to_px(c[i][0], c[i][1]), to_px(c[(i + 1) % 4][0], c[(i + 1) % 4][1]));
        let steps = ((q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            put(img, p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), color);
        }
    }
}

fn put(img: &mut ImageRgb, col: f64, row: f64, color: [u8; 3]) {
    let (c, r) = (col.floor(), row.floor());
    if c < 0.0 || r < 0.0 || c >= img.width as f64 || r >= img.height as f64 {
        return;
    }
    let i = (r as usize * img.width + c as usize) * 3;
    img.pixels[i..i + 3].copy_from_slice(&color);
}

/// Top-down figure: forward is up, lateral to the right. Radar points are
/// white, ground truth green, detections red.
pub fn render_bev(grid: &GridSpec, cloud: &RadarPointCloud, gts: &[BevBox], dets: &DetectionSet, px_per_cell: usize) -> ImageRgb {
    let s = px_per_cell.max(1);
    let (width, height) = (grid.cells_z * s, grid.cells_x * s);
    let mut img = ImageRgb {
        width,
        height,
        pixels: vec![24; width * height * 3],
    };
    let (cx, cz) = (grid.cell_x() / s as f64, grid.cell_z() / s as f64);
    let to_px = move |x: f64, z: f64| ((z - grid.z_range[0]) / cz, (grid.x_range[1] - x) / cx);
    for p in &cloud.points {
        let (c, r) = to_px(p.position.x, p.position.z);
        put(&mut img, c, r, [230, 230, 230]);
    }
    for g in gts {
        draw_box(&mut img, &to_px, g, [40, 220, 60]);
    }
    for d in &dets.boxes {
        draw_box(&mut img, &to_px, d, [235, 50, 40]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, z: f64) -> BevBox {
        BevBox::new(x, z, 2.0, 4.0, 0.0)
    }

    #[test]
    fn exact_detections_are_all_true_positives() {
        let gts = vec![b(10.0, 0.0), b(20.0, 5.0), b(30.0, -5.0)];
        let dets = DetectionSet { boxes: gts.iter().map(|g| g.with_score(0.9)).collect() };
        let flags = match_detections(&dets, &gts, 0.5);
        assert_eq!(flags, vec![true; 3]);
        assert_eq!(average_precision(&flags, 3), 1.0);
    }

    #[test]
    fn one_ground_truth_matches_once() {
        let gts = vec![b(10.0, 0.0)];
        let dets = DetectionSet { boxes: vec![b(10.0, 0.0).with_score(0.9), b(10.1, 0.0).with_score(0.8)] };
        assert_eq!(match_detections(&dets, &gts, 0.5), vec![true, false]);
    }

    #[test]
    fn hand_computed_ap() {
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
        assert_eq!(average_precision(&[], 2), 0.0);
        // envelope: precision 2/3 at recall 1 lifts the dip at rank 2
        assert!((average_precision(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for s in ["clear", "weather:fog", "weather:rain", "weather:snow", "corrupt-semantics", "radar-only", "corrupt-radar"] {
            assert_eq!(s.parse::<EvalMode>().unwrap().name(), s);
        }
        assert!("weather:hail".parse::<EvalMode>().is_err());
        assert!("sunny".parse::<EvalMode>().is_err());
    }

    #[test]
    fn render_draws_boxes() {
        let g = GridSpec::with_cells(32);
        let img = render_bev(&g, &RadarPointCloud::default(), &[b(40.0, 0.0)], &DetectionSet::default(), 2);
        assert_eq!((img.width, img.height), (64, 64));
        assert!(img.pixels.chunks(3).any(|p| p == [40, 220, 60]));
    }
}
