//! Radar ingestion: point-cloud CSV, 16-bit intensity maps, label JSON, and
//! cell-averaging CFAR conversion of intensity maps into point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, BevBox, CalibrationSet, Point3};
use crate::netpbm::Pgm;

pub const POINT_CSV_HEADER: &str = "x,y,z,doppler,intensity";

/// Labels farther than this from the radar are not evaluated.
pub const DEFAULT_MAX_RANGE: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarPoint {
    pub position: Point3,
    /// Radial velocity, m/s.
    pub doppler: f64,
    /// Reflected power, dimensionless, non-negative.
    pub intensity: f64,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, z: f64, doppler: f64, intensity: f64) -> Self {
        Self {
            position: Point3::radar(x, y, z),
            doppler,
            intensity,
        }
    }
}

/// Points in file order; encoders accumulate in this order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut s = String::with_capacity(32 * (self.points.len() + 1));
        s.push_str(POINT_CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.position.x, p.position.y, p.position.z, p.doppler, p.intensity
            ));
        }
        s.into_bytes()
    }
}

pub fn parse_point_cloud(bytes: &[u8]) -> Result<RadarPointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let names: Vec<&str> = header.iter().collect();
    if names != ["x", "y", "z", "doppler", "intensity"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header '{POINT_CSV_HEADER}'"),
        });
    }
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut v = [0.0f64; 5];
        for (i, slot) in v.iter_mut().enumerate() {
            let field = rec.get(i).ok_or_else(|| Error::Parse {
                line,
                msg: "missing field".into(),
            })?;
            *slot = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("'{field}' is not a number"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite value '{field}'"),
                });
            }
        }
        if v[4] < 0.0 {
            return Err(Error::Parse {
                line,
                msg: "negative intensity".into(),
            });
        }
        points.push(RadarPoint::new(v[0], v[1], v[2], v[3], v[4]));
    }
    Ok(RadarPointCloud { points })
}

/// Dense BEV intensity grid. Row `i` runs along `x`, column `j` along `z`;
/// cell `(i, j)` is centered at `origin + (i, j) * meters_per_cell`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub meters_per_cell: f64,
    pub origin: [f64; 2],
    pub forward_crop: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapMeta {
    meters_per_cell: f64,
    origin: [f64; 2],
    forward_crop: bool,
}

impl IntensityMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, meters_per_cell: f64) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Validation(format!(
                "{rows}x{cols} map needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if !(meters_per_cell > 0.0) {
            return Err(Error::Validation("meters_per_cell must be > 0".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation("intensities must be finite and >= 0".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            meters_per_cell,
            origin: [0.0, 0.0],
            forward_crop: false,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin[0] + i as f64 * self.meters_per_cell,
            self.origin[1] + j as f64 * self.meters_per_cell,
        )
    }

    /// Serializes as 16-bit PGM plus sidecar JSON. Values are rounded and
    /// clamped into `0..=65535`.
    pub fn to_pgm(&self) -> (Vec<u8>, Vec<u8>) {
        let pgm = Pgm {
            width: self.cols,
            height: self.rows,
            maxval: 65535,
            samples: self
                .values
                .iter()
                .map(|v| v.round().clamp(0.0, 65535.0) as u16)
                .collect(),
        };
        let meta = MapMeta {
            meters_per_cell: self.meters_per_cell,
            origin: self.origin,
            forward_crop: self.forward_crop,
        };
        (pgm.to_bytes(), serde_json::to_vec(&meta).expect("meta serializes"))
    }
}

pub fn parse_intensity_map(pgm_bytes: &[u8], meta_json: &[u8]) -> Result<IntensityMap> {
    let pgm = Pgm::parse(pgm_bytes)?;
    if pgm.maxval != 65535 {
        return Err(Error::Format(format!(
            "intensity map must be 16-bit (maxval 65535), got {}",
            pgm.maxval
        )));
    }
    let meta: MapMeta = serde_json::from_slice(meta_json)?;
    let mut map = IntensityMap::new(
        pgm.height,
        pgm.width,
        pgm.samples.iter().map(|&s| s as f64).collect(),
        meta.meters_per_cell,
    )?;
    map.origin = meta.origin;
    map.forward_crop = meta.forward_crop;
    Ok(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfarConfig {
    /// Training band width on each side of the guard band.
    pub train_cells: usize,
    /// Guard band width on each side of the cell under test.
    pub guard_cells: usize,
    /// Design probability of false alarm.
    pub pfa: f64,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            train_cells: 8,
            guard_cells: 2,
            pfa: 1e-3,
        }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_cells == 0 || !(self.pfa > 0.0 && self.pfa < 1.0) {
            return Err(Error::Config(
                "CFAR needs train_cells >= 1 and 0 < pfa < 1".into(),
            ));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.train_cells + self.guard_cells
    }

    /// Number of training cells in the 2D window.
    pub fn num_train(&self) -> usize {
        let outer = 2 * self.half_window() + 1;
        let inner = 2 * self.guard_cells + 1;
        outer * outer - inner * inner
    }

    /// Threshold multiplier `N * (pfa^(-1/N) - 1)` for exponential noise.
    pub fn alpha(&self) -> f64 {
        let n = self.num_train() as f64;
        n * (self.pfa.powf(-1.0 / n) - 1.0)
    }
}

/// 2D cell-averaging CFAR. Detected cells become points at their BEV center
/// with height `calib.sensor_height`, zero doppler and the cell intensity,
/// emitted in row-major order.
pub fn cfar_detect(
    map: &IntensityMap,
    cfg: &CfarConfig,
    calib: &CalibrationSet,
) -> Result<RadarPointCloud> {
    cfg.validate()?;
    let half = cfg.half_window();
    let win = 2 * half + 1;
    if win > map.rows || win > map.cols {
        return Err(Error::Config(format!(
            "CFAR window {win}x{win} exceeds map {}x{}",
            map.rows, map.cols
        )));
    }
    // summed-area table with a zero border row/column
    let (r, c) = (map.rows, map.cols);
    let mut sat = vec![0.0f64; (r + 1) * (c + 1)];
    for i in 0..r {
        let mut row = 0.0;
        for j in 0..c {
            row += map.get(i, j);
            sat[(i + 1) * (c + 1) + j + 1] = sat[i * (c + 1) + j + 1] + row;
        }
    }
    let rect = |i0: usize, j0: usize, i1: usize, j1: usize| {
        // inclusive-exclusive [i0, i1) x [j0, j1)
        sat[i1 * (c + 1) + j1] - sat[i0 * (c + 1) + j1] - sat[i1 * (c + 1) + j0]
            + sat[i0 * (c + 1) + j0]
    };
    let g = cfg.guard_cells;
    let n = cfg.num_train() as f64;
    let alpha = cfg.alpha();
    let mut points = Vec::new();
    for i in half..r - half {
        for j in half..c - half {
            let (x, z) = map.cell_center(i, j);
            if map.forward_crop && x < 0.0 {
                continue;
            }
            let outer = rect(i - half, j - half, i + half + 1, j + half + 1);
            let inner = rect(i - g, j - g, i + g + 1, j + g + 1);
            let noise = (outer - inner) / n;
            let v = map.get(i, j);
            if v > alpha * noise {
                points.push(RadarPoint::new(x, calib.sensor_height, z, 0.0, v));
            }
        }
    }
    Ok(RadarPointCloud { points })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelJson {
    cx: f64,
    cy: f64,
    w: f64,
    l: f64,
    yaw: f64,
    class: u32,
    #[serde(default)]
    score: Option<f64>,
}

/// Parses a JSON list of `{cx, cy, w, l, yaw, class[, score]}`. Yaw is
/// normalized into `(-pi, pi]`; with `max_range`, boxes whose center lies
/// farther than that from the radar are dropped.
pub fn parse_labels(bytes: &[u8], max_range: Option<f64>) -> Result<Vec<BevBox>> {
    let raw: Vec<LabelJson> = serde_json::from_slice(bytes)?;
    let mut out = Vec::with_capacity(raw.len());
    for (i, b) in raw.into_iter().enumerate() {
        let finite = [b.cx, b.cy, b.w, b.l, b.yaw].iter().all(|v| v.is_finite());
        if !finite || b.w <= 0.0 || b.l <= 0.0 {
            return Err(Error::Validation(format!(
                "label {i}: sizes must be positive and all fields finite"
            )));
        }
        if let Some(r) = max_range {
            if b.cx.hypot(b.cy) > r {
                continue;
            }
        }
        out.push(BevBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            l: b.l,
            yaw: normalize_angle(b.yaw),
            class_id: b.class,
            score: b.score,
        });
    }
    Ok(out)
}

pub fn labels_to_json(boxes: &[BevBox]) -> Vec<u8> {
    serde_json::to_vec_pretty(boxes).expect("boxes serialize")
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};

    fn calib() -> CalibrationSet {
        CalibrationSet {
            intrinsics: CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 32.0, width: 128, height: 64 },
            radar_to_camera: RigidTransform::identity(),
            sensor_height: 1.2,
        }
    }

    #[test]
    fn csv_rows_map_to_fields() {
        let cloud = parse_point_cloud(b"x,y,z,doppler,intensity\n").unwrap();
        assert!(cloud.is_empty());
        let cloud = parse_point_cloud(b"x,y,z,doppler,intensity\n10.0,0.5,-2.0,3.1,40.0\n").unwrap();
        let p = cloud.points[0];
        assert_eq!((p.position.x, p.position.y, p.position.z), (10.0, 0.5, -2.0));
        assert_eq!((p.doppler, p.intensity), (3.1, 40.0));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = parse_point_cloud(b"x,y,z,doppler,intensity\n1,2,3,4,5\n1,2,NaN,4,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_point_cloud(b"x,y,z,doppler,intensity\n1,2,3,4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_point_cloud(b"x,y,z,doppler,intensity\n1,2,abc,4,5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_point_cloud(b"a,b\n").is_err());
    }

    #[test]
    fn pgm_checks() {
        let mut b = b"P5\n2 2\n65535\n".to_vec();
        b.extend_from_slice(&[0; 8]);
        let meta = br#"{"meters_per_cell":0.5,"origin":[0,0],"forward_crop":false}"#;
        let m = parse_intensity_map(&b, meta).unwrap();
        assert_eq!(m.values, vec![0.0; 4]);
        assert!(parse_intensity_map(&b[..b.len() - 2], meta).is_err());
        let mut p2 = b.clone();
        p2[1] = b'2';
        assert!(matches!(parse_intensity_map(&p2, meta), Err(Error::Format(_))));
        let mut b8 = b"P5\n2 2\n255\n".to_vec();
        b8.extend_from_slice(&[0; 4]);
        assert!(matches!(parse_intensity_map(&b8, meta), Err(Error::Format(_))));
    }

    #[test]
    fn constant_map_has_no_detections() {
        let mut map = IntensityMap::new(40, 40, vec![7.0; 1600], 0.5).unwrap();
        map.origin = [1.0, -10.0];
        let pts = cfar_detect(&map, &CfarConfig::default(), &calib()).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn single_spike_is_detected_once() {
        let mut vals = vec![1.0; 32 * 32];
        vals[16 * 32 + 10] = 100.0;
        let mut map = IntensityMap::new(32, 32, vals, 0.5).unwrap();
        map.origin = [2.0, -8.0];
        let cfg = CfarConfig { train_cells: 4, guard_cells: 1, pfa: 1e-3 };
        let pts = cfar_detect(&map, &cfg, &calib()).unwrap();
        assert_eq!(pts.len(), 1);
        let p = pts.points[0];
        assert_eq!((p.position.x, p.position.z), (2.0 + 16.0 * 0.5, -8.0 + 10.0 * 0.5));
        assert_eq!((p.position.y, p.doppler, p.intensity), (1.2, 0.0, 100.0));
    }

    #[test]
    fn window_larger_than_map_is_config_error() {
        let map = IntensityMap::new(10, 40, vec![1.0; 400], 1.0).unwrap();
        assert!(matches!(
            cfar_detect(&map, &CfarConfig::default(), &calib()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_crop_skips_rear_cells() {
        let mut vals = vec![1.0; 40 * 20];
        vals[10 * 20 + 10] = 500.0; // x = -10 + 10 = 0 (kept)
        vals[5 * 20 + 10] = 500.0; // x = -5 (dropped)
        let mut map = IntensityMap::new(40, 20, vals, 1.0).unwrap();
        map.origin = [-10.0, -10.0];
        let cfg = CfarConfig { train_cells: 2, guard_cells: 1, pfa: 1e-3 };
        assert_eq!(cfar_detect(&map, &cfg, &calib()).unwrap().len(), 2);
        map.forward_crop = true;
        let pts = cfar_detect(&map, &cfg, &calib()).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts.points[0].position.x, 0.0);
    }

    #[test]
    fn labels_parse_and_filter() {
        assert!(parse_labels(b"[]", None).unwrap().is_empty());
        let b = format!(r#"[{{"cx":10,"cy":0,"w":2,"l":4,"yaw":{},"class":0}}]"#, 1.5 * PI);
        let boxes = parse_labels(b.as_bytes(), None).unwrap();
        assert!((boxes[0].yaw + PI / 2.0).abs() < 1e-12);
        let far = br#"[{"cx":95,"cy":0,"w":2,"l":4,"yaw":0,"class":0},{"cx":20,"cy":1,"w":2,"l":4,"yaw":0,"class":0}]"#;
        assert_eq!(parse_labels(far, Some(80.0)).unwrap().len(), 1);
        assert_eq!(parse_labels(far, None).unwrap().len(), 2);
        let bad = br#"[{"cx":1,"cy":0,"w":0,"l":4,"yaw":0,"class":0}]"#;
        assert!(matches!(parse_labels(bad, None), Err(Error::Validation(_))));
    }
}
