//! Frames, rigid transforms, pinhole projection and rotated BEV boxes.
//!
//! Axis convention (radar and camera frames alike): `x` is forward depth,
//! `y` is height (up), `z` is lateral. BEV geometry lives in the `(x, z)`
//! plane, so a [`BevBox`] center `(cx, cy)` is `(x, z)`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Areas below this are treated as empty.
pub const AREA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Radar,
    Camera,
}

impl Frame {
    fn flipped(self) -> Self {
        match self {
            Frame::Radar => Frame::Camera,
            Frame::Camera => Frame::Radar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub frame: Frame,
}

impl Point3 {
    pub fn radar(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, frame: Frame::Radar }
    }

    pub fn camera(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, frame: Frame::Camera }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` about the height (`y`) axis, turning `+x` towards `+z`.
    pub fn about_height(angle: f64, translation: [f64; 3]) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]],
            translation,
        }
    }

    /// Checks orthonormality (1e-6) and a positive determinant.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 || !dot.is_finite() {
                    return Err(Error::Validation("rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("rotation determinant {det} != 1")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let mut ti = [0.0; 3];
        for (i, v) in ti.iter_mut().enumerate() {
            *v = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self {
            rotation: rt,
            translation: ti,
        }
    }

    /// Row-major 4x4 homogeneous matrix.
    pub fn to_matrix(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Validation(format!(
                "transform needs 16 values, got {}",
                m.len()
            )));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Validation("last transform row must be [0,0,0,1]".into()));
        }
        let t = Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        };
        t.validate()?;
        Ok(t)
    }
}

/// `rotation * p + translation`; the frame tag flips.
pub fn transform_point(p: &Point3, t: &RigidTransform) -> Point3 {
    let r = &t.rotation;
    let v = [p.x, p.y, p.z];
    let o: [f64; 3] =
        std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + t.translation[i]);
    Point3 {
        x: o[0],
        y: o[1],
        z: o[2],
        frame: p.frame.flipped(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid intrinsics {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub u: u32,
    pub v: u32,
}

/// Nearest pixel of a camera-frame point (round half away from zero), or
/// `None` when the point is behind the camera or lands outside the image.
pub fn project_to_pixel(p: &Point3, k: &CameraIntrinsics) -> Option<PixelCoord> {
    let depth = p.x;
    if depth <= 0.0 || !p.is_finite() {
        return None;
    }
    let u = (k.fx * p.z / depth + k.cx).round();
    let v = (k.fy * (-p.y) / depth + k.cy).round();
    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
        return None;
    }
    Some(PixelCoord {
        u: u as u32,
        v: v as u32,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationSet {
    pub intrinsics: CameraIntrinsics,
    pub radar_to_camera: RigidTransform,
    /// Height coordinate assigned to points recovered from 2D intensity maps.
    pub sensor_height: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationJson {
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "T_radar_to_cam")]
    t_radar_to_cam: Vec<f64>,
    sensor_height: f64,
    image_size: [u32; 2],
}

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.radar_to_camera.validate()?;
        if !self.sensor_height.is_finite() {
            return Err(Error::Validation("sensor_height must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let j: CalibrationJson = serde_json::from_slice(bytes)?;
        let k = j.k;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Validation(
                "K must be [[fx,0,cx],[0,fy,cy],[0,0,1]]".into(),
            ));
        }
        let calib = Self {
            intrinsics: CameraIntrinsics {
                fx: k[0][0],
                fy: k[1][1],
                cx: k[0][2],
                cy: k[1][2],
                width: j.image_size[0],
                height: j.image_size[1],
            },
            radar_to_camera: RigidTransform::from_matrix(&j.t_radar_to_cam)?,
            sensor_height: j.sensor_height,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let i = &self.intrinsics;
        let j = CalibrationJson {
            k: [[i.fx, 0.0, i.cx], [0.0, i.fy, i.cy], [0.0, 0.0, 1.0]],
            t_radar_to_cam: self.radar_to_camera.to_matrix().to_vec(),
            sensor_height: self.sensor_height,
            image_size: [i.width, i.height],
        };
        serde_json::to_vec_pretty(&j).expect("calibration serializes")
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rotated rectangle in the BEV `(x, z)` plane. `l` runs along the heading
/// `yaw` (measured from `+x` towards `+z`), `w` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BevBox {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            l,
            yaw: normalize_angle(yaw),
            class_id: 0,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners in counter-clockwise order as `[x, z]`.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let along = [c * hl, s * hl];
        let across = [-s * hw, c * hw];
        [
            [self.cx + along[0] - across[0], self.cy + along[1] - across[1]],
            [self.cx + along[0] + across[0], self.cy + along[1] + across[1]],
            [self.cx - along[0] + across[0], self.cy - along[1] + across[1]],
            [self.cx - along[0] - across[0], self.cy - along[1] - across[1]],
        ]
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dz) = (x - self.cx, z - self.cy);
        let a = dx * c + dz * s;
        let b = -dx * s + dz * c;
        a.abs() <= self.l / 2.0 && b.abs() <= self.w / 2.0
    }

    /// Radius of the circumscribed circle.
    pub fn radius(&self) -> f64 {
        0.5 * (self.w * self.w + self.l * self.l).sqrt()
    }

    fn total_cmp(&self, o: &Self) -> Ordering {
        self.cx
            .total_cmp(&o.cx)
            .then(self.cy.total_cmp(&o.cy))
            .then(self.w.total_cmp(&o.w))
            .then(self.l.total_cmp(&o.l))
            .then(self.yaw.total_cmp(&o.yaw))
    }
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s
}

/// Area of the intersection of two convex counter-clockwise polygons
/// (Sutherland–Hodgman clipping of `a` by every edge of `b`).
pub fn polygon_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    if shoelace(a).abs() < AREA_EPS || shoelace(b).abs() < AREA_EPS {
        return 0.0;
    }
    let mut out: Vec<[f64; 2]> = a.to_vec();
    let n = b.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (e0, e1) = (b[i], b[(i + 1) % n]);
        let side = |p: [f64; 2]| (e1[0] - e0[0]) * (p[1] - e0[1]) - (e1[1] - e0[1]) * (p[0] - e0[0]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(lerp(prev, cur, sp / (sp - sc)));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(lerp(prev, cur, sp / (sp - sc)));
            }
        }
    }
    let area = shoelace(&out);
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

fn lerp(p: [f64; 2], q: [f64; 2], t: f64) -> [f64; 2] {
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection over union of two rotated boxes.
pub fn rotated_iou(a: &BevBox, b: &BevBox) -> f64 {
    let (dx, dz) = (a.cx - b.cx, a.cy - b.cy);
    let reach = a.radius() + b.radius();
    if dx * dx + dz * dz >= reach * reach {
        return 0.0;
    }
    // fixed evaluation order keeps the result exactly symmetric
    let (p, q) = if a.total_cmp(b) == Ordering::Greater { (b, a) } else { (a, b) };
    let inter = polygon_intersection_area(&p.corners(), &q.corners());
    if inter <= 0.0 {
        return 0.0;
    }
    let union = p.area() + q.area() - inter;
    if union <= AREA_EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Vec<[f64; 2]> {
        vec![[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]]
    }

    #[test]
    fn transform_identity_and_translation() {
        let p = Point3::radar(1.0, 2.0, 3.0);
        let q = transform_point(&p, &RigidTransform::identity());
        assert_eq!((q.x, q.y, q.z), (1.0, 2.0, 3.0));
        assert_eq!(q.frame, Frame::Camera);
        let q = transform_point(
            &Point3::radar(1.0, 0.0, 0.0),
            &RigidTransform::translation([0.0, 0.0, 5.0]),
        );
        assert_eq!((q.x, q.y, q.z), (1.0, 0.0, 5.0));
    }

    #[test]
    fn rotation_round_trip() {
        let t = RigidTransform::about_height(PI / 2.0, [0.3, -0.2, 1.0]);
        t.validate().unwrap();
        let p = Point3::radar(4.0, -1.5, 2.5);
        let back = transform_point(&transform_point(&p, &t), &t.inverse());
        assert!((back.x - p.x).abs() < 1e-9 && (back.y - p.y).abs() < 1e-9 && (back.z - p.z).abs() < 1e-9);
        assert_eq!(back.frame, Frame::Radar);
    }

    #[test]
    fn projection_rules() {
        let k = CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 64.0, width: 128, height: 128 };
        assert_eq!(project_to_pixel(&Point3::camera(5.0, 0.0, 0.0), &k), Some(PixelCoord { u: 64, v: 64 }));
        assert_eq!(project_to_pixel(&Point3::camera(0.0, 0.0, 0.0), &k), None);
        assert_eq!(project_to_pixel(&Point3::camera(-2.0, 0.0, 0.0), &k), None);
        assert_eq!(project_to_pixel(&Point3::camera(1.0, 0.0, 0.5), &k).unwrap().u, 114);
        // 0.63 m lateral at depth 1 lands at u = 127.0 -> in frame; 0.64 -> 128 -> out
        assert!(project_to_pixel(&Point3::camera(1.0, 0.0, 0.63), &k).is_some());
        assert!(project_to_pixel(&Point3::camera(1.0, 0.0, 0.64), &k).is_none());
        // half-pixel rounds away from zero
        assert_eq!(project_to_pixel(&Point3::camera(1.0, 0.0, 0.005), &k).unwrap().u, 65);
    }

    #[test]
    fn intersection_area_cases() {
        let a = square(0.0, 0.0, 1.0);
        assert!((polygon_intersection_area(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(polygon_intersection_area(&a, &square(3.0, 0.0, 1.0)), 0.0);
        assert!((polygon_intersection_area(&a, &square(0.5, 0.0, 1.0)) - 0.5).abs() < 1e-12);
        let degenerate = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(polygon_intersection_area(&a, &degenerate), 0.0);
    }

    #[test]
    fn iou_cases() {
        let a = BevBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = BevBox::new(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        // a square rotated by 90 degrees is the same square
        let c = BevBox::new(0.0, 0.0, 1.0, 1.0, PI / 2.0);
        assert!((rotated_iou(&a, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_normalization() {
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert_eq!(normalize_angle(0.25), 0.25);
    }

    #[test]
    fn calibration_json_round_trip() {
        let calib = CalibrationSet {
            intrinsics: CameraIntrinsics { fx: 120.0, fy: 110.0, cx: 160.0, cy: 80.0, width: 320, height: 160 },
            radar_to_camera: RigidTransform::about_height(0.01, [0.0, -0.5, 0.1]),
            sensor_height: 0.8,
        };
        let parsed = CalibrationSet::from_json(&calib.to_json()).unwrap();
        assert_eq!(parsed, calib);
        let bad = br#"{"K":[[1,0,5],[0,1,5],[0,0,1]],"T_radar_to_cam":[1,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1],"sensor_height":1.0,"image_size":[10,10],"extra":1}"#;
        assert!(CalibrationSet::from_json(bad).is_err());
    }
}
