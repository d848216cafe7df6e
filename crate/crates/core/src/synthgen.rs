//! Seeded synthetic scenes: radar clouds, segmentation masks, calibration and
//! BEV labels that agree with each other, plus dataset directory I/O.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::value_noise;
use crate::error::{Error, Result};
use crate::geometry::{
    project_to_pixel, transform_point, BevBox, CalibrationSet, CameraIntrinsics, Point3, RigidTransform,
};
use crate::radar_io::{labels_to_json, parse_labels, parse_point_cloud, RadarPoint, RadarPointCloud};
use crate::spg::{classes, GridSpec, Palette, SemanticMask};

/// Radar mount height above the ground; the ground plane sits at `y = -MOUNT_HEIGHT`.
pub const MOUNT_HEIGHT: f64 = 0.8;

/// Label class id written for vehicles.
pub const VEHICLE_CLASS: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Inclusive range.
    pub num_vehicles: [usize; 2],
    /// Mean vehicle `(w, l)` in meters.
    pub vehicle_size: [f64; 2],
    /// Relative uniform jitter applied to each vehicle dimension.
    pub size_jitter: f64,
    /// Inclusive range of clutter objects (walls, vegetation, poles) with
    /// vehicle-like footprints.
    pub clutter_clusters: [usize; 2],
    /// Scattered ground returns per clutter object.
    pub stray_points_per_cluster: usize,
    /// Forward placement range in meters.
    pub depth_range: [f64; 2],
    pub dropout: f64,
    /// Bound on the BEV position noise of each point, in meters.
    pub position_noise: f64,
    pub moving_fraction: f64,
    pub max_speed: f64,
    /// Per-pixel probability of replacing a mask label with a random class.
    pub semantic_noise: f64,
    /// Fraction of mask pixels hidden under seeded fog patches (set to unlabeled).
    pub fog_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_vehicles: [1, 5],
            vehicle_size: [1.9, 4.6],
            size_jitter: 0.1,
            clutter_clusters: [2, 5],
            stray_points_per_cluster: 4,
            depth_range: [6.0, 72.0],
            dropout: 0.1,
            position_noise: 0.1,
            moving_fraction: 0.5,
            max_speed: 12.0,
            semantic_noise: 0.0,
            fog_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Defaults with the placement depth fitted to the grid's forward range.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let far = (grid.x_range[1] - 2.0).min(72.0);
        Self {
            depth_range: [(grid.x_range[0] + 5.0).max(1.0).min(far - 1.0), far],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
            Ok(())
        };
        unit("dropout", self.dropout)?;
        unit("moving_fraction", self.moving_fraction)?;
        unit("semantic_noise", self.semantic_noise)?;
        unit("fog_fraction", self.fog_fraction)?;
        unit("size_jitter", self.size_jitter)?;
        if !(self.position_noise >= 0.0 && self.position_noise < 0.5) {
            return Err(Error::Config("position_noise must be in [0, 0.5)".into()));
        }
        if self.num_vehicles[0] > self.num_vehicles[1] || self.clutter_clusters[0] > self.clutter_clusters[1] {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        if !(self.vehicle_size[0] > 0.5 && self.vehicle_size[1] >= self.vehicle_size[0]) {
            return Err(Error::Config("vehicle_size must be (w, l) with 0.5 < w <= l".into()));
        }
        if !(self.depth_range[0] >= 1.0 && self.depth_range[0] < self.depth_range[1]) {
            return Err(Error::Config("depth_range must be ordered and start at >= 1 m".into()));
        }
        if !(self.max_speed >= 0.0) {
            return Err(Error::Config("max_speed must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed forward-looking camera 0.3 m above the radar with a slight toe-in.
pub fn default_calibration() -> CalibrationSet {
    CalibrationSet {
        intrinsics: CameraIntrinsics {
            fx: 120.0,
            fy: 120.0,
            cx: 160.0,
            cy: 80.0,
            width: 320,
            height: 160,
        },
        radar_to_camera: RigidTransform::about_height(0.01, [0.0, -0.3, 0.1]),
        sensor_height: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: RadarPointCloud,
    pub mask: SemanticMask,
    pub calib: CalibrationSet,
    pub labels: Vec<BevBox>,
    /// For each point, the index of the vehicle that produced it.
    pub owner: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
struct Object {
    footprint: BevBox,
    height: f64,
    class: u8,
    /// Radial-speed model: `(speed, heading)` for moving vehicles.
    motion: Option<f64>,
    vehicle: bool,
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    grid: &GridSpec,
    placed: &[Object],
    size: (f64, f64),
    yaw: f64,
) -> Option<BevBox> {
    for _ in 0..200 {
        let x = rng.random_range(cfg.depth_range[0]..cfg.depth_range[1]);
        let z = rng.random_range(0.9 * grid.z_range[0]..=0.9 * grid.z_range[1]);
        let b = BevBox::new(x, z, size.0, size.1, yaw);
        let inside = b.corners().iter().all(|c| {
            grid.contains_xz(c[0], c[1]) && c[0].hypot(c[1]) < 78.0
        });
        let clear = placed.iter().all(|o| {
            (o.footprint.cx - b.cx).hypot(o.footprint.cy - b.cy) > o.footprint.radius() + b.radius() + 0.3
        });
        if inside && clear {
            return Some(b);
        }
    }
    None
}

/// Whether the sight line from the sensor to `b` passes through a nearer object.
fn occluded(b: &BevBox, others: &[&Object]) -> bool {
    let range = b.cx.hypot(b.cy);
    let stop = (range - b.radius()).max(0.0) / range;
    (1..40).any(|k| {
        let t = stop * k as f64 / 40.0;
        let (x, z) = (b.cx * t, b.cy * t);
        others.iter().any(|o| o.footprint.contains(x, z))
    })
}

fn noise_in_disk(rng: &mut ChaCha8Rng, sigma: f64) -> (f64, f64) {
    if sigma == 0.0 {
        return (0.0, 0.0);
    }
    let r = sigma * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (r * a.cos(), r * a.sin())
}

/// Surface samples on the sensor-facing sides of a footprint, pulled inside
/// the box by `inset` so that bounded noise keeps them within it.
fn face_samples(rng: &mut ChaCha8Rng, b: &BevBox, n: usize, inset: f64) -> Vec<(f64, f64)> {
    let c = b.corners();
    let mut faces = Vec::new();
    for i in 0..4 {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        let outward = [mid[0] - b.cx, mid[1] - b.cy];
        if outward[0] * mid[0] + outward[1] * mid[1] < 0.0 {
            faces.push((p, q, (q[0] - p[0]).hypot(q[1] - p[1])));
        }
    }
    if faces.is_empty() {
        faces.push((c[0], c[1], b.w.min(b.l)));
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let inset = inset.min(0.45 * b.w.min(b.l));
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = faces[faces.len() - 1];
            for f in &faces {
                if pick < f.2 {
                    face = *f;
                    break;
                }
                pick -= f.2;
            }
            let margin = (inset / face.2).min(0.45);
            let t = rng.random_range(margin..=1.0 - margin);
            let x = face.0[0] + t * (face.1[0] - face.0[0]);
            let z = face.0[1] + t * (face.1[1] - face.0[1]);
            // step inward along the face normal
            let (ex, ez) = ((face.1[0] - face.0[0]) / face.2, (face.1[1] - face.0[1]) / face.2);
            let (mut nx, mut nz) = (-ez, ex);
            if nx * (b.cx - x) + nz * (b.cy - z) < 0.0 {
                (nx, nz) = (-nx, -nz);
            }
            (x + nx * inset, z + nz * inset)
        })
        .collect()
}

fn interior_samples(rng: &mut ChaCha8Rng, b: &BevBox, n: usize, inset: f64) -> Vec<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    let hl = (b.l / 2.0 - inset).max(0.05);
    let hw = (b.w / 2.0 - inset).max(0.05);
    (0..n)
        .map(|_| {
            let a = rng.random_range(-hl..=hl);
            let q = rng.random_range(-hw..=hw);
            (b.cx + a * c - q * s, b.cy + a * s + q * c)
        })
        .collect()
}

fn radial_doppler(x: f64, z: f64, yaw: f64, speed: f64) -> f64 {
    let r = x.hypot(z);
    speed * (yaw.cos() * x + yaw.sin() * z) / r
}

/// Point budget for an object at `range` meters: denser up close.
fn point_budget(rng: &mut ChaCha8Rng, range: f64) -> usize {
    let base = rng.random_range(5.0..11.0);
    ((base * (30.0 / range).clamp(0.5, 1.5)).round() as usize).max(3)
}

/// Convex hull (monotone chain), counter-clockwise.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn fill_convex(mask: &mut [u8], k: &CameraIntrinsics, hull: &[[f64; 2]], class: u8) {
    if hull.len() < 3 {
        return;
    }
    let (w, h) = (k.width as i64, k.height as i64);
    let lo_u = hull.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
    let hi_u = (hull.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as i64).min(w - 1);
    let lo_v = hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as i64;
    let hi_v = (hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as i64).min(h - 1);
    for v in lo_v..=hi_v {
        for u in lo_u..=hi_u {
            let p = [u as f64, v as f64];
            let inside = (0..hull.len()).all(|i| {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
            });
            if inside {
                mask[(v * w + u) as usize] = class;
            }
        }
    }
}

fn render_object(mask: &mut [u8], calib: &CalibrationSet, o: &Object) {
    let k = &calib.intrinsics;
    let mut pts = Vec::with_capacity(8);
    for c in o.footprint.corners() {
        for y in [-MOUNT_HEIGHT, -MOUNT_HEIGHT + o.height] {
            let cam = transform_point(&Point3::radar(c[0], y, c[1]), &calib.radar_to_camera);
            if cam.x <= 0.1 {
                return;
            }
            pts.push([k.fx * cam.z / cam.x + k.cx, k.fy * -cam.y / cam.x + k.cy]);
        }
    }
    fill_convex(mask, k, &convex_hull(pts), o.class);
}

/// Replaces each pixel with a uniformly random class with probability
/// `flip_rate`, then hides the `fog_fraction` of pixels with the highest
/// seeded value-noise under the unlabeled id.
pub fn degrade_mask(mask: &SemanticMask, flip_rate: f64, fog_fraction: f64, seed: u64) -> SemanticMask {
    let mut out = mask.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d41_534b);
    if flip_rate > 0.0 {
        for id in out.class_ids.iter_mut() {
            if rng.random_bool(flip_rate) {
                *id = rng.random_range(0..=classes::BICYCLE);
            }
        }
    }
    if fog_fraction > 0.0 {
        let (w, h) = (mask.width as usize, mask.height as usize);
        let noise = value_noise(w, h, w.max(h) as f64 / 6.0, seed);
        let mut order: Vec<usize> = (0..noise.len()).collect();
        order.sort_by(|&a, &b| noise[b].total_cmp(&noise[a]).then(a.cmp(&b)));
        let hidden = (fog_fraction * noise.len() as f64).round() as usize;
        for &i in &order[..hidden] {
            out.class_ids[i] = classes::UNLABELED;
        }
    }
    out
}

/// Generates scene `index` of the stream seeded by `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, grid: &GridSpec, index: u64) -> Result<Scene> {
    cfg.validate()?;
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let calib = default_calibration();

    let mut objects: Vec<Object> = Vec::new();
    let n_vehicles = rng.random_range(cfg.num_vehicles[0]..=cfg.num_vehicles[1]);
    for i in 0..n_vehicles {
        let j = cfg.size_jitter;
        let w = cfg.vehicle_size[0] * (1.0 + rng.random_range(-j..=j));
        let l = cfg.vehicle_size[1] * (1.0 + rng.random_range(-j..=j));
        let base = if rng.random_bool(0.7) {
            if rng.random_bool(0.5) { 0.0 } else { PI }
        } else if rng.random_bool(0.5) {
            PI / 2.0
        } else {
            -PI / 2.0
        };
        let yaw = base + rng.random_range(-0.15..0.15);
        let footprint = place(&mut rng, cfg, grid, &objects, (w, l), yaw)
            .ok_or_else(|| Error::Validation(format!("could not place vehicle {i} without overlap")))?;
        let motion = rng.random_bool(cfg.moving_fraction).then(|| rng.random_range(2.0..=cfg.max_speed.max(2.0)));
        objects.push(Object {
            footprint,
            height: rng.random_range(1.4..1.7),
            class: classes::CAR,
            motion,
            vehicle: true,
        });
    }
    let n_clutter = rng.random_range(cfg.clutter_clusters[0]..=cfg.clutter_clusters[1]);
    for i in 0..n_clutter {
        let size = (rng.random_range(1.5..2.5), rng.random_range(3.5..5.5));
        let yaw = rng.random_range(-PI..PI);
        let footprint = place(&mut rng, cfg, grid, &objects, size, yaw)
            .ok_or_else(|| Error::Validation(format!("could not place clutter object {i} without overlap")))?;
        let class = [classes::BUILDING, classes::WALL, classes::FENCE, classes::VEGETATION, classes::POLE]
            [rng.random_range(0..5)];
        objects.push(Object {
            footprint,
            height: rng.random_range(1.0..3.0),
            class,
            motion: None,
            vehicle: false,
        });
    }

    let sigma = cfg.position_noise;
    let inset = sigma + 0.05;
    let mut points = Vec::new();
    let mut owner = Vec::new();
    for (oi, o) in objects.iter().enumerate() {
        let b = &o.footprint;
        let range = b.cx.hypot(b.cy);
        let others: Vec<&Object> = objects
            .iter()
            .enumerate()
            .filter(|(j, p)| *j != oi && p.footprint.cx.hypot(p.footprint.cy) < range)
            .map(|(_, p)| p)
            .collect();
        let hidden = occluded(b, &others);
        let (xz, ground) = if hidden {
            // returns bouncing under the occluder: few, low, weak
            let n = rng.random_range(3..=4);
            (interior_samples(&mut rng, b, n, inset), true)
        } else {
            let n = point_budget(&mut rng, range);
            (face_samples(&mut rng, b, n, inset), false)
        };
        for (x, z) in xz {
            let (nx, nz) = noise_in_disk(&mut rng, sigma);
            let (x, z) = (x + nx, z + nz);
            let y = if ground {
                -MOUNT_HEIGHT + rng.random_range(0.0..0.3)
            } else {
                -MOUNT_HEIGHT + rng.random_range(0.3..o.height.min(1.4))
            };
            let intensity = if ground {
                rng.random_range(5.0..20.0)
            } else {
                rng.random_range(15.0..50.0)
            };
            let doppler = match o.motion {
                Some(speed) => radial_doppler(x, z, b.yaw, speed) + rng.random_range(-0.1..0.1),
                None => 0.0,
            };
            points.push(RadarPoint::new(x, y, z, doppler, intensity));
            owner.push(o.vehicle.then_some(oi));
        }
    }
    for _ in 0..n_clutter * cfg.stray_points_per_cluster {
        let x = rng.random_range(cfg.depth_range[0]..cfg.depth_range[1]);
        let z = rng.random_range(grid.z_range[0] + 0.1..grid.z_range[1] - 0.1);
        let y = -MOUNT_HEIGHT + rng.random_range(0.0..0.5);
        points.push(RadarPoint::new(x, y, z, 0.0, rng.random_range(2.0..15.0)));
        owner.push(None);
    }
    let keep: Vec<bool> = points.iter().map(|_| !rng.random_bool(cfg.dropout)).collect();
    let mut it = keep.iter();
    points.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    owner.retain(|_| *it.next().unwrap());

    let k = calib.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let mut ids: Vec<u8> = (0..w * h)
        .map(|i| if ((i / w) as f64) < k.cy { classes::SKY } else { classes::ROAD })
        .collect();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    let dist = |o: &Object| o.footprint.cx.hypot(o.footprint.cy);
    order.sort_by(|&a, &b| dist(&objects[b]).total_cmp(&dist(&objects[a])).then(a.cmp(&b)));
    for i in order {
        render_object(&mut ids, &calib, &objects[i]);
    }
    // vehicle returns always land on vehicle pixels, even at silhouette edges
    for (p, o) in points.iter().zip(&owner) {
        if o.is_some() {
            let cam = transform_point(&p.position, &calib.radar_to_camera);
            if let Some(px) = project_to_pixel(&cam, &k) {
                ids[px.v as usize * w + px.u as usize] = classes::CAR;
            }
        }
    }
    let mut mask = SemanticMask::new(k.width, k.height, ids, Palette::default())?;
    if cfg.semantic_noise > 0.0 || cfg.fog_fraction > 0.0 {
        mask = degrade_mask(&mask, cfg.semantic_noise, cfg.fog_fraction, rng.random());
    }

    let mut vehicle_index = vec![usize::MAX; objects.len()];
    let mut labels = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if o.vehicle {
            vehicle_index[i] = labels.len();
            let mut b = o.footprint;
            b.class_id = VEHICLE_CLASS;
            labels.push(b);
        }
    }
    let owner = owner.into_iter().map(|o| o.map(|i| vehicle_index[i])).collect();
    Ok(Scene {
        cloud: RadarPointCloud { points },
        mask,
        calib,
        labels,
        owner,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: RadarPointCloud,
    pub mask: SemanticMask,
    pub labels: Vec<BevBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub calib: CalibrationSet,
    pub palette: Palette,
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFrame {
    pub id: String,
    pub points: String,
    pub mask: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub calib: String,
    pub palette: String,
    pub grid: GridSpec,
    pub scene: SceneConfig,
    pub frames: Vec<ManifestFrame>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// `n` scenes from the stream seeded by `cfg.seed`, generated on `jobs` threads.
pub fn generate_dataset(cfg: &SceneConfig, grid: &GridSpec, n: usize, jobs: usize) -> Result<Dataset> {
    let scenes = crate::parallel_map(n, jobs, |i| generate_scene(cfg, grid, i as u64))?;
    let frames = scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| Frame {
            id: format!("{i:04}"),
            cloud: s.cloud,
            mask: s.mask,
            labels: s.labels,
        })
        .collect();
    Ok(Dataset {
        calib: default_calibration(),
        palette: Palette::default(),
        grid: grid.clone(),
        scene: cfg.clone(),
        frames,
    })
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

impl Dataset {
    /// Writes `NNNN.points.csv`, `NNNN.mask.pgm`, `NNNN.labels.json`,
    /// `calib.json`, `palette.json` and the manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut frames = Vec::new();
        for f in &self.frames {
            let entry = ManifestFrame {
                id: f.id.clone(),
                points: format!("{}.points.csv", f.id),
                mask: format!("{}.mask.pgm", f.id),
                labels: format!("{}.labels.json", f.id),
            };
            write(dir.join(&entry.points), &f.cloud.to_csv())?;
            write(dir.join(&entry.mask), &f.mask.to_pgm())?;
            write(dir.join(&entry.labels), &labels_to_json(&f.labels))?;
            frames.push(entry);
        }
        write(dir.join("calib.json"), &self.calib.to_json())?;
        write(dir.join("palette.json"), &self.palette.to_json())?;
        let manifest = Manifest {
            calib: "calib.json".into(),
            palette: "palette.json".into(),
            grid: self.grid.clone(),
            scene: self.scene.clone(),
            frames,
        };
        write(dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)
    }

    /// Loads a dataset from a manifest file or from the directory holding one.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let m: Manifest = serde_json::from_slice(&read(manifest_path.clone())?)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        m.grid.validate()?;
        let calib = CalibrationSet::from_json(&read(dir.join(&m.calib))?)?;
        let palette = Palette::from_json(&read(dir.join(&m.palette))?)?;
        let mut frames = Vec::with_capacity(m.frames.len());
        for f in &m.frames {
            let name = |file: &str, e: Error| Error::Format(format!("{file}: {e}"));
            let cloud = parse_point_cloud(&read(dir.join(&f.points))?).map_err(|e| name(&f.points, e))?;
            let mask = SemanticMask::from_pgm(&read(dir.join(&f.mask))?, palette.clone()).map_err(|e| name(&f.mask, e))?;
            let labels = parse_labels(&read(dir.join(&f.labels))?, None).map_err(|e| name(&f.labels, e))?;
            frames.push(Frame {
                id: f.id.clone(),
                cloud,
                mask,
                labels,
            });
        }
        Ok(Self {
            calib,
            palette,
            grid: m.grid,
            scene: m.scene,
            frames,
        })
    }

    /// All labels of all frames, for anchor sizing.
    pub fn all_labels(&self) -> Vec<BevBox> {
        self.frames.iter().flat_map(|f| f.labels.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spg::{associate_semantics, bin_point};

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            num_vehicles: [0, 0],
            clutter_clusters: [0, 0],
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, &GridSpec::default(), 0).unwrap();
        assert!(s.cloud.is_empty() && s.labels.is_empty());
        assert!(s.mask.class_ids.iter().all(|&c| c == classes::SKY || c == classes::ROAD));
    }

    #[test]
    fn same_seed_same_scene() {
        let g = GridSpec::default();
        let cfg = SceneConfig { seed: 11, ..SceneConfig::default() };
        assert_eq!(generate_scene(&cfg, &g, 3).unwrap(), generate_scene(&cfg, &g, 3).unwrap());
        assert_ne!(generate_scene(&cfg, &g, 3).unwrap(), generate_scene(&cfg, &g, 4).unwrap());
    }

    #[test]
    fn vehicles_own_points_inside_their_boxes() {
        let g = GridSpec::with_cells(64);
        let cfg = SceneConfig {
            dropout: 0.0,
            num_vehicles: [3, 6],
            ..SceneConfig::default()
        };
        for idx in 0..20 {
            let s = generate_scene(&cfg, &g, idx).unwrap();
            for (vi, b) in s.labels.iter().enumerate() {
                assert!(b.corners().iter().all(|c| g.contains_xz(c[0], c[1])));
                let inside = s
                    .cloud
                    .points
                    .iter()
                    .zip(&s.owner)
                    .filter(|(p, o)| **o == Some(vi) && b.contains(p.position.x, p.position.z))
                    .count();
                assert!(inside >= 3, "scene {idx} vehicle {vi}: {inside}");
            }
            // noiseless masks give every in-frame vehicle point the car one-hot
            let sem = associate_semantics(&s.cloud, &s.mask, &s.calib);
            for ((p, o), v) in s.cloud.points.iter().zip(&s.owner).zip(&sem) {
                let cam = transform_point(&p.position, &s.calib.radar_to_camera);
                if o.is_some() && project_to_pixel(&cam, &s.calib.intrinsics).is_some() {
                    assert_eq!(v[classes::CAR_CHANNEL], 1.0, "point {p:?}");
                    assert!(bin_point(&p.position, &g).is_some());
                }
            }
        }
    }

    #[test]
    fn degrade_mask_hides_the_requested_fraction() {
        let s = generate_scene(&SceneConfig::default(), &GridSpec::default(), 0).unwrap();
        let d = degrade_mask(&s.mask, 0.0, 0.5, 1);
        let hidden = d.class_ids.iter().filter(|&&c| c == classes::UNLABELED).count();
        assert_eq!(hidden, d.class_ids.len() / 2);
        assert_eq!(degrade_mask(&s.mask, 0.0, 0.0, 1), s.mask);
        let flipped = degrade_mask(&s.mask, 0.3, 0.0, 1);
        let changed = flipped.class_ids.iter().zip(&s.mask.class_ids).filter(|(a, b)| a != b).count() as f64;
        let frac = changed / s.mask.class_ids.len() as f64;
        assert!(frac > 0.2 && frac < 0.32, "{frac}");
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&SceneConfig::default(), &GridSpec::with_cells(64), 3, 2).unwrap();
        d.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.grid, d.grid);
        assert_eq!(back.frames[1].labels, d.frames[1].labels);
        assert_eq!(back.frames[2].mask, d.frames[2].mask);
        assert_eq!(back.frames[0].cloud.len(), d.frames[0].cloud.len());
    }
}
