//! Slow reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spg_fuse::geometry::{BevBox, CalibrationSet};
use spg_fuse::radar_io::{IntensityMap, RadarPoint, RadarPointCloud};
use spg_fuse::spg::{
    GridSpec, NormConfig, Palette, PaletteEntry, SemanticMask, HEIGHT_BINS, SEMANTIC_CHANNELS, SPG_CHANNELS,
};

fn cell_of(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    Some((((v - lo) / ((hi - lo) / n as f64)).floor() as usize).min(n - 1))
}

fn pixel_of(p: &RadarPoint, calib: &CalibrationSet) -> Option<(u32, u32)> {
    let r = &calib.radar_to_camera.rotation;
    let t = &calib.radar_to_camera.translation;
    let v = [p.position.x, p.position.y, p.position.z];
    let c: Vec<f64> = (0..3).map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + t[i]).collect();
    let k = &calib.intrinsics;
    if c[0] <= 0.0 || c.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let u = (k.fx * c[2] / c[0] + k.cx).round();
    let w = (k.fy * -c[1] / c[0] + k.cy).round();
    (u >= 0.0 && w >= 0.0 && u < k.width as f64 && w < k.height as f64).then_some((u as u32, w as u32))
}

/// Per-cell rescan of the whole cloud. Produces the SPG1 payload layout
/// (channel-major little-endian f32) without any header.
pub fn brute_force_spg(
    cloud: &RadarPointCloud,
    mask: Option<&SemanticMask>,
    calib: &CalibrationSet,
    g: &GridSpec,
    norm: &NormConfig,
) -> Vec<f32> {
    let n = g.cells_x * g.cells_z;
    let mut out = vec![0.0f32; SPG_CHANNELS * n];
    for u in 0..g.cells_x {
        for v in 0..g.cells_z {
            let cell = u * g.cells_z + v;
            let mine: Vec<&RadarPoint> = cloud
                .points
                .iter()
                .filter(|p| {
                    cell_of(p.position.x, g.x_range[0], g.x_range[1], g.cells_x) == Some(u)
                        && cell_of(p.position.z, g.z_range[0], g.z_range[1], g.cells_z) == Some(v)
                })
                .collect();
            if mine.is_empty() {
                continue;
            }
            let k = mine.len() as f64;
            let mean = |f: &dyn Fn(&RadarPoint) -> f64| (mine.iter().map(|p| f(p)).fold(0.0, |a, b| a + b) / k) as f32;
            let mut ch = [0.0f32; SPG_CHANNELS];
            if let Some(m) = mask {
                for (s, slot) in ch.iter_mut().enumerate().take(SEMANTIC_CHANNELS) {
                    let mut acc = 0.0f64;
                    for p in &mine {
                        if let Some((pu, pv)) = pixel_of(p, calib) {
                            let id = m.class_ids[(pv * m.width + pu) as usize];
                            if m.palette.entries.get(&id) == Some(&PaletteEntry::Channel(s)) {
                                acc += 1.0;
                            }
                        }
                    }
                    *slot = (acc / k) as f32;
                }
            }
            ch[9] = 1.0;
            ch[10] = mean(&|p| p.doppler);
            ch[11] = mean(&|p| p.intensity);
            ch[12] = mean(&|p| p.position.x);
            ch[13] = mean(&|p| p.position.z);
            for p in &mine {
                let e = &g.height_edges;
                let mut h = 0;
                while h + 1 < HEIGHT_BINS && p.position.y >= e[h + 1] {
                    h += 1;
                }
                ch[14 + h] += 1.0;
            }
            ch[21] = mine.len() as f32;
            let sc = |v: f32, off: f64, s: f64| ((v as f64 - off) / s) as f32;
            ch[10] = sc(ch[10], 0.0, norm.doppler_scale);
            ch[11] = sc(ch[11], 0.0, norm.intensity_max);
            ch[12] = sc(ch[12], norm.x_offset, norm.x_scale);
            ch[13] = sc(ch[13], norm.z_offset, norm.z_scale);
            if norm.log_counts {
                for c in &mut ch[14..22] {
                    *c = (*c as f64).ln_1p() as f32;
                }
            }
            for (c, val) in ch.iter().enumerate() {
                out[c * n + cell] = *val;
            }
        }
    }
    out
}

pub fn random_cloud(rng: &mut ChaCha8Rng, g: &GridSpec, max_points: usize) -> RadarPointCloud {
    let n = rng.random_range(0..=max_points);
    // a few points are re-used so some cells hold several returns
    let mut points: Vec<RadarPoint> = Vec::with_capacity(n);
    for _ in 0..n {
        let p = if !points.is_empty() && rng.random_bool(0.3) {
            let q = points[rng.random_range(0..points.len())];
            RadarPoint::new(
                q.position.x + rng.random_range(-0.2..0.2),
                rng.random_range(-2.5..2.0),
                q.position.z + rng.random_range(-0.2..0.2),
                rng.random_range(-20.0..20.0),
                rng.random_range(0.0..100.0),
            )
        } else {
            RadarPoint::new(
                rng.random_range(g.x_range[0] - 2.0..g.x_range[1] + 2.0),
                rng.random_range(-2.5..2.0),
                rng.random_range(g.z_range[0] - 2.0..g.z_range[1] + 2.0),
                rng.random_range(-20.0..20.0),
                rng.random_range(0.0..100.0),
            )
        };
        points.push(p);
    }
    RadarPointCloud { points }
}

/// Blocky random class-id mask over the whole default palette.
pub fn random_mask(rng: &mut ChaCha8Rng, width: u32, height: u32) -> SemanticMask {
    let palette = Palette::default();
    let ids: Vec<u8> = palette.entries.keys().copied().collect();
    let block = 8;
    let bw = width.div_ceil(block);
    let bh = height.div_ceil(block);
    let blocks: Vec<u8> = (0..bw * bh).map(|_| ids[rng.random_range(0..ids.len())]).collect();
    let class_ids = (0..height)
        .flat_map(|v| (0..width).map(move |u| (u, v)))
        .map(|(u, v)| blocks[((v / block) * bw + u / block) as usize])
        .collect();
    SemanticMask::new(width, height, class_ids, palette).unwrap()
}

/// CA-CFAR by explicit window scan.
pub fn brute_force_cfar(map: &IntensityMap, train: usize, guard: usize, pfa: f64) -> Vec<(usize, usize)> {
    let half = (train + guard) as isize;
    let g = guard as isize;
    let n = ((2 * half + 1) * (2 * half + 1) - (2 * g + 1) * (2 * g + 1)) as f64;
    let alpha = n * (pfa.powf(-1.0 / n) - 1.0);
    let mut hits = Vec::new();
    for i in half..map.rows as isize - half {
        for j in half..map.cols as isize - half {
            let mut sum = 0.0;
            for di in -half..=half {
                for dj in -half..=half {
                    if di.abs() > g || dj.abs() > g {
                        sum += map.values[((i + di) as usize) * map.cols + (j + dj) as usize];
                    }
                }
            }
            if map.values[i as usize * map.cols + j as usize] > alpha * sum / n {
                hits.push((i as usize, j as usize));
            }
        }
    }
    hits
}

/// Point-in-rectangle in the box frame.
fn inside(b: &BevBox, x: f64, z: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dz) = (x - b.cx, z - b.cy);
    let along = dx * c + dz * s;
    let across = -dx * s + dz * c;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0
}

/// Monte-Carlo IoU from `samples` uniform draws over the joint bounding square.
pub fn monte_carlo_iou(a: &BevBox, b: &BevBox, samples: usize, seed: u64) -> f64 {
    let ra = (a.w.hypot(a.l)) / 2.0;
    let rb = (b.w.hypot(b.l)) / 2.0;
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let z0 = (a.cy - ra).min(b.cy - rb);
    let z1 = (a.cy + ra).max(b.cy + rb);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.random_range(x0..x1);
        let z = rng.random_range(z0..z1);
        let (ia, ib) = (inside(a, x, z), inside(b, x, z));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn exponential_noise_map(rows: usize, cols: usize, seed: u64) -> IntensityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    IntensityMap::new(rows, cols, v, 0.5).unwrap()
}
