//! Semantic-point-grid encoding: a 22-channel BEV tensor built from a radar
//! cloud, an optional camera semantic map, and calibration.
//!
//! Channel layout:
//!
//! | channels | content |
//! |---|---|
//! | 0..=8   | mean semantic vector of the cell's points |
//! | 9       | occupancy (0/1) |
//! | 10      | mean doppler |
//! | 11      | mean intensity |
//! | 12, 13  | mean x (depth), mean z (lateral) |
//! | 14..=20 | per-height-bin point counts |
//! | 21      | point count |

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_to_pixel, transform_point, CalibrationSet, Point3};
use crate::netpbm::Pgm;
use crate::radar_io::RadarPointCloud;

pub const SEMANTIC_CHANNELS: usize = 9;
pub const HEIGHT_BINS: usize = 7;
pub const SPG_CHANNELS: usize = 22;

pub const CH_OCCUPANCY: usize = 9;
pub const CH_DOPPLER: usize = 10;
pub const CH_INTENSITY: usize = 11;
pub const CH_X: usize = 12;
pub const CH_Z: usize = 13;
pub const CH_HEIGHT0: usize = 14;
pub const CH_COUNT: usize = 21;

pub const SEMANTIC_RANGE: Range<usize> = 0..SEMANTIC_CHANNELS;
pub const RADAR_RANGE: Range<usize> = CH_OCCUPANCY..SPG_CHANNELS;

pub type SemanticVector = [f32; SEMANTIC_CHANNELS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub z_range: [f64; 2],
    pub cells_x: usize,
    pub cells_z: usize,
    /// Eight edges delimiting the seven height bins.
    pub height_edges: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: [0.0, 80.0],
            z_range: [-40.0, 40.0],
            cells_x: 128,
            cells_z: 128,
            height_edges: (0..=HEIGHT_BINS).map(|i| -2.0 + 0.5 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellIndex {
    /// Row, along x.
    pub u: usize,
    /// Column, along z.
    pub v: usize,
}

impl GridSpec {
    pub fn with_cells(cells: usize) -> Self {
        Self {
            cells_x: cells,
            cells_z: cells,
            ..Self::default()
        }
    }

    /// `cells` x `cells` grid at the default 0.625 m cell size, starting at
    /// the sensor and centered laterally.
    pub fn square(cells: usize) -> Self {
        let extent = cells as f64 * 0.625;
        Self {
            x_range: [0.0, extent],
            z_range: [-extent / 2.0, extent / 2.0],
            ..Self::with_cells(cells)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[1] > r[0];
        if !ok_range(self.x_range) || !ok_range(self.z_range) {
            return Err(Error::Config("grid ranges must be finite and non-degenerate".into()));
        }
        if self.cells_x == 0 || self.cells_z == 0 {
            return Err(Error::Config("grid needs at least one cell per axis".into()));
        }
        if self.height_edges.len() != HEIGHT_BINS + 1
            || self.height_edges.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(Error::Config(format!(
                "height_edges needs {} increasing values",
                HEIGHT_BINS + 1
            )));
        }
        Ok(())
    }

    pub fn cell_x(&self) -> f64 {
        (self.x_range[1] - self.x_range[0]) / self.cells_x as f64
    }

    pub fn cell_z(&self) -> f64 {
        (self.z_range[1] - self.z_range[0]) / self.cells_z as f64
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_z
    }

    /// BEV center `(x, z)` of a cell.
    pub fn cell_center(&self, c: CellIndex) -> (f64, f64) {
        (
            self.x_range[0] + (c.u as f64 + 0.5) * self.cell_x(),
            self.z_range[0] + (c.v as f64 + 0.5) * self.cell_z(),
        )
    }

    pub fn contains_xz(&self, x: f64, z: f64) -> bool {
        x >= self.x_range[0] && x <= self.x_range[1] && z >= self.z_range[0] && z <= self.z_range[1]
    }

    /// Height bin of `y`, clamping below/above the edge span.
    pub fn height_bin(&self, y: f64) -> usize {
        let e = &self.height_edges;
        (1..HEIGHT_BINS).take_while(|&h| y >= e[h]).count()
    }
}

fn axis_index(v: f64, lo: f64, hi: f64, cells: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let i = ((v - lo) / ((hi - lo) / cells as f64)).floor() as usize;
    Some(i.min(cells - 1))
}

/// Grid cell of a point, or `None` outside the grid. Points on the upper edge
/// fall into the last cell.
pub fn bin_point(p: &Point3, g: &GridSpec) -> Option<CellIndex> {
    let u = axis_index(p.x, g.x_range[0], g.x_range[1], g.cells_x)?;
    let v = axis_index(p.z, g.z_range[0], g.z_range[1], g.cells_z)?;
    Some(CellIndex { u, v })
}

/// A `22 x cells_x x cells_z` channel-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpgTensor {
    pub grid: GridSpec,
    pub data: Vec<f32>,
}

impl SpgTensor {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: grid.clone(),
            data: vec![0.0; SPG_CHANNELS * grid.num_cells()],
        }
    }

    pub fn channels(&self) -> usize {
        SPG_CHANNELS
    }

    pub fn height(&self) -> usize {
        self.grid.cells_x
    }

    pub fn width(&self) -> usize {
        self.grid.cells_z
    }

    pub fn idx(&self, ch: usize, c: CellIndex) -> usize {
        (ch * self.grid.cells_x + c.u) * self.grid.cells_z + c.v
    }

    pub fn get(&self, ch: usize, c: CellIndex) -> f32 {
        self.data[self.idx(ch, c)]
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.grid.num_cells();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [f32] {
        let n = self.grid.num_cells();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn zero_channels(&mut self, range: Range<usize>) {
        for ch in range {
            self.channel_mut(ch).fill(0.0);
        }
    }

    /// `SPG1` little-endian serialization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(b"SPG1");
        for d in [SPG_CHANNELS, self.height(), self.width()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an `SPG1` file; the grid extents are taken from `grid`, which
    /// must match the stored dimensions.
    pub fn from_bytes(bytes: &[u8], grid: &GridSpec) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"SPG1" {
            return Err(Error::Format("not an SPG1 file".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (c, h, w) = (dim(0), dim(1), dim(2));
        if c != SPG_CHANNELS || h != grid.cells_x || w != grid.cells_z {
            return Err(Error::Format(format!(
                "SPG1 dims {c}x{h}x{w} do not match grid {SPG_CHANNELS}x{}x{}",
                grid.cells_x, grid.cells_z
            )));
        }
        let payload = &bytes[16..];
        if payload.len() != 4 * c * h * w {
            return Err(Error::Format("SPG1 payload size mismatch".into()));
        }
        Ok(Self {
            grid: grid.clone(),
            data: payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
    }
}

/// Where a mask class id goes: one of the nine semantic channels, or nowhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaletteEntry {
    Channel(usize),
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub entries: BTreeMap<u8, PaletteEntry>,
}

/// 19-class street-scene ids grouped into the nine semantic channels.
pub mod classes {
    pub const ROAD: u8 = 0;
    pub const SIDEWALK: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const WALL: u8 = 3;
    pub const FENCE: u8 = 4;
    pub const POLE: u8 = 5;
    pub const TRAFFIC_LIGHT: u8 = 6;
    pub const TRAFFIC_SIGN: u8 = 7;
    pub const VEGETATION: u8 = 8;
    pub const TERRAIN: u8 = 9;
    pub const SKY: u8 = 10;
    pub const PERSON: u8 = 11;
    pub const RIDER: u8 = 12;
    pub const CAR: u8 = 13;
    pub const TRUCK: u8 = 14;
    pub const BUS: u8 = 15;
    pub const TRAIN: u8 = 16;
    pub const MOTORCYCLE: u8 = 17;
    pub const BICYCLE: u8 = 18;
    pub const UNLABELED: u8 = 255;

    /// Semantic channel of the car group.
    pub const CAR_CHANNEL: usize = 7;
}

impl Default for Palette {
    fn default() -> Self {
        use classes::*;
        use PaletteEntry::*;
        let table = [
            (ROAD, Channel(0)),
            (SIDEWALK, Channel(1)),
            (BUILDING, Channel(2)),
            (WALL, Channel(2)),
            (FENCE, Channel(2)),
            (POLE, Channel(3)),
            (TRAFFIC_LIGHT, Channel(3)),
            (TRAFFIC_SIGN, Channel(3)),
            (VEGETATION, Channel(4)),
            (TERRAIN, Channel(4)),
            (SKY, Channel(5)),
            (PERSON, Channel(6)),
            (RIDER, Channel(6)),
            (CAR, Channel(7)),
            (TRUCK, Channel(8)),
            (BUS, Channel(8)),
            (TRAIN, Ignore),
            (MOTORCYCLE, Ignore),
            (BICYCLE, Ignore),
            (UNLABELED, Ignore),
        ];
        Self {
            entries: table.into_iter().collect(),
        }
    }
}

impl Palette {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(bytes)?;
        let mut entries = BTreeMap::new();
        for (k, v) in raw {
            let id: u8 = k
                .parse()
                .map_err(|_| Error::Validation(format!("palette key '{k}' is not a class id")))?;
            let entry = match &v {
                serde_json::Value::String(s) if s == "ignore" => PaletteEntry::Ignore,
                serde_json::Value::Number(n) => match n.as_u64() {
                    Some(c) if (c as usize) < SEMANTIC_CHANNELS => PaletteEntry::Channel(c as usize),
                    _ => {
                        return Err(Error::Validation(format!(
                            "palette channel {n} for id {id} outside 0..{SEMANTIC_CHANNELS}"
                        )))
                    }
                },
                other => {
                    return Err(Error::Validation(format!(
                        "palette value {other} for id {id} must be a channel or \"ignore\""
                    )))
                }
            };
            entries.insert(id, entry);
        }
        Ok(Self { entries })
    }

    pub fn to_json(&self) -> Vec<u8> {
        let map: BTreeMap<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, v)| {
                let val = match v {
                    PaletteEntry::Channel(c) => serde_json::json!(c),
                    PaletteEntry::Ignore => serde_json::json!("ignore"),
                };
                (k.to_string(), val)
            })
            .collect();
        serde_json::to_vec_pretty(&map).expect("palette serializes")
    }
}

/// Per-pixel semantic vectors in camera image coordinates.
pub trait SemanticSource {
    fn size(&self) -> (u32, u32);
    fn vector_at(&self, u: u32, v: u32) -> SemanticVector;
}

/// Hard segmentation: one class id per pixel plus the palette grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    pub width: u32,
    pub height: u32,
    pub class_ids: Vec<u8>,
    pub palette: Palette,
}

impl SemanticMask {
    pub fn new(width: u32, height: u32, class_ids: Vec<u8>, palette: Palette) -> Result<Self> {
        let m = Self {
            width,
            height,
            class_ids,
            palette,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_ids.len() != (self.width * self.height) as usize {
            return Err(Error::Validation("mask size mismatch".into()));
        }
        let mut seen = [false; 256];
        for &id in &self.class_ids {
            seen[id as usize] = true;
        }
        for (id, s) in seen.iter().enumerate() {
            if *s && !self.palette.entries.contains_key(&(id as u8)) {
                return Err(Error::Validation(format!("class id {id} missing from palette")));
            }
        }
        Ok(())
    }

    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.class_ids[(v * self.width + u) as usize]
    }

    pub fn from_pgm(bytes: &[u8], palette: Palette) -> Result<Self> {
        let pgm = Pgm::parse(bytes)?;
        if pgm.maxval != 255 {
            return Err(Error::Format(format!(
                "semantic mask must be 8-bit (maxval 255), got {}",
                pgm.maxval
            )));
        }
        Self::new(
            pgm.width as u32,
            pgm.height as u32,
            pgm.samples.iter().map(|&s| s as u8).collect(),
            palette,
        )
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        Pgm {
            width: self.width as usize,
            height: self.height as usize,
            maxval: 255,
            samples: self.class_ids.iter().map(|&c| c as u16).collect(),
        }
        .to_bytes()
    }
}

impl SemanticSource for SemanticMask {
    fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn vector_at(&self, u: u32, v: u32) -> SemanticVector {
        let mut out = [0.0; SEMANTIC_CHANNELS];
        if let Some(PaletteEntry::Channel(c)) = self.palette.entries.get(&self.get(u, v)) {
            out[*c] = 1.0;
        }
        out
    }
}

/// Soft segmentation output: a probability vector per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSemanticMap {
    pub width: u32,
    pub height: u32,
    pub scores: Vec<SemanticVector>,
}

impl SemanticSource for SoftSemanticMap {
    fn size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn vector_at(&self, u: u32, v: u32) -> SemanticVector {
        self.scores[(v * self.width + u) as usize]
    }
}

/// Affine scaling applied to occupied cells after encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub x_offset: f64,
    pub x_scale: f64,
    pub z_offset: f64,
    pub z_scale: f64,
    pub doppler_scale: f64,
    pub intensity_max: f64,
    /// Replace counts (height bins and `n`) by `ln(1 + count)`.
    pub log_counts: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self::for_grid(&GridSpec::default())
    }
}

impl NormConfig {
    pub fn for_grid(g: &GridSpec) -> Self {
        Self {
            x_offset: g.x_range[0],
            x_scale: g.x_range[1] - g.x_range[0],
            z_offset: g.z_range[0],
            z_scale: g.z_range[1] - g.z_range[0],
            doppler_scale: 30.0,
            intensity_max: 100.0,
            log_counts: true,
        }
    }

    /// No scaling at all: raw means and counts.
    pub fn identity() -> Self {
        Self {
            x_offset: 0.0,
            x_scale: 1.0,
            z_offset: 0.0,
            z_scale: 1.0,
            doppler_scale: 1.0,
            intensity_max: 1.0,
            log_counts: false,
        }
    }

    pub fn apply(&self, t: &mut SpgTensor) {
        let n = t.grid.num_cells();
        for cell in 0..n {
            if t.data[CH_OCCUPANCY * n + cell] == 0.0 {
                continue;
            }
            let scale = |v: f32, off: f64, s: f64| ((v as f64 - off) / s) as f32;
            let d = &mut t.data;
            d[CH_DOPPLER * n + cell] = scale(d[CH_DOPPLER * n + cell], 0.0, self.doppler_scale);
            d[CH_INTENSITY * n + cell] = scale(d[CH_INTENSITY * n + cell], 0.0, self.intensity_max);
            d[CH_X * n + cell] = scale(d[CH_X * n + cell], self.x_offset, self.x_scale);
            d[CH_Z * n + cell] = scale(d[CH_Z * n + cell], self.z_offset, self.z_scale);
            if self.log_counts {
                for ch in CH_HEIGHT0..=CH_COUNT {
                    d[ch * n + cell] = (d[ch * n + cell] as f64).ln_1p() as f32;
                }
            }
        }
    }
}

/// Radar channels 9..=21 (unnormalized), semantic channels left at zero.
///
/// Means are accumulated in `f64` in cloud order and rounded to `f32` once.
pub fn encode_point_features(cloud: &RadarPointCloud, g: &GridSpec) -> SpgTensor {
    let n = g.num_cells();
    let mut t = SpgTensor::zeros(g);
    let mut sums = vec![[0.0f64; 4]; n];
    let mut counts = vec![0u32; n];
    let mut bins = vec![[0u32; HEIGHT_BINS]; n];
    for p in &cloud.points {
        let Some(c) = bin_point(&p.position, g) else {
            continue;
        };
        let cell = c.u * g.cells_z + c.v;
        let s = &mut sums[cell];
        s[0] += p.doppler;
        s[1] += p.intensity;
        s[2] += p.position.x;
        s[3] += p.position.z;
        counts[cell] += 1;
        bins[cell][g.height_bin(p.position.y)] += 1;
    }
    for cell in 0..n {
        let k = counts[cell];
        if k == 0 {
            continue;
        }
        let kf = k as f64;
        t.data[CH_OCCUPANCY * n + cell] = 1.0;
        for (i, ch) in [CH_DOPPLER, CH_INTENSITY, CH_X, CH_Z].into_iter().enumerate() {
            t.data[ch * n + cell] = (sums[cell][i] / kf) as f32;
        }
        for h in 0..HEIGHT_BINS {
            t.data[(CH_HEIGHT0 + h) * n + cell] = bins[cell][h] as f32;
        }
        t.data[CH_COUNT * n + cell] = k as f32;
    }
    t
}

/// Per-point semantic vector taken from the nearest camera pixel; points that
/// do not project into the image get the zero vector.
pub fn associate_semantics(
    cloud: &RadarPointCloud,
    sem: &dyn SemanticSource,
    calib: &CalibrationSet,
) -> Vec<SemanticVector> {
    cloud
        .points
        .iter()
        .map(|p| {
            let cam = transform_point(&p.position, &calib.radar_to_camera);
            match project_to_pixel(&cam, &calib.intrinsics) {
                Some(px) => sem.vector_at(px.u, px.v),
                None => [0.0; SEMANTIC_CHANNELS],
            }
        })
        .collect()
}

/// Full SPG tensor. Without a semantic source the semantic channels stay zero
/// (radar-only encoding).
pub fn assemble_spg(
    cloud: &RadarPointCloud,
    sem: Option<&dyn SemanticSource>,
    calib: &CalibrationSet,
    g: &GridSpec,
    norm: &NormConfig,
) -> Result<SpgTensor> {
    g.validate()?;
    let mut t = encode_point_features(cloud, g);
    if let Some(sem) = sem {
        let k = &calib.intrinsics;
        if sem.size() != (k.width, k.height) {
            return Err(Error::Config(format!(
                "semantic map is {:?} but calibration image size is {}x{}",
                sem.size(),
                k.width,
                k.height
            )));
        }
        let vecs = associate_semantics(cloud, sem, calib);
        let n = g.num_cells();
        let mut sums = vec![[0.0f64; SEMANTIC_CHANNELS]; n];
        for (p, v) in cloud.points.iter().zip(&vecs) {
            let Some(c) = bin_point(&p.position, g) else {
                continue;
            };
            let s = &mut sums[c.u * g.cells_z + c.v];
            for (acc, x) in s.iter_mut().zip(v) {
                *acc += *x as f64;
            }
        }
        for (cell, s) in sums.iter().enumerate() {
            let k = t.data[CH_COUNT * n + cell];
            if k == 0.0 {
                continue;
            }
            for (ch, acc) in s.iter().enumerate() {
                t.data[ch * n + cell] = (acc / k as f64) as f32;
            }
        }
    }
    norm.apply(&mut t);
    Ok(t)
}
