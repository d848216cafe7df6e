//! Seeded fog, rain and snow overlays for camera images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::netpbm::ImageRgb;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeatherKind {
    Fog,
    Rain,
    Snow,
}

impl std::str::FromStr for WeatherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog" => Ok(Self::Fog),
            "rain" => Ok(Self::Rain),
            "snow" => Ok(Self::Snow),
            other => Err(Error::Config(format!("unknown weather '{other}' (fog, rain, snow)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FogParams {
    pub density: f64,
}

impl Default for FogParams {
    fn default() -> Self {
        Self { density: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RainParams {
    /// Streak length range as a fraction of the shorter image side.
    pub drop_size: [f64; 2],
    pub drops_per_kpx: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            drop_size: [0.10, 0.20],
            drops_per_kpx: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowParams {
    pub flake_size: [f64; 2],
    /// Motion-blur length range as a fraction of the shorter image side.
    pub speed: [f64; 2],
    pub flakes_per_kpx: f64,
}

impl Default for SnowParams {
    fn default() -> Self {
        Self {
            flake_size: [0.7, 0.95],
            speed: [0.001, 0.03],
            flakes_per_kpx: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherParams {
    pub kind: WeatherKind,
    #[serde(default)]
    pub fog: FogParams,
    #[serde(default)]
    pub rain: RainParams,
    #[serde(default)]
    pub snow: SnowParams,
    #[serde(default)]
    pub seed: u64,
}

impl WeatherParams {
    pub fn new(kind: WeatherKind, seed: u64) -> Self {
        Self {
            kind,
            fog: FogParams::default(),
            rain: RainParams::default(),
            snow: SnowParams::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], hi: f64| {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= hi) {
                return Err(Error::Config(format!("{name} must be an ordered range within [0, {hi}]")));
            }
            Ok(())
        };
        if !(0.0..=1.0).contains(&self.fog.density) {
            return Err(Error::Config("fog.density must be in [0, 1]".into()));
        }
        range("rain.drop_size", self.rain.drop_size, 1.0)?;
        range("snow.flake_size", self.snow.flake_size, 1.0)?;
        range("snow.speed", self.snow.speed, 1.0)?;
        if !(self.rain.drops_per_kpx >= 0.0 && self.snow.flakes_per_kpx >= 0.0) {
            return Err(Error::Config("particle densities must be non-negative".into()));
        }
        Ok(())
    }
}

/// Smooth seeded noise in `[0, 1]`: random values on a square lattice with
/// `cell` pixel spacing, blended with smoothstep weights.
pub fn value_noise(width: usize, height: usize, cell: f64, seed: u64) -> Vec<f64> {
    let cell = cell.max(1.0);
    let lw = (width as f64 / cell).ceil() as usize + 2;
    let lh = (height as f64 / cell).ceil() as usize + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<f64> = (0..lw * lh).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = (y as f64 + 0.5) / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..width {
            let fx = (x as f64 + 0.5) / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * lw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn blend(img: &mut ImageRgb, alpha: &[f64], color: [f64; 3]) {
    for (px, &a) in img.pixels.chunks_exact_mut(3).zip(alpha) {
        if a <= 0.0 {
            continue;
        }
        for (v, c) in px.iter_mut().zip(color) {
            let f = *v as f64;
            *v = (f + a * (c - f)).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Raises `alpha` along a segment with a round brush; overlapping marks keep
/// the stronger opacity so drawing order does not matter.
fn stroke(alpha: &mut [f64], w: usize, h: usize, from: [f64; 2], to: [f64; 2], radius: f64, peak: f64) {
    let len = (to[0] - from[0]).hypot(to[1] - from[1]);
    let steps = len.ceil().max(1.0) as usize;
    let reach = radius.ceil() as i64 + 1;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let cx = from[0] + t * (to[0] - from[0]);
        let cy = from[1] + t * (to[1] - from[1]);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                let a = peak * (1.0 - d / (radius + 0.5)).clamp(0.0, 1.0);
                let slot = &mut alpha[y as usize * w + x as usize];
                *slot = slot.max(a);
            }
        }
    }
}

fn count(per_kpx: f64, w: usize, h: usize) -> usize {
    (per_kpx * (w * h) as f64 / 1000.0).round() as usize
}

/// Applies the selected weather overlay. The output depends only on the
/// image and the parameters (including the seed).
pub fn apply_weather(img: &ImageRgb, p: &WeatherParams) -> Result<ImageRgb> {
    if img.width == 0 || img.height == 0 {
        return Err(Error::Validation("image has zero size".into()));
    }
    if img.pixels.len() != img.width * img.height * 3 {
        return Err(Error::Validation("pixel buffer does not match image size".into()));
    }
    p.validate()?;
    let (w, h) = (img.width, img.height);
    let short = w.min(h) as f64;
    let mut out = img.clone();
    let mut alpha = vec![0.0; w * h];
    match p.kind {
        WeatherKind::Fog => {
            let noise = value_noise(w, h, w.max(h) as f64 / 4.0, p.seed);
            for (a, n) in alpha.iter_mut().zip(noise) {
                *a = p.fog.density * (0.35 + 0.65 * n);
            }
            blend(&mut out, &alpha, [255.0; 3]);
        }
        WeatherKind::Rain => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5241_494e);
            let slant: f64 = rng.random_range(-0.3..0.3);
            let [lo, hi] = p.rain.drop_size;
            for _ in 0..count(p.rain.drops_per_kpx, w, h) {
                let x = rng.random_range(0.0..w as f64);
                let y = rng.random_range(0.0..h as f64);
                let len = rng.random_range(lo..=hi) * short;
                let end = [x + slant.sin() * len, y + slant.cos() * len];
                stroke(&mut alpha, w, h, [x, y], end, 0.0, 0.45);
            }
            blend(&mut out, &alpha, [200.0, 200.0, 210.0]);
        }
        WeatherKind::Snow => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x534e_4f57);
            let heading: f64 = rng.random_range(-0.6..0.6);
            let [flo, fhi] = p.snow.flake_size;
            let [slo, shi] = p.snow.speed;
            for _ in 0..count(p.snow.flakes_per_kpx, w, h) {
                let x = rng.random_range(0.0..w as f64);
                let y = rng.random_range(0.0..h as f64);
                let radius = rng.random_range(flo..=fhi) * (short / 100.0).max(1.0);
                let blur = rng.random_range(slo..=shi) * short;
                let end = [x + heading.sin() * blur, y + heading.cos() * blur];
                stroke(&mut alpha, w, h, [x, y], end, radius, 0.9);
            }
            blend(&mut out, &alpha, [255.0; 3]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> ImageRgb {
        let pixels = (0..w * h).flat_map(|i| [(i % 251) as u8, (i * 7 % 256) as u8, 90]).collect();
        ImageRgb { width: w, height: h, pixels }
    }

    fn mean(img: &ImageRgb) -> f64 {
        img.pixels.iter().map(|&v| v as f64).sum::<f64>() / img.pixels.len() as f64
    }

    #[test]
    fn fog_identity_and_monotonicity() {
        let img = gradient_image(64, 48);
        let mut p = WeatherParams::new(WeatherKind::Fog, 5);
        p.fog.density = 0.0;
        assert_eq!(apply_weather(&img, &p).unwrap(), img);
        p.fog.density = 1.0;
        let out = apply_weather(&img, &p).unwrap();
        assert!(out.pixels.iter().zip(&img.pixels).all(|(a, b)| a >= b));
        assert!(mean(&out) > mean(&img));
    }

    #[test]
    fn rain_is_seeded() {
        let img = gradient_image(80, 60);
        let p = WeatherParams::new(WeatherKind::Rain, 1);
        let a = apply_weather(&img, &p).unwrap();
        assert_eq!(a, apply_weather(&img, &p).unwrap());
        assert_ne!(a, img);
        let b = apply_weather(&img, &WeatherParams::new(WeatherKind::Rain, 2)).unwrap();
        assert_ne!(a, b);
        assert_eq!((b.width, b.height), (80, 60));
    }

    #[test]
    fn snow_brightens() {
        let img = gradient_image(100, 70);
        let out = apply_weather(&img, &WeatherParams::new(WeatherKind::Snow, 3)).unwrap();
        assert!(out.pixels.iter().zip(&img.pixels).all(|(a, b)| a >= b));
        assert!(mean(&out) > mean(&img));
    }

    #[test]
    fn rejects_empty_images_and_bad_ranges() {
        let empty = ImageRgb { width: 0, height: 3, pixels: vec![] };
        assert!(matches!(
            apply_weather(&empty, &WeatherParams::new(WeatherKind::Fog, 0)),
            Err(Error::Validation(_))
        ));
        let mut p = WeatherParams::new(WeatherKind::Rain, 0);
        p.rain.drop_size = [0.3, 0.1];
        assert!(apply_weather(&gradient_image(4, 4), &p).is_err());
    }

    #[test]
    fn value_noise_is_bounded_and_smooth() {
        let n = value_noise(40, 30, 10.0, 9);
        assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let max_step = (0..30)
            .flat_map(|y| (0..39).map(move |x| (y, x)))
            .map(|(y, x)| (n[y * 40 + x + 1] - n[y * 40 + x]).abs())
            .fold(0.0, f64::max);
        assert!(max_step < 0.3);
    }
}
