//! Applies fog, rain and snow to a gradient test image and writes PPMs.
//! Usage: weather [out_dir]
use spg_fuse::augment::{apply_weather, ImageRgb, WeatherKind, WeatherParams};
use std::path::PathBuf;

fn main() -> spg_fuse::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir).map_err(|e| spg_fuse::Error::io(&dir, e))?;
    let (w, h) = (320, 160);
    let pixels = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            [(x * 255 / w) as u8, (y * 255 / h) as u8, 128]
        })
        .collect();
    let img = ImageRgb { width: w, height: h, pixels };
    for kind in [WeatherKind::Fog, WeatherKind::Rain, WeatherKind::Snow] {
        let out = apply_weather(&img, &WeatherParams::new(kind, 7))?;
        let path = dir.join(format!("weather_{kind:?}.ppm").to_lowercase());
        std::fs::write(&path, out.to_bytes()).map_err(|e| spg_fuse::Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
