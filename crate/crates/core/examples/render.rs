//! Draws a synthetic frame's radar points and ground-truth boxes as a BEV PPM.
//! Usage: render [out.ppm]
use spg_fuse::detect::DetectionSet;
use spg_fuse::evalkit::render_bev;
use spg_fuse::spg::GridSpec;
use spg_fuse::synthgen::{generate_scene, SceneConfig};
use std::path::PathBuf;

fn main() -> spg_fuse::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("bev.ppm"));
    let grid = GridSpec::square(96);
    let scene = generate_scene(&SceneConfig::for_grid(&grid), &grid, 5)?;
    let img = render_bev(&grid, &scene.cloud, &scene.labels, &DetectionSet::default(), 4);
    std::fs::write(&out, img.to_bytes()).map_err(|e| spg_fuse::Error::io(&out, e))?;
    println!("{}x{} figure with {} boxes in {}", img.width, img.height, scene.labels.len(), out.display());
    Ok(())
}
