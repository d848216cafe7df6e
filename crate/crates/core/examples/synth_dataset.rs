//! Generates a small synthetic dataset directory.
//! Usage: synth_dataset [out_dir]
use spg_fuse::spg::GridSpec;
use spg_fuse::synthgen::{generate_dataset, SceneConfig};
use std::path::PathBuf;

fn main() -> spg_fuse::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("spg_synth"));
    let grid = GridSpec::square(64);
    let scene = SceneConfig {
        seed: 3,
        ..SceneConfig::for_grid(&grid)
    };
    let ds = generate_dataset(&scene, &grid, 8, 2)?;
    ds.write(&dir)?;
    for (i, f) in ds.frames.iter().enumerate() {
        println!("frame {i}: {} points, {} vehicles", f.cloud.len(), f.labels.len());
    }
    println!("dataset in {}", dir.display());
    Ok(())
}
