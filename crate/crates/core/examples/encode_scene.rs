//! Paints a synthetic radar cloud with its camera mask and bins it into the
//! 22-channel grid.
use spg_fuse::spg::*;
use spg_fuse::synthgen::{generate_scene, SceneConfig};

fn main() -> spg_fuse::Result<()> {
    let grid = GridSpec::default();
    let scene = generate_scene(&SceneConfig::for_grid(&grid), &grid, 0)?;
    let t = assemble_spg(&scene.cloud, Some(&scene.mask), &scene.calib, &grid, &NormConfig::for_grid(&grid))?;
    let occupied = t.channel(CH_OCCUPANCY).iter().filter(|&&v| v > 0.0).count();
    println!("{} points, {} vehicles, {occupied} occupied cells", scene.cloud.len(), scene.labels.len());
    let names = ["road", "sidewalk", "structure", "pole", "nature", "sky", "person", "car", "large vehicle"];
    for (ch, name) in names.iter().enumerate() {
        let mass: f32 = t.channel(ch).iter().sum();
        println!("  {name:<14} {mass:8.2}");
    }
    let car_cells = t.channel(classes::CAR_CHANNEL).iter().filter(|&&v| v > 0.5).count();
    println!("cells dominated by car pixels: {car_cells}");
    Ok(())
}
