//! Cell-averaging CFAR on a noisy intensity map with a few planted targets.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spg_fuse::radar_io::{cfar_detect, CfarConfig, IntensityMap};
use spg_fuse::synthgen::default_calibration;

fn main() -> spg_fuse::Result<()> {
    let (rows, cols) = (160, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut values: Vec<f64> = (0..rows * cols).map(|_| -(1.0 - rng.random::<f64>()).ln() * 100.0).collect();
    let targets = [(40, 30), (90, 64), (120, 100)];
    for &(i, j) in &targets {
        values[i * cols + j] += 4000.0;
    }
    let mut map = IntensityMap::new(rows, cols, values, 0.5)?;
    map.origin = [0.0, -32.0];
    let cfg = CfarConfig::default();
    let cloud = cfar_detect(&map, &cfg, &default_calibration())?;
    println!("threshold factor {:.2} over {} training cells", cfg.alpha(), cfg.num_train());
    let tested = (rows - 2 * cfg.half_window()) * (cols - 2 * cfg.half_window());
    println!(
        "{} detections over {tested} cells; about {:.0} false alarms expected at pfa {}",
        cloud.len(),
        cfg.pfa * tested as f64,
        cfg.pfa
    );
    for &(i, j) in &targets {
        let (x, z) = map.cell_center(i, j);
        let hit = cloud.points.iter().any(|p| p.position.x == x && p.position.z == z);
        println!("  target at x {x:5.1} z {z:6.1}: {}", if hit { "detected" } else { "missed" });
    }
    Ok(())
}
