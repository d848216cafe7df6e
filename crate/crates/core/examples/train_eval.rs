//! Trains a detector on a few synthetic scenes and evaluates it under
//! clear, foggy and corrupted conditions. Pass a step count to train longer.
use spg_fuse::evalkit::{run_eval, EvalMode};
use spg_fuse::spg::GridSpec;
use spg_fuse::synthgen::{generate_dataset, SceneConfig};
use spg_fuse::train::{prepare_training_set, train_detector, TrainOptions};

fn main() -> spg_fuse::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let grid = GridSpec::square(64);
    let ds = generate_dataset(&SceneConfig::for_grid(&grid), &grid, 24, 1)?;
    let mut opts = TrainOptions::default();
    opts.train.max_steps = steps;
    let train: Vec<usize> = (0..16).collect();
    let test: Vec<usize> = (16..24).collect();
    let set = prepare_training_set(&ds, &train, &opts, 1)?;
    let (det, log) = train_detector(&set, &opts, |r| {
        if r.step % 50 == 0 {
            println!("step {:4} loss {:.4}", r.step, r.loss);
        }
    })?;
    if let Some(last) = log.last() {
        println!("final loss {:.4}", last.loss);
    }
    let modes = [
        EvalMode::Clear,
        "weather:fog".parse()?,
        EvalMode::CorruptSemantics,
        EvalMode::CorruptRadar,
    ];
    print!("{}", run_eval(&det, &ds, &test, &modes, 0, 1)?.to_table());
    Ok(())
}
