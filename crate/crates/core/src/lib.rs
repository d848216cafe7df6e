//! Radar-camera fusion on a bird's-eye-view semantic point grid.
//!
//! Radar returns are painted with camera semantics, binned into a fixed BEV
//! grid and fed to a small anchor-based detector. The crate also contains
//! CFAR detection on radar intensity maps, weather augmentation for camera
//! images, a synthetic scene generator and a BEV average-precision harness.

pub mod augment;
pub mod cli;
pub mod detect;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod nnet;
pub mod netpbm;
pub mod radar_io;
pub mod spg;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};

/// Runs `f(0..n)` on up to `jobs` scoped threads and returns the results in
/// index order, so output never depends on scheduling.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (j, chunk) in slots.chunks_mut(n.div_ceil(jobs)).enumerate() {
            let f = &f;
            let start = j * n.div_ceil(jobs);
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}
