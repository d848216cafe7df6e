//! Rotated box overlap in the bird's-eye-view plane.
use spg_fuse::geometry::{rotated_iou, BevBox};
use std::f64::consts::FRAC_PI_4;

fn main() {
    let car = BevBox::new(12.0, 1.5, 1.9, 4.6, 0.0);
    for (label, other) in [
        ("same box", car),
        ("shifted 1 m forward", BevBox::new(13.0, 1.5, 1.9, 4.6, 0.0)),
        ("turned 45 degrees", BevBox::new(12.0, 1.5, 1.9, 4.6, FRAC_PI_4)),
        ("crossing at 90 degrees", BevBox::new(12.0, 1.5, 1.9, 4.6, 2.0 * FRAC_PI_4)),
        ("next lane", BevBox::new(12.0, 5.0, 1.9, 4.6, 0.0)),
    ] {
        println!("{label:<24} iou {:.4}", rotated_iou(&car, &other));
    }
}
