//! Vanilla vs. differential convolution across a depth step.
//!
//! A 3x3 box filter blurs the step; the differential version keeps the two
//! plateaus apart because taps across the edge are damped by `exp(-|dz|)`.

use dcattn::ops::{conv2d, diff_conv2d, diff_kernel_at, ConvSpec};
use dcattn::{Result, Shape, Tensor};

fn main() -> Result<()> {
    let (h, w) = (6, 8);
    let depth = Tensor::<f64>::from_fn(Shape::new(1, 1, h, w)?, |_, _, _, x| if x < w / 2 { 0.5 } else { 3.0 })?;
    let box3 = Tensor::<f64>::filled(Shape::new(1, 1, 3, 3)?, 1.0 / 9.0)?;
    let spec = ConvSpec::dense(3)?;
    let plain = conv2d(&depth, &box3, spec)?;
    let diff = diff_conv2d(&depth, &box3, spec)?;

    println!("row 2 of a depth step (left 0.5, right 3.0)");
    println!("{:>6} {:>8} {:>8} {:>8}", "x", "input", "conv", "diffconv");
    for x in 0..w {
        println!("{x:>6} {:>8.4} {:>8.4} {:>8.4}", depth.at(0, 0, 2, x), plain.at(0, 0, 2, x), diff.at(0, 0, 2, x));
    }

    let edge = w / 2 - 1;
    let patch: Vec<f64> = (0..9).map(|t| depth.at(0, 0, 1 + t / 3, edge - 1 + t % 3)).collect();
    let k = diff_kernel_at(&patch, box3.data())?;
    println!("\neffective kernel at (2, {edge}), scaled by 9:");
    for row in k.chunks(3) {
        println!("  {:.4} {:.4} {:.4}", row[0] * 9.0, row[1] * 9.0, row[2] * 9.0);
    }

    let flat = Tensor::<f64>::filled(Shape::new(1, 1, h, w)?, 1.7)?;
    let same = diff_conv2d(&flat, &box3, spec)? == conv2d(&flat, &box3, spec)?;
    println!("\nconstant input: diff_conv2d == conv2d -> {same}");
    Ok(())
}
