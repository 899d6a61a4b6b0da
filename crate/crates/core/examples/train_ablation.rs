//! A reduced ablation: all five fusion variants trained on a small scene set.
//!
//! Usage: `cargo run --release --example train_ablation [scenes] [epochs] [seeds]`
//! The full-size run is `dcattn ablate` on the default 625-scene dataset.

use dcattn::attention::Variant;
use dcattn::data::{generate_dataset, GenConfig};
use dcattn::net::ToyNetConfig;
use dcattn::train::{ablate, TrainConfig};
use dcattn::Result;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).map_or(default, |s| s.parse().expect("integer argument"))
}

fn main() -> Result<()> {
    dcattn::parallel::init_from_env();
    let (scenes, epochs, seeds) = (arg(1, 150), arg(2, 6), arg(3, 2) as u64);
    let cfg = GenConfig::default();
    let samples = generate_dataset(&cfg, scenes, 0)?;
    let net = ToyNetConfig { classes: cfg.classes, ..ToyNetConfig::default() };
    let train = TrainConfig { epochs, ..TrainConfig::default() };
    let seed_list: Vec<u64> = (0..seeds).collect();
    let started = std::time::Instant::now();
    let summary = ablate(&samples, &net, &train, &Variant::ALL, &seed_list)?;
    print!("{}", summary.to_csv());
    let m = |v| summary.median_miou(v).unwrap_or(f64::NAN);
    println!(
        "\nfull - baseline: {:+.2} mIoU points, full - swapped: {:+.2} ({scenes} scenes, {epochs} epochs, {seeds} seeds, {:.1?})",
        100.0 * (m(Variant::Full) - m(Variant::Baseline)),
        100.0 * (m(Variant::Full) - m(Variant::Swapped)),
        started.elapsed()
    );
    Ok(())
}
