//! Generates a few synthetic RGB-D scenes and writes each as PGM images
//! (depth, labels, RGB luminance) under `scenes-out/`.

use std::path::Path;

use dcattn::attention::encode_pgm;
use dcattn::data::{generate_dataset, GenConfig};
fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GenConfig::default();
    let scenes = generate_dataset(&cfg, 4, 0)?;
    let out = Path::new("scenes-out");
    std::fs::create_dir_all(out)?;
    let plane = cfg.height * cfg.width;
    for (i, s) in scenes.iter().enumerate() {
        let mut counts = vec![0usize; cfg.classes];
        for &l in &s.labels {
            counts[l] += 1;
        }
        println!("scene {i}: class pixels {counts:?}");
        let depth: Vec<f64> = s.depth.data().iter().map(|&v| v as f64).collect();
        let labels: Vec<f64> = s.labels.iter().map(|&l| l as f64).collect();
        let rgb = s.rgb.data();
        let luma: Vec<f64> = (0..plane)
            .map(|p| 0.299 * rgb[p] as f64 + 0.587 * rgb[plane + p] as f64 + 0.114 * rgb[2 * plane + p] as f64)
            .collect();
        for (name, map) in [("depth", depth), ("labels", labels), ("luma", luma)] {
            let path = out.join(format!("scene{i}_{name}.pgm"));
            std::fs::write(&path, encode_pgm(&map, cfg.height, cfg.width)?)?;
        }
    }
    println!("wrote {} images to {}", scenes.len() * 3, out.display());
    Ok(())
}
