//! Trains a small full-variant model, then renders the per-stage depth (DCA)
//! and RGB (EDCA) attention maps of one scene next to its depth and labels.

use std::path::Path;

use dcattn::attention::{channel_mean, encode_pgm};
use dcattn::autodiff::Graph;
use dcattn::data::{generate_dataset, GenConfig};
use dcattn::net::{forward_graph, model_init, ToyNetConfig};
use dcattn::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    dcattn::parallel::init_from_env();
    let cfg = GenConfig::default();
    let samples = generate_dataset(&cfg, 120, 1)?;
    let net_cfg = ToyNetConfig { classes: cfg.classes, ..ToyNetConfig::default() };
    let outcome = train(model_init(&net_cfg)?, &samples, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    let last = outcome.history.last().expect("epochs > 0");
    println!("trained 4 epochs: held-out mIoU {:.4}, pixel acc {:.4}", last.miou, last.pixel_acc);

    let out = Path::new("attention-maps");
    std::fs::create_dir_all(out)?;
    let scene = &samples[samples.len() - 1];
    let mut g = Graph::new();
    let rgb = g.leaf(scene.rgb.clone());
    let depth = g.leaf(scene.depth.clone());
    let w = outcome.net.params.bind(&mut g);
    let fwd = forward_graph(&mut g, rgb, depth, &w, &outcome.net.config)?;
    for (stage, nodes) in fwd.stages.iter().enumerate() {
        for (branch, node) in [("depth", nodes.depth_attention), ("rgb", nodes.rgb_attention)] {
            let Some(node) = node else { continue };
            let t = g.value(node);
            let map = channel_mean(t, 0)?;
            let (lo, hi) = map.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            println!("stage {stage} {branch:<5} {}x{}  range [{lo:+.4}, {hi:+.4}]", t.shape().h, t.shape().w);
            std::fs::write(out.join(format!("stage{stage}_{branch}.pgm")), encode_pgm(&map, t.shape().h, t.shape().w)?)?;
        }
    }
    let d: Vec<f64> = scene.depth.data().iter().map(|&v| v as f64).collect();
    let l: Vec<f64> = scene.labels.iter().map(|&v| v as f64).collect();
    std::fs::write(out.join("depth.pgm"), encode_pgm(&d, cfg.height, cfg.width)?)?;
    std::fs::write(out.join("labels.pgm"), encode_pgm(&l, cfg.height, cfg.width)?)?;
    println!("images in {}", out.display());
    Ok(())
}
