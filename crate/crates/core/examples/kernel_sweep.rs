//! Sweeps the DCA kernel size: receptive field, parameter count and a short
//! training run per size.

use dcattn::data::{generate_dataset, GenConfig};
use dcattn::net::{model_init, ToyNetConfig};
use dcattn::ops::{ConvSpec, Footprint};
use dcattn::train::{train, TrainConfig};
use dcattn::Result;

fn main() -> Result<()> {
    dcattn::parallel::init_from_env();
    let cfg = GenConfig::default();
    let samples = generate_dataset(&cfg, 100, 3)?;
    let tc = TrainConfig { epochs: 3, ..TrainConfig::default() };
    println!("{:>6} {:>10} {:>8} {:>10} {:>10}", "kernel", "footprint", "params", "miou", "pixel_acc");
    for k in [3, 5, 7, 9] {
        let net_cfg = ToyNetConfig { classes: cfg.classes, dca_kernel: k, ..ToyNetConfig::default() };
        let net = model_init::<f32>(&net_cfg)?;
        let params = net.params.parameter_count();
        let side = Footprint::expected_side(&[ConvSpec::depthwise(k)?]);
        let last = train(net, &samples, &tc)?.history.pop().expect("epochs > 0");
        println!("{k:>6} {:>10} {params:>8} {:>10.4} {:>10.4}", format!("{side}x{side}"), last.miou, last.pixel_acc);
    }
    Ok(())
}
