//! DCA, EDCA and the fusion block on random features.

use dcattn::attention::{dca_forward, edca_forward, variant_forward, DcaParams, EdcaParams, FusionParams, Variant};
use dcattn::{Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn stats(t: &Tensor<f64>) -> String {
    let d = t.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    format!("mean {mean:+.4} range [{lo:+.4}, {hi:+.4}]")
}

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random(Shape::new(2, 4, 16, 16)?, &mut rng)?;

    let dca = dca_forward(&f, &DcaParams::init(4, 9, &mut rng)?)?;
    let edca = edca_forward(&f, &EdcaParams::init(4, &mut rng)?)?;
    for (name, out) in [("DCA", &dca), ("EDCA", &edca)] {
        println!("{name:<5} input {}  attention {}  output {}", f.shape(), out.attention.shape(), out.output.shape());
        println!("      attention {}", stats(&out.attention));
        println!("      output == attention * input: {}", out.output == out.attention.mul(&f)?);
    }

    let rgb = random(Shape::new(1, 16, 8, 8)?, &mut rng)?;
    let depth = random(Shape::new(1, 16, 8, 8)?, &mut rng)?;
    println!("\nfusion block, 16 channels squeezed to 2");
    for variant in Variant::ALL {
        let p = FusionParams::init(16, variant, 8, 9, &mut ChaCha8Rng::seed_from_u64(9))?;
        let (r, d) = variant_forward(&rgb, &depth, variant, &p)?;
        println!("{:<10} rgb_out {}   depth_out {}", variant.name(), stats(&r), stats(&d));
    }
    Ok(())
}
