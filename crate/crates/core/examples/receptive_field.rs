//! Receptive fields of the attention chains, measured two ways: by
//! perturbation of the forward pass and by the support of the input gradient.

use dcattn::autodiff::Graph;
use dcattn::ops::{receptive_footprint, ConvSpec, Footprint};
use dcattn::{Result, Shape, Tensor};

fn gradient_side(chain: &[ConvSpec], size: usize) -> Result<(usize, usize)> {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn(Shape::new(1, 1, size, size)?, |_, _, i, j| {
        ((i * 31 + j * 17) % 23) as f64 / 23.0
    })?);
    let mut y = x;
    for &s in chain {
        let w = g.leaf(Tensor::filled(Shape::new(1, 1, s.kernel(), s.kernel())?, 0.1)?);
        y = g.diff_conv2d(y, w, s)?;
    }
    let c = size / 2;
    let mask = g.leaf(Tensor::from_fn(Shape::new(1, 1, size, size)?, |_, _, i, j| ((i, j) == (c, c)) as u8 as f64)?);
    let picked = g.mul(y, mask)?;
    let loss = g.sum(picked)?;
    let dx = g.backward(loss)?.wrt(&g, x);
    let hit: Vec<(usize, usize)> = (0..size)
        .flat_map(|i| (0..size).map(move |j| (i, j)))
        .filter(|&(i, j)| dx.at(0, 0, i, j) != 0.0)
        .collect();
    let side = |v: Vec<usize>| v.iter().max().unwrap() - v.iter().min().unwrap() + 1;
    Ok((side(hit.iter().map(|p| p.0).collect()), side(hit.iter().map(|p| p.1).collect())))
}

fn main() -> Result<()> {
    let chains: Vec<(&str, Vec<ConvSpec>)> = vec![
        ("DCA: dw 9x9", vec![ConvSpec::depthwise(9)?]),
        ("EDC: dw 5x5 -> dw 9x9 d=3", vec![ConvSpec::depthwise(5)?, ConvSpec::depthwise(9)?.dilated(3)?]),
        ("dw 3x3 d=2", vec![ConvSpec::depthwise(3)?.dilated(2)?]),
        ("dw 5x5 -> dw 5x5 d=2 -> dw 3x3 d=3", vec![
            ConvSpec::depthwise(5)?,
            ConvSpec::depthwise(5)?.dilated(2)?,
            ConvSpec::depthwise(3)?.dilated(3)?,
        ]),
    ];
    println!("{:<36} {:>8} {:>12} {:>12}", "chain", "formula", "perturbation", "gradient");
    for (name, chain) in &chains {
        let expect = Footprint::expected_side(chain);
        let size = expect + 12;
        let f = receptive_footprint(chain, (size / 2, size / 2), (size, size))?;
        let (gh, gw) = gradient_side(chain, size)?;
        println!("{name:<36} {expect:>8} {:>12} {:>12}", format!("{}x{}", f.height(), f.width()), format!("{gh}x{gw}"));
    }
    Ok(())
}
