//! Reference implementations written directly from the definitions, sharing
//! no code with the library kernels.
#![allow(dead_code)]

use dcattn::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let shape = Shape::new(n, c, h, w).unwrap();
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Input value with zeros outside the image.
fn padded(x: &Tensor<f64>, n: usize, c: usize, y: isize, xx: isize) -> f64 {
    let s = x.shape();
    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
        0.0
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

/// Naive six-loop convolution, stride 1, same padding, no bias. With
/// `differential`, each tap is scaled by `exp(-|X(p) - X(p + p_i)|)` on the
/// tapped channel of the zero-padded input.
pub fn reference_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    k: usize,
    d: usize,
    depthwise: bool,
    differential: bool,
) -> Tensor<f64> {
    let s = x.shape();
    let ws = w.shape();
    let c_out = if depthwise { s.c } else { ws.n };
    let pad = (d * (k - 1) / 2) as isize;
    let out_shape = Shape::new(s.n, c_out, s.h, s.w).unwrap();
    let mut out = vec![0.0; out_shape.len()];
    for n in 0..s.n {
        for o in 0..c_out {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let mut acc = 0.0;
                    let in_channels: Vec<(usize, usize)> = if depthwise {
                        vec![(o, 0)]
                    } else {
                        (0..s.c).map(|c| (c, c)).collect()
                    };
                    for (c, slot) in in_channels {
                        for i in 0..k {
                            for j in 0..k {
                                let ty = y as isize - pad + (i * d) as isize;
                                let tx = xx as isize - pad + (j * d) as isize;
                                let v = padded(x, n, c, ty, tx);
                                let mut kv = w.at(o, slot, i, j);
                                if differential {
                                    let center = x.at(n, c, y, xx);
                                    kv *= (-(center - v).abs()).exp();
                                }
                                acc += kv * v;
                            }
                        }
                    }
                    out[out_shape.index(n, o, y, xx)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Confusion matrix `m[truth][pred]` by brute force.
pub fn confusion(pred: &[usize], truth: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    m
}

/// Pixel accuracy and (mIoU over present classes, per-class IoU) from a confusion matrix.
pub fn metrics_from_confusion(m: &[Vec<u64>]) -> (f64, f64, Vec<Option<f64>>) {
    let k = m.len();
    let total: u64 = m.iter().flatten().sum();
    let correct: u64 = (0..k).map(|i| m[i][i]).sum();
    let per: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = m[c][c];
            let row: u64 = m[c].iter().sum();
            let col: u64 = (0..k).map(|r| m[r][c]).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    (correct as f64 / total as f64, miou, per)
}
