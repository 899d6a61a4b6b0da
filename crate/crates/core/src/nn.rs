//! Encoder plumbing: rectifier, 2x2 mean pooling and bilinear upsampling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::from_vec(
        x.shape(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

/// 2x2 mean pooling with stride 2; both spatial extents must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(format!("avg_pool2 needs even extents, got {s}")));
    }
    let (ho, wo) = (s.h / 2, s.w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
    for src in x.data().chunks_exact(s.plane()) {
        for y in 0..ho {
            let (r0, r1) = (&src[2 * y * s.w..], &src[(2 * y + 1) * s.w..]);
            for xo in 0..wo {
                let sum = r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1];
                out.push(sum * quarter);
            }
        }
    }
    Tensor::from_vec(s.with_spatial(ho, wo), out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(x_shape: crate::tensor::Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (ho, wo) = (x_shape.h / 2, x_shape.w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); x_shape.len()];
    for (dst, g) in dx
        .chunks_exact_mut(x_shape.plane())
        .zip(grad_out.data().chunks_exact(ho * wo))
    {
        for y in 0..x_shape.h {
            for x in 0..x_shape.w {
                dst[y * x_shape.w + x] = g[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

/// Source taps along one axis for half-pixel-centered bilinear resampling:
/// `src = max((dst + 0.5) * in / out - 0.5, 0)`, `i0 = floor(src)`,
/// `i1 = min(i0 + 1, in - 1)`, weight of `i1` is `src - i0`.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(h, w)` with align-corners disabled.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let out_shape = crate::tensor::Shape::new(s.n, s.c, h, w)?;
    let (ry, rx) = (axis_taps(s.h, h), axis_taps(s.w, w));
    let mut out = Vec::with_capacity(out_shape.len());
    for src in x.data().chunks_exact(s.plane()) {
        for &(y0, y1, ly) in &ry {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for &(x0, x1, lx) in &rx {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let top = src[y0 * s.w + x0] * hx + src[y0 * s.w + x1] * lx;
                let bottom = src[y1 * s.w + x0] * hx + src[y1 * s.w + x1] * lx;
                out.push(top * hy + bottom * ly);
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(
    x_shape: crate::tensor::Shape,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    let (ry, rx) = (axis_taps(x_shape.h, gs.h), axis_taps(x_shape.w, gs.w));
    let mut dx = vec![T::zero(); x_shape.len()];
    for (dst, g) in dx
        .chunks_exact_mut(x_shape.plane())
        .zip(grad_out.data().chunks_exact(gs.plane()))
    {
        for (yo, &(y0, y1, ly)) in ry.iter().enumerate() {
            let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
            for (xo, &(x0, x1, lx)) in rx.iter().enumerate() {
                let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                let gv = g[yo * gs.w + xo];
                let w = x_shape.w;
                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * hy * hx;
                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * hy * lx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * ly * hx;
                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * ly * lx;
            }
        }
    }
    Tensor::from_vec(x_shape, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn pool_averages_quads() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 4).unwrap(), vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        assert_eq!(avg_pool2(&x).unwrap().data(), &[3.5, 5.5]);
        let odd = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 4).unwrap()).unwrap();
        assert!(avg_pool2(&odd).is_err());
    }

    #[test]
    fn upsample_matches_half_pixel_formula() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2).unwrap(), vec![0.0, 1.0]).unwrap();
        let y = upsample_bilinear(&x, 1, 4).unwrap();
        // src positions: -0.25 -> 0, 0.25, 0.75, 1.25 -> clamped neighbour
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
        let c = Tensor::<f64>::filled(Shape::new(2, 3, 4, 4).unwrap(), 0.3).unwrap();
        let up = upsample_bilinear(&c, 16, 16).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3).unwrap(), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }
}
