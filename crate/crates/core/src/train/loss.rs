use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `cross_entropy_loss`: mean over pixels of `-log softmax(logits)[label]`,
/// with the gradient `(softmax - onehot) / pixel_count` with respect to the logits.
///
/// `labels` is laid out `(n, y, x)`, matching the logits' batch and spatial axes.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let plane = s.plane();
    let pixels = s.n * plane;
    if labels.len() != pixels {
        return Err(Error::shape(format!(
            "{} labels for logits {s} ({pixels} pixels)",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
        return Err(Error::Contract(format!("label {bad} out of range for {} classes", s.c)));
    }
    let x = logits.data();
    let inv = T::one() / T::of(pixels as f64);
    let mut grad = vec![T::zero(); x.len()];
    let mut total = 0.0f64;
    let mut probs = vec![T::zero(); s.c];
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| (n * s.c + c) * plane + p;
            let max = (0..s.c).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[at(c)] - max).exp();
                denom = denom + *pr;
            }
            let label = labels[n * plane + p];
            total += (denom.ln() - (x[at(label)] - max)).as_f64();
            for (c, &pr) in probs.iter().enumerate() {
                let onehot = if c == label { T::one() } else { T::zero() };
                grad[at(c)] = (pr / denom - onehot) * inv;
            }
        }
    }
    let loss = T::of(total / pixels as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::from_vec(s, grad)?))
}
