//! Pixel accuracy and mean intersection-over-union.
//!
//! Classes absent from both prediction and ground truth have no IoU and are
//! left out of the mean.

use crate::error::{Error, Result};

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty label grids"));
    }
    Ok(())
}

/// `pixel_accuracy`: fraction of pixels with `pred == truth`.
pub fn pixel_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-class intersection and union counts, accumulated over any number of grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    actual: Vec<u64>,
    correct: u64,
    total: u64,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        IouCounts {
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            actual: vec![0; classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        check_pair(pred, truth)?;
        let k = self.classes();
        if let Some(&bad) = pred.iter().chain(truth).find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.predicted[p] += 1;
            self.actual[t] += 1;
            if p == t {
                self.intersection[p] += 1;
                self.correct += 1;
            }
        }
        self.total += pred.len() as u64;
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }

    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let union = self.predicted[c] + self.actual[c] - self.intersection[c];
                (union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// `mean_iou`: returns the mean over present classes and the per-class list.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut counts = IouCounts::new(classes);
    counts.update(pred, truth)?;
    Ok((counts.mean_iou(), counts.per_class()))
}
