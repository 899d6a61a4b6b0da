use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::metrics::IouCounts;
use super::optim::{poly_lr, sgd_step, SgdConfig};
use crate::attention::Variant;
use crate::autodiff::{DiffGradient, Graph};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::net::{forward_graph, model_init, NetWeights, ToyNet, ToyNetConfig, ToyNetParams};
use crate::tensor::{Scalar, Tensor};

/// Fraction of samples held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub diff_gradient: DiffGradient,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.008,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            epochs: 12,
            batch_size: 8,
            seed: 0,
            variant: Variant::Full,
            diff_gradient: DiffGradient::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("poly_power must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Metrics after one epoch; `loss` is the mean training loss over its batches.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pixel_acc: f64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: ToyNet<f32>,
    pub history: Vec<MetricsRecord>,
}

/// Index ranges `(train, holdout)`: the last 20% (at least one sample) is held out.
pub fn holdout_split(len: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if len < 2 {
        return Err(Error::Contract(format!("need at least 2 samples to hold one out, got {len}")));
    }
    let held = ((len as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, len - 1);
    Ok((0..len - held, len - held..len))
}

fn check_samples(samples: &[SceneSample], config: &ToyNetConfig) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Contract("dataset is empty".into()))?;
    let (h, w) = (first.height(), first.width());
    for (i, s) in samples.iter().enumerate() {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!("sample {i} is {}x{}, sample 0 is {h}x{w}", s.height(), s.width())));
        }
        if let Some(&l) = s.labels.iter().find(|&&l| l >= config.classes) {
            return Err(Error::Contract(format!(
                "sample {i} has label {l} but the model predicts {} classes",
                config.classes
            )));
        }
    }
    Ok(())
}

struct Batch {
    rgb: Tensor<f32>,
    depth: Tensor<f32>,
    labels: Vec<usize>,
}

fn make_batch(samples: &[SceneSample], indices: &[usize]) -> Result<Batch> {
    let rgb: Vec<&Tensor<f32>> = indices.iter().map(|&i| &samples[i].rgb).collect();
    let depth: Vec<&Tensor<f32>> = indices.iter().map(|&i| &samples[i].depth).collect();
    Ok(Batch {
        rgb: Tensor::stack_batch(&rgb)?,
        depth: Tensor::stack_batch(&depth)?,
        labels: indices.iter().flat_map(|&i| samples[i].labels.iter().copied()).collect(),
    })
}

/// Per-pixel argmax of `(n, classes, H, W)` logits, lowest class on ties.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let s = logits.shape();
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = (0, logits.data()[s.index(n, 0, 0, 0) + p]);
            for c in 1..s.c {
                let v = logits.data()[s.index(n, c, 0, 0) + p];
                if v > best.1 {
                    best = (c, v);
                }
            }
            out.push(best.0);
        }
    }
    out
}

/// Accumulated confusion counts of `net` over `samples`.
pub fn evaluate(net: &ToyNet<f32>, samples: &[SceneSample]) -> Result<IouCounts> {
    let preds: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|s| net.forward(&s.rgb, &s.depth).map(|l| predict_labels(&l)))
        .collect::<Result<_>>()?;
    let mut counts = IouCounts::new(net.config.classes);
    for (pred, s) in preds.iter().zip(samples) {
        counts.update(pred, &s.labels)?;
    }
    Ok(counts)
}

fn diverged(epoch: usize, iter: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(detail) => Error::Diverged { epoch, iter, detail },
        other => other,
    }
}

/// One SGD step on `batch`; returns the batch loss.
fn train_step(
    params: &mut ToyNetParams<f32>,
    velocity: &mut ToyNetParams<f32>,
    batch: &Batch,
    config: &ToyNetConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::with_diff_gradient(cfg.diff_gradient);
    let rgb = g.leaf(batch.rgb.clone());
    let depth = g.leaf(batch.depth.clone());
    let w = params.bind(&mut g);
    let out = forward_graph(&mut g, rgb, depth, &w, config)?;
    let loss = g.cross_entropy(out.logits, &batch.labels)?;
    let loss_value = g.value(loss).item()?.as_f64();
    let grads = g.backward(loss)?;

    let ids: Vec<_> = w.leaves().into_iter().map(|(_, &id)| id).collect();
    let current = params.leaves();
    let vel = velocity.leaves();
    let mut new_params = Vec::with_capacity(ids.len());
    let mut new_vel = Vec::with_capacity(ids.len());
    for ((id, (_, p)), (_, v)) in ids.iter().zip(current).zip(vel) {
        let (p2, v2) = sgd_step(p, &grads.wrt(&g, *id), v, lr, cfg.sgd())?;
        new_params.push(p2);
        new_vel.push(v2);
    }
    *params = params.rebuild(new_params)?;
    *velocity = velocity.rebuild(new_vel)?;
    Ok(loss_value)
}

/// `train`: momentum SGD on the leading 80% of `samples` under the poly
/// schedule, evaluating on the trailing 20% after every epoch.
pub fn train(net: ToyNet<f32>, samples: &[SceneSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if net.config.variant != cfg.variant {
        return Err(Error::config(format!(
            "model is wired for {} but training asked for {}",
            net.config.variant, cfg.variant
        )));
    }
    check_samples(samples, &net.config)?;
    let (train_range, held_range) = holdout_split(samples.len())?;
    let held = &samples[held_range];
    let batches_per_epoch = train_range.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches_per_epoch;

    let ToyNet { config, mut params } = net;
    let mut velocity: NetWeights<Tensor<f32>> = params.map(&mut |_, t| t.zeros_like());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = train_range.clone().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = poly_lr(iter, max_iter, cfg.base_lr, cfg.poly_power)?;
            let batch = make_batch(samples, chunk)?;
            let loss = train_step(&mut params, &mut velocity, &batch, &config, cfg, lr)
                .map_err(|e| diverged(epoch, iter, e))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iter,
                    detail: format!("loss is {loss}"),
                });
            }
            loss_sum += loss;
            iter += 1;
        }
        let snapshot = ToyNet {
            config: config.clone(),
            params: params.clone(),
        };
        let counts = evaluate(&snapshot, held).map_err(|e| diverged(epoch, iter, e))?;
        history.push(MetricsRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches_per_epoch as f64,
            pixel_acc: counts.pixel_accuracy(),
            miou: counts.mean_iou(),
            per_class_iou: counts.per_class(),
        });
    }
    Ok(TrainOutcome {
        net: ToyNet { config, params },
        history,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.rotate_left(17) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Metrics history as CSV: `epoch,loss,pixel_acc,miou,iou_0..iou_{k-1}`.
/// Classes absent from both prediction and truth are written as `NA`.
pub fn metrics_csv(history: &[MetricsRecord], classes: usize) -> String {
    let mut out = String::from("epoch,loss,pixel_acc,miou");
    for c in 0..classes {
        let _ = write!(out, ",iou_{c}");
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{},{:.6},{:.6},{:.6}", r.epoch, r.loss, r.pixel_acc, r.miou);
        for c in 0..classes {
            match r.per_class_iou.get(c).copied().flatten() {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Final-epoch metrics of one (variant, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub pixel_acc: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub median_pixel_acc: f64,
    pub median_miou: f64,
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn median_miou(&self, variant: Variant) -> Option<f64> {
        self.row(variant).map(|r| r.median_miou)
    }

    /// `variant,seeds,median_pixel_acc,median_miou,miou_per_seed` with seeds
    /// separated by `;`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seeds,median_pixel_acc,median_miou,miou_per_seed\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r.cells.iter().map(|c| format!("{:.6}", c.miou)).collect();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{}",
                r.variant,
                r.cells.len(),
                r.median_pixel_acc,
                r.median_miou,
                per_seed.join(";")
            );
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Trains every variant in `variants` once per seed. Seed `s` initializes the
/// model and drives the shuffle, so variants see identical encoder weights
/// and batch order.
pub fn ablate(
    samples: &[SceneSample],
    net_config: &ToyNetConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationSummary> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::config("ablation needs at least one variant and one seed"));
    }
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let nc = ToyNetConfig {
                variant,
                seed,
                ..net_config.clone()
            };
            let tc = TrainConfig {
                variant,
                seed,
                ..train_config.clone()
            };
            let outcome = train(model_init(&nc)?, samples, &tc)?;
            let last = outcome
                .history
                .last()
                .ok_or_else(|| Error::config("ablation needs at least one epoch"))?;
            Ok(AblationCell {
                variant,
                seed,
                pixel_acc: last.pixel_acc,
                miou: last.miou,
            })
        })
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .map(|&variant| {
            let cells: Vec<AblationCell> = cells.iter().filter(|c| c.variant == variant).cloned().collect();
            let acc: Vec<f64> = cells.iter().map(|c| c.pixel_acc).collect();
            let miou: Vec<f64> = cells.iter().map(|c| c.miou).collect();
            AblationRow {
                variant,
                median_pixel_acc: median(&acc),
                median_miou: median(&miou),
                cells,
            }
        })
        .collect();
    Ok(AblationSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};

    fn tiny() -> (Vec<SceneSample>, ToyNetConfig) {
        let gen = GenConfig {
            height: 16,
            width: 16,
            ..Default::default()
        };
        let data = generate_dataset(&gen, 10, 3).unwrap();
        let cfg = ToyNetConfig {
            stages: 2,
            base_channels: 8,
            ..Default::default()
        };
        (data, cfg)
    }

    #[test]
    fn split_sizes() {
        assert_eq!(holdout_split(625).unwrap(), (0..500, 500..625));
        assert_eq!(holdout_split(2).unwrap(), (0..1, 1..2));
        assert_eq!(holdout_split(3).unwrap(), (0..2, 2..3));
        assert!(holdout_split(1).is_err());
    }

    #[test]
    fn zero_epochs_and_zero_lr_keep_params() {
        let (data, cfg) = tiny();
        let net = model_init::<f32>(&cfg).unwrap();
        let out = train(net.clone(), &data, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.net.params, net.params);
        let tc = TrainConfig {
            epochs: 2,
            base_lr: 0.0,
            ..Default::default()
        };
        let out = train(net.clone(), &data, &tc).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.net.params, net.params);
    }

    #[test]
    fn huge_lr_diverges() {
        let (data, cfg) = tiny();
        let tc = TrainConfig {
            epochs: 3,
            base_lr: 1e6,
            ..Default::default()
        };
        let err = train(model_init(&cfg).unwrap(), &data, &tc).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn training_is_reproducible_and_lowers_loss() {
        let (data, cfg) = tiny();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            base_lr: 0.05,
            ..Default::default()
        };
        let a = train(model_init(&cfg).unwrap(), &data, &tc).unwrap();
        let b = train(model_init(&cfg).unwrap(), &data, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history[2].loss < a.history[0].loss);
        let csv = metrics_csv(&a.history, cfg.classes);
        assert!(csv.starts_with("epoch,loss,pixel_acc,miou,iou_0,iou_1,iou_2,iou_3,iou_4\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn variant_mismatch_rejected() {
        let (data, cfg) = tiny();
        let tc = TrainConfig {
            variant: Variant::Baseline,
            ..Default::default()
        };
        assert!(matches!(train(model_init(&cfg).unwrap(), &data, &tc), Err(Error::Config(_))));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let t = Tensor::<f32>::from_vec(crate::tensor::Shape::new(1, 3, 1, 2).unwrap(), vec![1., 0., 1., 2., 0., 2.]).unwrap();
        assert_eq!(predict_labels(&t), vec![0, 1]);
    }
}
