mod common;

use common::{confusion, metrics_from_confusion, random_tensor, rng};
use dcattn::autodiff::{finite_diff_grad, relative_error};
use dcattn::train::{cross_entropy_loss, mean_iou, pixel_accuracy, poly_lr, sgd_step, SgdConfig};
use dcattn::{Error, Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn poly_examples() {
    assert_eq!(poly_lr(0, 100, 0.008, 0.9).unwrap(), 0.008);
    assert_eq!(poly_lr(100, 100, 0.008, 0.9).unwrap(), 0.0);
    assert!((poly_lr(50, 100, 0.008, 0.9).unwrap() - 0.004287).abs() < 5e-7);
    assert!(matches!(poly_lr(101, 100, 0.008, 0.9), Err(Error::Contract(_))));
}

#[test]
fn sgd_examples() {
    let s = Shape::new(1, 1, 1, 3).unwrap();
    let p = Tensor::<f64>::from_vec(s, vec![1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::<f64>::from_vec(s, vec![0.3, 0.1, -0.2]).unwrap();
    let zero = p.zeros_like();
    let plain = SgdConfig { momentum: 0.0, weight_decay: 0.0 };
    let (p1, _) = sgd_step(&p, &g, &zero, 0.1, plain).unwrap();
    assert_eq!(p1, p.sub(&g.scale(0.1).unwrap()).unwrap());
    let (same, _) = sgd_step(&p, &zero, &zero, 0.1, plain).unwrap();
    assert_eq!(same, p);

    let mom = SgdConfig { momentum: 0.9, weight_decay: 0.0 };
    let (p1, v1) = sgd_step(&p, &g, &zero, 0.1, mom).unwrap();
    let (p2, _) = sgd_step(&p1, &g, &v1, 0.1, mom).unwrap();
    for i in 0..3 {
        let closed = p.data()[i] - 0.1 * g.data()[i] * (1.0 + 1.9);
        assert!((p2.data()[i] - closed).abs() < 1e-12);
    }
    let other = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 1).unwrap()).unwrap();
    assert!(matches!(sgd_step(&p, &other, &zero, 0.1, plain), Err(Error::Shape(_))));
}

#[test]
fn cross_entropy_examples() {
    let logits = Tensor::<f64>::filled(Shape::new(1, 5, 2, 2).unwrap(), 0.3).unwrap();
    let (loss, _) = cross_entropy_loss(&logits, &[0, 1, 2, 4]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-12);
    let sharp = Tensor::<f64>::from_fn(Shape::new(1, 3, 1, 1).unwrap(), |_, c, _, _| if c == 1 { 800.0 } else { 0.0 }).unwrap();
    assert!(cross_entropy_loss(&sharp, &[1]).unwrap().0 < 1e-300);
    assert!(cross_entropy_loss(&sharp, &[3]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let logits = random_tensor(&mut r, 2, 4, 3, 3);
        let labels: Vec<usize> = (0..18).map(|_| r.gen_range(0..4)).collect();
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let numeric = finite_diff_grad(|t| Ok(cross_entropy_loss(t, &labels)?.0), &logits, 1e-6).unwrap();
        let worst = grad.data().iter().zip(numeric.data()).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
        assert!(worst < 1e-6, "seed {seed}: {worst}");
    }
}

#[test]
fn metric_examples() {
    assert_eq!(pixel_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 2]).unwrap(), 0.75);
    assert_eq!(pixel_accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
    let (m, per) = mean_iou(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(per, vec![Some(0.5), Some(0.0)]);
    assert_eq!(m, 0.25);
    let (m, per) = mean_iou(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
    assert_eq!((m, per[2]), (1.0, None));
    assert!(matches!(pixel_accuracy(&[0], &[0, 1]), Err(Error::Shape(_))));
}

fn grid() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=64).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..4, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_match_confusion_oracle((pred, truth) in grid()) {
        let (acc, miou, per) = metrics_from_confusion(&confusion(&pred, &truth, 4));
        prop_assert_eq!(pixel_accuracy(&pred, &truth).unwrap(), acc);
        let (m, p) = mean_iou(&pred, &truth, 4).unwrap();
        prop_assert_eq!(m, miou);
        prop_assert_eq!(p, per);
    }

    #[test]
    fn metrics_invariant_to_relabeling((pred, truth) in grid(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
        let relabel = |v: &[usize]| v.iter().map(|&l| perm[l]).collect::<Vec<_>>();
        prop_assert_eq!(pixel_accuracy(&pred, &truth).unwrap(), pixel_accuracy(&relabel(&pred), &relabel(&truth)).unwrap());
        let (a, _) = mean_iou(&pred, &truth, 4).unwrap();
        let (b, _) = mean_iou(&relabel(&pred), &relabel(&truth), 4).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn poly_strictly_decreasing(max in 2usize..500, power in 0.1f64..3.0, base in 1e-4f64..1.0) {
        for it in 0..max {
            prop_assert!(poly_lr(it + 1, max, base, power).unwrap() < poly_lr(it, max, base, power).unwrap());
        }
    }
}
