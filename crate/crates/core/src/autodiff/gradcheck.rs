//! Central finite differences as an independent oracle for [`Graph::backward`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use crate::attention::{dca_graph, edca_graph, fusion_graph, DcaParams, EdcaParams, FusionParams, Variant};
use crate::error::{Error, Result};
use crate::net::{forward_graph, model_init, ToyNetConfig};
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Shape, Tensor};

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;
/// Inputs are resampled while any kinked op sits closer than this to its kink.
pub const KINK_MARGIN: f64 = 10.0 * FD_STEP;
const MAX_RESAMPLES: u64 = 50;

/// `finite_diff_grad`: `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.data().to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + T::of(h);
        let plus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = orig - T::of(h);
        let minus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = orig;
        grad.push((plus - minus) / T::of(2.0 * h));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Finite-difference vector-Jacobian product `r^T dF/dx` for a tensor-valued `f`.
///
/// Output differences are formed per element before the projection, which
/// keeps cancellation error at the scale of each output rather than of their sum.
pub fn finite_diff_vjp<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    r: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.data().to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + T::of(h);
        let plus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = orig - T::of(h);
        let minus = f(&Tensor::from_vec(x.shape(), probe.clone())?)?;
        probe[i] = orig;
        if plus.shape() != r.shape() || minus.shape() != r.shape() {
            return Err(Error::shape(format!("projection {} does not match output {}", r.shape(), plus.shape())));
        }
        let acc: f64 = plus
            .data()
            .iter()
            .zip(minus.data())
            .zip(r.data())
            .map(|((&p, &m), &w)| w.as_f64() * (p - m).as_f64())
            .sum();
        grad.push(T::of(acc / (2.0 * h)));
    }
    Tensor::from_vec(x.shape(), grad)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Operators and compositions covered by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradOp {
    Conv2d,
    Conv2dDepthwiseDilated,
    DiffConv2d,
    DiffConv2dDepthwise,
    DiffConv2dDilated,
    PointwiseConv,
    Add,
    Mul,
    Relu,
    AvgPool2,
    UpsampleBilinear,
    CrossEntropy,
    Dca,
    Edca,
    Fusion,
    ToyNet,
}

impl GradOp {
    pub const ALL: [GradOp; 16] = [
        GradOp::Conv2d,
        GradOp::Conv2dDepthwiseDilated,
        GradOp::DiffConv2d,
        GradOp::DiffConv2dDepthwise,
        GradOp::DiffConv2dDilated,
        GradOp::PointwiseConv,
        GradOp::Add,
        GradOp::Mul,
        GradOp::Relu,
        GradOp::AvgPool2,
        GradOp::UpsampleBilinear,
        GradOp::CrossEntropy,
        GradOp::Dca,
        GradOp::Edca,
        GradOp::Fusion,
        GradOp::ToyNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv2d => "conv2d",
            GradOp::Conv2dDepthwiseDilated => "conv2d_depthwise_dilated",
            GradOp::DiffConv2d => "diff_conv2d",
            GradOp::DiffConv2dDepthwise => "diff_conv2d_depthwise",
            GradOp::DiffConv2dDilated => "diff_conv2d_dilated",
            GradOp::PointwiseConv => "pointwise_conv",
            GradOp::Add => "add",
            GradOp::Mul => "mul",
            GradOp::Relu => "relu",
            GradOp::AvgPool2 => "avg_pool2",
            GradOp::UpsampleBilinear => "upsample_bilinear",
            GradOp::CrossEntropy => "cross_entropy",
            GradOp::Dca => "dca",
            GradOp::Edca => "edca",
            GradOp::Fusion => "fusion",
            GradOp::ToyNet => "toy_net",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::config(format!("unknown gradient-check op {s:?}")))
    }
}

/// One differentiated tensor of a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub tensor: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// `GradientReport`: analytic vs. finite-difference agreement per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub op: GradOp,
    pub seed: u64,
    pub tol: f64,
    pub entries: Vec<GradEntry>,
}

impl GradientReport {
    pub const CSV_HEADER: &'static str = "op,tensor,max_rel_err,pass";

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{},{},{:.3e},{}\n", self.op, e.tensor, e.max_rel_err, e.pass))
            .collect()
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// Named inputs plus the graph recording the op over their leaves.
struct Case {
    inputs: Vec<(String, Tensor<f64>)>,
    build: Builder,
}

fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn normal(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(shape, (0..shape.len()).map(|_| dist.sample(rng)).collect())
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("static shape")
}

fn conv_case(spec: ConvSpec, c: usize, c_out: usize, diff: bool, rng: &mut ChaCha8Rng) -> Result<Case> {
    let k = spec.kernel();
    let w_in = match spec.grouping() {
        crate::ops::Grouping::Dense => c,
        crate::ops::Grouping::Depthwise => 1,
    };
    let x = uniform(shape(1, c, 7, 7), rng)?;
    let w = normal(shape(c_out, w_in, k, k), 0.5, rng)?;
    let build: Builder = if diff {
        Box::new(move |g, ids| g.diff_conv2d(ids[0], ids[1], spec))
    } else {
        Box::new(move |g, ids| g.conv2d(ids[0], ids[1], spec))
    };
    Ok(Case {
        inputs: vec![("x".into(), x), ("w".into(), w)],
        build,
    })
}

fn make_case(op: GradOp, rng: &mut ChaCha8Rng) -> Result<Case> {
    let binary = |rng: &mut ChaCha8Rng, s: Shape| -> Result<Vec<(String, Tensor<f64>)>> {
        Ok(vec![("a".into(), uniform(s, rng)?), ("b".into(), uniform(s, rng)?)])
    };
    Ok(match op {
        GradOp::Conv2d => conv_case(ConvSpec::dense(3)?, 2, 3, false, rng)?,
        GradOp::Conv2dDepthwiseDilated => conv_case(ConvSpec::depthwise(3)?.dilated(2)?, 3, 3, false, rng)?,
        GradOp::DiffConv2d => conv_case(ConvSpec::dense(3)?, 2, 3, true, rng)?,
        GradOp::DiffConv2dDepthwise => conv_case(ConvSpec::depthwise(5)?, 3, 3, true, rng)?,
        GradOp::DiffConv2dDilated => conv_case(ConvSpec::depthwise(3)?.dilated(3)?, 2, 2, true, rng)?,
        GradOp::PointwiseConv => Case {
            inputs: vec![
                ("x".into(), uniform(shape(2, 3, 4, 5), rng)?),
                ("w".into(), normal(shape(4, 3, 1, 1), 0.5, rng)?),
            ],
            build: Box::new(|g, ids| g.pointwise(ids[0], ids[1])),
        },
        GradOp::Add => Case {
            inputs: binary(rng, shape(2, 2, 3, 4))?,
            build: Box::new(|g, ids| g.add(ids[0], ids[1])),
        },
        GradOp::Mul => Case {
            inputs: binary(rng, shape(2, 2, 3, 4))?,
            build: Box::new(|g, ids| g.mul(ids[0], ids[1])),
        },
        GradOp::Relu => Case {
            inputs: vec![("x".into(), uniform(shape(1, 2, 5, 5), rng)?)],
            build: Box::new(|g, ids| g.relu(ids[0])),
        },
        GradOp::AvgPool2 => Case {
            inputs: vec![("x".into(), uniform(shape(1, 2, 4, 6), rng)?)],
            build: Box::new(|g, ids| g.avg_pool2(ids[0])),
        },
        GradOp::UpsampleBilinear => Case {
            inputs: vec![("x".into(), uniform(shape(1, 2, 3, 3), rng)?)],
            build: Box::new(|g, ids| g.upsample_bilinear(ids[0], 7, 5)),
        },
        GradOp::CrossEntropy => {
            let logits = normal(shape(2, 4, 3, 3), 1.0, rng)?;
            let labels: Vec<usize> = (0..2 * 9).map(|_| rng.gen_range(0..4)).collect();
            Case {
                inputs: vec![("logits".into(), logits)],
                build: Box::new(move |g, ids| g.cross_entropy(ids[0], &labels)),
            }
        }
        GradOp::Dca => {
            let f = uniform(shape(1, 3, 8, 8), rng)?;
            let p = DcaParams::<f64>::init(3, 9, rng)?;
            let mut inputs = vec![("f".to_string(), f)];
            p.map("", &mut |n, t| inputs.push((n.to_string(), t.clone())));
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let mut it = ids[1..].iter().copied();
                    let w = p.map("", &mut |_, _| it.next().expect("leaf count"));
                    Ok(dca_graph(g, ids[0], &w)?.output)
                }),
            }
        }
        GradOp::Edca => {
            let f = uniform(shape(1, 3, 10, 10), rng)?;
            let p = EdcaParams::<f64>::init(3, rng)?;
            let mut inputs = vec![("f".to_string(), f)];
            p.map("", &mut |n, t| inputs.push((n.to_string(), t.clone())));
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let mut it = ids[1..].iter().copied();
                    let w = p.map("", &mut |_, _| it.next().expect("leaf count"));
                    Ok(edca_graph(g, ids[0], &w)?.output)
                }),
            }
        }
        GradOp::Fusion => {
            let s = shape(1, 16, 6, 6);
            let (rgb, depth) = (uniform(s, rng)?, uniform(s, rng)?);
            let p = FusionParams::<f64>::init(16, Variant::Full, 8, 9, rng)?;
            let mut inputs = vec![("rgb".to_string(), rgb), ("depth".to_string(), depth)];
            p.map("", &mut |n, t| inputs.push((n.to_string(), t.clone())));
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let mut it = ids[2..].iter().copied();
                    let w = p.map("", &mut |_, _| it.next().expect("leaf count"));
                    let out = fusion_graph(g, ids[0], ids[1], &w)?;
                    g.add(out.rgb_out, out.depth_out)
                }),
            }
        }
        GradOp::ToyNet => {
            let config = ToyNetConfig {
                stages: 1,
                base_channels: 8,
                classes: 3,
                seed: rng.gen(),
                ..Default::default()
            };
            let net = model_init::<f64>(&config)?;
            let s = shape(1, 3, 16, 16);
            let rgb = uniform(s, rng)?;
            let depth = uniform(s.with_channels(1), rng)?;
            let mut inputs = vec![("rgb".to_string(), rgb), ("depth".to_string(), depth)];
            inputs.extend(net.params.leaves().into_iter().map(|(n, t)| (n, t.clone())));
            let params = net.params;
            Case {
                inputs,
                build: Box::new(move |g, ids| {
                    let w = params.rebuild(ids[2..].to_vec())?;
                    Ok(forward_graph(g, ids[0], ids[1], &w, &config)?.logits)
                }),
            }
        }
    })
}

/// Records `case` over `inputs` and returns the graph, its leaves and the output.
fn record(case: &Case, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &ids)?;
    Ok((g, ids, out))
}

/// `grad_check`: compares [`Graph::backward`] against [`finite_diff_vjp`] for
/// every input and parameter of `op`, with a random output projection.
///
/// Inputs are redrawn from a seed-derived stream until every kinked op is at
/// least [`KINK_MARGIN`] away from its kink.
pub fn grad_check(op: GradOp, seed: u64, tol: f64) -> Result<GradientReport> {
    let mut chosen = None;
    for attempt in 0..MAX_RESAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt));
        let case = make_case(op, &mut rng)?;
        let values: Vec<Tensor<f64>> = case.inputs.iter().map(|(_, t)| t.clone()).collect();
        let (g, _, out) = record(&case, &values)?;
        if g.kink_margin() >= KINK_MARGIN {
            let projection = uniform(g.value(out).shape(), &mut rng)?;
            chosen = Some((case, values, projection));
            break;
        }
    }
    let (case, values, projection) = chosen.ok_or_else(|| {
        Error::Contract(format!("{op}: no kink-free sample in {MAX_RESAMPLES} draws"))
    })?;

    let (mut g, ids, out) = record(&case, &values)?;
    let r = g.leaf(projection.clone());
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted)?;
    let grads = g.backward(loss)?;

    let mut entries = Vec::with_capacity(values.len());
    for (i, (name, _)) in case.inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, ids[i]);
        let numeric = finite_diff_vjp(
            |probe| {
                let mut vals = values.clone();
                vals[i] = probe.clone();
                let (g, _, out) = record(&case, &vals)?;
                Ok(g.value(out).clone())
            },
            &values[i],
            &projection,
            FD_STEP,
        )?;
        let max_rel_err = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        entries.push(GradEntry {
            tensor: name.clone(),
            max_rel_err,
            pass: max_rel_err < tol,
        });
    }
    Ok(GradientReport { op, seed, tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_linear_and_quadratic() {
        let x = Tensor::<f64>::from_vec(shape(1, 1, 2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
        let x = Tensor::<f64>::scalar(3.0).unwrap();
        let g = finite_diff_grad(|t| Ok(t.mul(t)?.sum()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn op_names_round_trip() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        assert!("bogus".parse::<GradOp>().is_err());
    }

    #[test]
    fn primitives_pass() {
        for op in [GradOp::Conv2d, GradOp::DiffConv2d, GradOp::Relu, GradOp::CrossEntropy] {
            let report = grad_check(op, 1, 1e-4).unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        assert!(!grad_check(GradOp::Mul, 0, 0.0).unwrap().passed());
    }
}
