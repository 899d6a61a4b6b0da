use crate::error::{Error, Result};
use crate::nn;
use crate::ops::{self, ConvSpec, DiffSaved};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::train::loss::cross_entropy_loss;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the backward pass treats the `exp(-|center - tap|)` multipliers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DiffGradient {
    /// Differentiate through the pixel-difference term.
    #[default]
    Full,
    /// Treat multipliers as constants.
    Stop,
}

enum Op<T> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        spec: ConvSpec,
        xp: Tensor<T>,
    },
    DiffConv {
        x: NodeId,
        w: NodeId,
        spec: ConvSpec,
        saved: DiffSaved<T>,
    },
    Pointwise {
        x: NodeId,
        w: NodeId,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    AvgPool2(NodeId),
    Upsample(NodeId),
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of executed primitives. Nodes are appended in execution order, so
/// the tape is topologically sorted and backward walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    diff_gradient: DiffGradient,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            diff_gradient: DiffGradient::Full,
        }
    }

    pub fn with_diff_gradient(mode: DiffGradient) -> Self {
        Graph {
            nodes: Vec::new(),
            diff_gradient: mode,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let (y, xp) = ops::conv2d_saved(self.value(x), self.value(w), spec)?;
        Ok(self.push(y, Op::Conv { x, w, spec, xp }))
    }

    pub fn diff_conv2d(&mut self, x: NodeId, w: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let (y, saved) = ops::diff_conv2d_saved(self.value(x), self.value(w), spec)?;
        Ok(self.push(y, Op::DiffConv { x, w, spec, saved }))
    }

    pub fn pointwise(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let y = ops::pointwise_conv(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::Pointwise { x, w }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = nn::relu(self.value(x))?;
        Ok(self.push(y, Op::Relu(x)))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let y = nn::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2(x)))
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let y = nn::upsample_bilinear(self.value(x), h, w)?;
        Ok(self.push(y, Op::Upsample(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(self.value(x).sum())?;
        Ok(self.push(y, Op::Sum(x)))
    }

    /// Mean pixel cross-entropy of `logits` against integer `labels` laid out `(n, y, x)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, grad) = cross_entropy_loss(self.value(logits), labels)?;
        let y = Tensor::scalar(loss)?;
        Ok(self.push(y, Op::CrossEntropy { logits, grad }))
    }

    /// Smallest distance of any recorded kinked op from its kink: `|center - tap|`
    /// for differential convolutions and `|x|` for rectifiers.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::DiffConv { x, spec, saved, .. } => {
                    let xs = self.nodes[x.0].value.shape();
                    margin = margin.min(ops::diff_kink_margin(saved, xs, *spec));
                }
                Op::Relu(x) => {
                    let m = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
                    margin = margin.min(m);
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`; fan-out contributions are summed.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).shape() != Shape::scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one())?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contributions: Vec<(NodeId, Tensor<T>)> = Vec::with_capacity(2);
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, spec, xp } => {
                    let xs = self.value(*x).shape();
                    let (dx, dw) = ops::conv2d_backward(xp, xs, self.value(*w), *spec, &g)?;
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                }
                Op::DiffConv { x, w, spec, saved } => {
                    let xs = self.value(*x).shape();
                    let full = self.diff_gradient == DiffGradient::Full;
                    let (dx, dw) = ops::diff_conv2d_backward(saved, xs, self.value(*w), *spec, &g, full)?;
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                }
                Op::Pointwise { x, w } => {
                    let (dx, dw) = ops::pointwise_backward(self.value(*x), self.value(*w), &g)?;
                    contributions.push((*x, dx));
                    contributions.push((*w, dw));
                }
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g));
                }
                Op::Mul(a, b) => {
                    contributions.push((*a, g.mul(self.value(*b))?));
                    contributions.push((*b, g.mul(self.value(*a))?));
                }
                Op::Relu(x) => contributions.push((*x, nn::relu_backward(self.value(*x), &g)?)),
                Op::AvgPool2(x) => {
                    contributions.push((*x, nn::avg_pool2_backward(self.value(*x).shape(), &g)?))
                }
                Op::Upsample(x) => contributions.push((
                    *x,
                    nn::upsample_bilinear_backward(self.value(*x).shape(), &g)?,
                )),
                Op::Sum(x) => {
                    let s = g.item()?;
                    contributions.push((*x, Tensor::filled(self.value(*x).shape(), s)?));
                }
                Op::CrossEntropy { logits, grad } => {
                    contributions.push((*logits, grad.scale(g.item()?)?));
                }
            }
            for (id, c) in contributions {
                let slot = &mut grads[id.0];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&c)?,
                    None => c,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, id: NodeId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| graph.value(id).zeros_like())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn conv_sum_interior_gradient_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(shape(1, 1, 5, 5), |_, _, y, x| (y * 5 + x) as f64 * 0.1).unwrap());
        let w = g.leaf(Tensor::ones(shape(1, 1, 3, 3)).unwrap());
        let y = g.conv2d(x, w, ConvSpec::dense(3).unwrap()).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        let dx = grads.wrt(&g, x);
        assert_eq!(dx.at(0, 0, 2, 2), 9.0);
        assert_eq!(dx.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn(shape(1, 2, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64 - 3.0).unwrap();
        let yv = xv.map(|v| v * 0.5 + 1.25).unwrap();
        let x = g.leaf(xv.clone());
        let y = g.leaf(yv.clone());
        let p = g.mul(x, y).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x), yv);
        assert_eq!(grads.wrt(&g, y), xv);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled(shape(1, 1, 2, 2), 3.0).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(&g, x).data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(shape(1, 1, 2, 2)).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones(shape(1, 1, 2, 2)).unwrap());
        let unused = g.leaf(Tensor::ones(shape(1, 3, 1, 1)).unwrap());
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&g, unused).sum(), 0.0);
    }

    #[test]
    fn constant_input_weight_gradient_matches_vanilla() {
        // At a constant input the multipliers are 1 (interior), so the kernel
        // gradient of a depthwise differential conv matches the vanilla one away
        // from the zero-padded border.
        let spec = ConvSpec::depthwise(3).unwrap();
        let xv = Tensor::<f64>::filled(shape(1, 2, 6, 6), 0.7).unwrap();
        let wv = Tensor::from_fn(shape(2, 1, 3, 3), |o, _, y, x| (o * 9 + y * 3 + x) as f64 * 0.1).unwrap();
        let mut grads = Vec::new();
        for diff in [false, true] {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(xv.clone());
            let w = g.leaf(wv.clone());
            let y = if diff { g.diff_conv2d(x, w, spec) } else { g.conv2d(x, w, spec) }.unwrap();
            let interior = |v: usize| (1..5).contains(&v);
            let r = g.leaf(
                Tensor::from_fn(shape(1, 2, 6, 6), |_, c, y, x| {
                    if interior(y) && interior(x) {
                        ((c + y * x) % 5) as f64 + 1.0
                    } else {
                        0.0
                    }
                })
                .unwrap(),
            );
            let p = g.mul(y, r).unwrap();
            let loss = g.sum(p).unwrap();
            grads.push(g.backward(loss).unwrap().wrt(&g, w));
        }
        assert_eq!(grads[0], grads[1]);
    }
}
