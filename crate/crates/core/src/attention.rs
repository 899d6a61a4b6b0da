//! Differential convolution attention blocks and the two-branch fusion block.
//!
//! * DCA: `attention = pw(dc_dw9(F))`, `output = attention * F`
//! * EDCA: `F1 = dc_dw5(F)`, `F2 = dc_dwd9_d3(F1)`, `attention = pw(F1 + F2)`,
//!   `output = attention * F`
//! * Fusion, per stage:
//!   `depth_out = W2(DCA(W1 depth_in)) + depth_in`,
//!   `rgb_out = W2'(EDCA(W1' rgb_in)) + rgb_in + depth_out`
//!
//! Attention maps are used raw: no squashing nonlinearity, no bias, no
//! normalization layer anywhere in the block.
//!
//! Weight records are generic over the leaf type `W` so the same structure
//! holds stored tensors (`W = Tensor<T>`) and their graph bindings
//! (`W = NodeId`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Shape, Tensor};

/// Default DCA kernel size (9x9, dilation 1).
pub const DCA_KERNEL: usize = 9;
/// EDCA local stage: 5x5, dilation 1.
pub const EDCA_LOCAL_KERNEL: usize = 5;
/// EDCA dilated stage: 9x9, dilation 3.
pub const EDCA_DILATED_KERNEL: usize = 9;
pub const EDCA_DILATION: usize = 3;
/// Channel squeeze ratio of the fusion block.
pub const SQUEEZE_RATIO: usize = 8;
/// Init gain of the channel-recovery conv, so each branch starts near its residual.
pub const RECOVER_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct DcaWeights<W> {
    /// Depthwise differential kernel, `(c, 1, k, k)`.
    pub dw: W,
    /// Pointwise map, `(c, c, 1, 1)`.
    pub pw: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdcaWeights<W> {
    /// Depthwise differential kernel, `(c, 1, 5, 5)`.
    pub dw: W,
    /// Dilated depthwise differential kernel, `(c, 1, 9, 9)` at dilation 3.
    pub dwd: W,
    /// Pointwise map, `(c, c, 1, 1)`.
    pub pw: W,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionWeights<W> {
    Dca(DcaWeights<W>),
    Edca(EdcaWeights<W>),
}

/// One side of the fusion block: squeeze, attend, recover.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights<W> {
    /// `(c / r, c, 1, 1)`.
    pub squeeze: W,
    /// `(c, c / r, 1, 1)`.
    pub recover: W,
    pub attention: AttentionWeights<W>,
}

/// Per-stage fusion weights. A missing branch passes its input through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<W> {
    pub depth: Option<BranchWeights<W>>,
    pub rgb: Option<BranchWeights<W>>,
}

pub type DcaParams<T> = DcaWeights<Tensor<T>>;
pub type EdcaParams<T> = EdcaWeights<Tensor<T>>;
pub type FusionParams<T> = FusionWeights<Tensor<T>>;

impl<W> DcaWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> DcaWeights<U> {
        DcaWeights {
            dw: f(&format!("{prefix}.dw"), &self.dw),
            pw: f(&format!("{prefix}.pw"), &self.pw),
        }
    }
}

impl<W> EdcaWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> EdcaWeights<U> {
        EdcaWeights {
            dw: f(&format!("{prefix}.dw"), &self.dw),
            dwd: f(&format!("{prefix}.dwd"), &self.dwd),
            pw: f(&format!("{prefix}.pw"), &self.pw),
        }
    }
}

impl<W> AttentionWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> AttentionWeights<U> {
        match self {
            AttentionWeights::Dca(p) => AttentionWeights::Dca(p.map(&format!("{prefix}.dca"), f)),
            AttentionWeights::Edca(p) => AttentionWeights::Edca(p.map(&format!("{prefix}.edca"), f)),
        }
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionWeights::Dca(_) => AttentionKind::Dca,
            AttentionWeights::Edca(_) => AttentionKind::Edca,
        }
    }
}

impl<W> BranchWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> BranchWeights<U> {
        BranchWeights {
            squeeze: f(&format!("{prefix}.squeeze"), &self.squeeze),
            recover: f(&format!("{prefix}.recover"), &self.recover),
            attention: self.attention.map(prefix, f),
        }
    }
}

impl<W> FusionWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a W) -> U) -> FusionWeights<U> {
        FusionWeights {
            depth: self.depth.as_ref().map(|b| b.map(&format!("{prefix}.depth"), f)),
            rgb: self.rgb.as_ref().map(|b| b.map(&format!("{prefix}.rgb"), f)),
        }
    }

    /// The variant whose wiring these weights describe, if any.
    pub fn variant(&self) -> Option<Variant> {
        let kinds = (
            self.depth.as_ref().map(|b| b.attention.kind()),
            self.rgb.as_ref().map(|b| b.attention.kind()),
        );
        Variant::ALL.into_iter().find(|v| v.branch_kinds() == kinds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Dca,
    Edca,
}

/// Ablation wiring of the fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// No attention branches; only `rgb_out = rgb_in + depth_in`.
    Baseline,
    /// DCA on depth, RGB passed through.
    DcaOnly,
    /// EDCA on RGB, depth passed through.
    EdcaOnly,
    /// DCA on depth and EDCA on RGB.
    Full,
    /// EDCA on depth and DCA on RGB.
    Swapped,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::DcaOnly,
        Variant::EdcaOnly,
        Variant::Full,
        Variant::Swapped,
    ];

    /// Attention kind on the (depth, rgb) branches.
    pub fn branch_kinds(self) -> (Option<AttentionKind>, Option<AttentionKind>) {
        use AttentionKind::*;
        match self {
            Variant::Baseline => (None, None),
            Variant::DcaOnly => (Some(Dca), None),
            Variant::EdcaOnly => (None, Some(Edca)),
            Variant::Full => (Some(Dca), Some(Edca)),
            Variant::Swapped => (Some(Edca), Some(Dca)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DcaOnly => "dca_only",
            Variant::EdcaOnly => "edca_only",
            Variant::Full => "full",
            Variant::Swapped => "swapped",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`.
pub fn kaiming<T: Scalar, R: Rng>(shape: Shape, rng: &mut R) -> Result<Tensor<T>> {
    kaiming_scaled(shape, 1.0, rng)
}

/// [`kaiming`] with the standard deviation multiplied by `gain`.
pub fn kaiming_scaled<T: Scalar, R: Rng>(shape: Shape, gain: f64, rng: &mut R) -> Result<Tensor<T>> {
    let fan_in = shape.c * shape.h * shape.w;
    let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_vec(shape, (0..shape.len()).map(|_| T::of(normal.sample(rng))).collect())
}

fn check_weight<T: Scalar>(what: &str, t: &Tensor<T>, expected: Shape) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::shape(format!("{what} must be {expected}, got {}", t.shape())));
    }
    Ok(())
}

impl<T: Scalar> DcaParams<T> {
    pub fn init<R: Rng>(channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        ConvSpec::depthwise(kernel)?;
        Ok(DcaWeights {
            dw: kaiming(Shape::new(channels, 1, kernel, kernel)?, rng)?,
            pw: kaiming(Shape::new(channels, channels, 1, 1)?, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw.shape().n
    }

    pub fn kernel(&self) -> usize {
        self.dw.shape().h
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k) = (self.channels(), self.kernel());
        ConvSpec::depthwise(k)?;
        check_weight("DCA depthwise kernel", &self.dw, Shape::new(c, 1, k, k)?)?;
        check_weight("DCA pointwise map", &self.pw, Shape::new(c, c, 1, 1)?)
    }
}

impl<T: Scalar> EdcaParams<T> {
    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        let (k1, k2) = (EDCA_LOCAL_KERNEL, EDCA_DILATED_KERNEL);
        Ok(EdcaWeights {
            dw: kaiming(Shape::new(channels, 1, k1, k1)?, rng)?,
            dwd: kaiming(Shape::new(channels, 1, k2, k2)?, rng)?,
            pw: kaiming(Shape::new(channels, channels, 1, 1)?, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.dw.shape().n
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let (k1, k2) = (EDCA_LOCAL_KERNEL, EDCA_DILATED_KERNEL);
        check_weight("EDCA depthwise kernel", &self.dw, Shape::new(c, 1, k1, k1)?)?;
        check_weight("EDCA dilated kernel", &self.dwd, Shape::new(c, 1, k2, k2)?)?;
        check_weight("EDCA pointwise map", &self.pw, Shape::new(c, c, 1, 1)?)
    }
}

/// Checks `channels` against the squeeze ratio and returns the squeezed width.
pub fn squeezed_width(channels: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || !channels.is_multiple_of(ratio) {
        return Err(Error::config(format!(
            "{channels} channels are not divisible by the squeeze ratio {ratio}"
        )));
    }
    Ok(channels / ratio)
}

impl<T: Scalar> BranchWeights<Tensor<T>> {
    pub fn init<R: Rng>(
        channels: usize,
        ratio: usize,
        kind: AttentionKind,
        dca_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = squeezed_width(channels, ratio)?;
        Ok(BranchWeights {
            squeeze: kaiming(Shape::new(inner, channels, 1, 1)?, rng)?,
            recover: kaiming_scaled(Shape::new(channels, inner, 1, 1)?, RECOVER_INIT_GAIN, rng)?,
            attention: match kind {
                AttentionKind::Dca => AttentionWeights::Dca(DcaParams::init(inner, dca_kernel, rng)?),
                AttentionKind::Edca => AttentionWeights::Edca(EdcaParams::init(inner, rng)?),
            },
        })
    }
}

impl<T: Scalar> FusionParams<T> {
    /// Weights for `variant` at `channels` wide features, squeezed by `ratio`.
    pub fn init<R: Rng>(
        channels: usize,
        variant: Variant,
        ratio: usize,
        dca_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        squeezed_width(channels, ratio)?;
        let (depth_kind, rgb_kind) = variant.branch_kinds();
        let mut branch = |kind: Option<AttentionKind>| {
            kind.map(|k| BranchWeights::init(channels, ratio, k, dca_kernel, rng))
                .transpose()
        };
        let depth = branch(depth_kind)?;
        let rgb = branch(rgb_kind)?;
        Ok(FusionWeights { depth, rgb })
    }

    /// Binds every weight as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> FusionWeights<NodeId> {
        self.map("", &mut |_, t| g.leaf(t.clone()))
    }
}

/// Graph nodes of one attention module.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub attention: NodeId,
    pub output: NodeId,
}

/// Records DCA on `g`.
pub fn dca_graph<T: Scalar>(g: &mut Graph<T>, f: NodeId, p: &DcaWeights<NodeId>) -> Result<AttentionNodes> {
    let k = g.value(p.dw).shape().h;
    let local = g.diff_conv2d(f, p.dw, ConvSpec::depthwise(k)?)?;
    let attention = g.pointwise(local, p.pw)?;
    let output = g.mul(attention, f)?;
    Ok(AttentionNodes { attention, output })
}

/// Records EDCA on `g`. The dilated stage consumes `F1` and the attention
/// sees `F1 + F2`.
pub fn edca_graph<T: Scalar>(g: &mut Graph<T>, f: NodeId, p: &EdcaWeights<NodeId>) -> Result<AttentionNodes> {
    let f1 = g.diff_conv2d(f, p.dw, ConvSpec::depthwise(EDCA_LOCAL_KERNEL)?)?;
    let dilated = ConvSpec::depthwise(EDCA_DILATED_KERNEL)?.dilated(EDCA_DILATION)?;
    let f2 = g.diff_conv2d(f1, p.dwd, dilated)?;
    let sum = g.add(f1, f2)?;
    let attention = g.pointwise(sum, p.pw)?;
    let output = g.mul(attention, f)?;
    Ok(AttentionNodes { attention, output })
}

fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    f: NodeId,
    p: &AttentionWeights<NodeId>,
) -> Result<AttentionNodes> {
    match p {
        AttentionWeights::Dca(p) => dca_graph(g, f, p),
        AttentionWeights::Edca(p) => edca_graph(g, f, p),
    }
}

/// `recover(attend(squeeze(x))) + x`; returns the output and the attention map.
fn branch_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: &BranchWeights<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let squeezed = g.pointwise(x, p.squeeze)?;
    let attn = attention_graph(g, squeezed, &p.attention)?;
    let recovered = g.pointwise(attn.output, p.recover)?;
    let out = g.add(recovered, x)?;
    Ok((out, attn.attention))
}

/// Graph nodes produced by one fusion block.
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub rgb_out: NodeId,
    pub depth_out: NodeId,
    pub depth_attention: Option<NodeId>,
    pub rgb_attention: Option<NodeId>,
}

/// Records the fusion block for whichever branches `p` carries.
pub fn fusion_graph<T: Scalar>(
    g: &mut Graph<T>,
    rgb: NodeId,
    depth: NodeId,
    p: &FusionWeights<NodeId>,
) -> Result<FusionNodes> {
    if g.value(rgb).shape() != g.value(depth).shape() {
        return Err(Error::shape(format!(
            "fusion needs matching rgb {} and depth {}",
            g.value(rgb).shape(),
            g.value(depth).shape()
        )));
    }
    let (depth_out, depth_attention) = match &p.depth {
        Some(b) => {
            let (o, a) = branch_graph(g, depth, b)?;
            (o, Some(a))
        }
        None => (depth, None),
    };
    let (rgb_mid, rgb_attention) = match &p.rgb {
        Some(b) => {
            let (o, a) = branch_graph(g, rgb, b)?;
            (o, Some(a))
        }
        None => (rgb, None),
    };
    let rgb_out = g.add(rgb_mid, depth_out)?;
    Ok(FusionNodes {
        rgb_out,
        depth_out,
        depth_attention,
        rgb_attention,
    })
}

/// [`fusion_graph`] after checking that `p` is wired for `variant`.
pub fn variant_graph<T: Scalar>(
    g: &mut Graph<T>,
    rgb: NodeId,
    depth: NodeId,
    variant: Variant,
    p: &FusionWeights<NodeId>,
) -> Result<FusionNodes> {
    check_variant(variant, p)?;
    fusion_graph(g, rgb, depth, p)
}

pub(crate) fn check_variant<W>(variant: Variant, p: &FusionWeights<W>) -> Result<()> {
    if p.variant() != Some(variant) {
        return Err(Error::config(format!(
            "fusion weights are wired for {}, not {variant}",
            p.variant().map_or("no known variant", Variant::name)
        )));
    }
    Ok(())
}

/// Attention map and attended features of one module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    pub attention: Tensor<T>,
    pub output: Tensor<T>,
}

fn check_input_channels<T: Scalar>(f: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if f.shape().c != channels {
        return Err(Error::shape(format!(
            "{what} weights expect {channels} channels, input is {}",
            f.shape()
        )));
    }
    Ok(())
}

/// `dca_forward`.
pub fn dca_forward<T: Scalar>(f: &Tensor<T>, p: &DcaParams<T>) -> Result<AttentionOutput<T>> {
    p.validate()?;
    check_input_channels(f, p.channels(), "DCA")?;
    let mut g = Graph::new();
    let fid = g.leaf(f.clone());
    let pid = p.map("", &mut |_, t| g.leaf(t.clone()));
    let nodes = dca_graph(&mut g, fid, &pid)?;
    Ok(AttentionOutput {
        attention: g.value(nodes.attention).clone(),
        output: g.value(nodes.output).clone(),
    })
}

/// `edca_forward`.
pub fn edca_forward<T: Scalar>(f: &Tensor<T>, p: &EdcaParams<T>) -> Result<AttentionOutput<T>> {
    p.validate()?;
    check_input_channels(f, p.channels(), "EDCA")?;
    let mut g = Graph::new();
    let fid = g.leaf(f.clone());
    let pid = p.map("", &mut |_, t| g.leaf(t.clone()));
    let nodes = edca_graph(&mut g, fid, &pid)?;
    Ok(AttentionOutput {
        attention: g.value(nodes.attention).clone(),
        output: g.value(nodes.output).clone(),
    })
}

/// `variant_forward`: returns `(rgb_out, depth_out)`.
pub fn variant_forward<T: Scalar>(
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    variant: Variant,
    p: &FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_variant(variant, p)?;
    let mut g = Graph::new();
    let r = g.leaf(rgb.clone());
    let d = g.leaf(depth.clone());
    let pid = p.bind(&mut g);
    let nodes = fusion_graph(&mut g, r, d, &pid)?;
    Ok((g.value(nodes.rgb_out).clone(), g.value(nodes.depth_out).clone()))
}

/// `fusion_forward`: the full block (DCA on depth, EDCA on RGB).
pub fn fusion_forward<T: Scalar>(
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    p: &FusionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    variant_forward(rgb, depth, Variant::Full, p)
}

/// Mean over channels of batch item `n`, row-major `H x W`.
pub fn channel_mean<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Vec<f64>> {
    let s = t.shape();
    if n >= s.n {
        return Err(Error::shape(format!("batch item {n} out of range for {s}")));
    }
    let mut mean = vec![0.0; s.h * s.w];
    for c in 0..s.c {
        for (m, v) in mean.iter_mut().zip(t.plane(n, c)) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= s.c as f64);
    Ok(mean)
}

/// 8-bit binary graymap (P5) of `map`, min-max normalized; a constant map
/// renders as 128 everywhere.
pub fn encode_pgm(map: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if map.len() != height * width || map.is_empty() {
        return Err(Error::shape(format!("{} values for a {height}x{width} image", map.len())));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| r.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_attention() {
        let p = DcaParams::<f64>::init(4, 9, &mut rng()).unwrap();
        let z = Tensor::zeros(Shape::new(1, 4, 10, 10).unwrap()).unwrap();
        let out = dca_forward(&z, &p).unwrap();
        assert!(out.attention.data().iter().all(|&v| v == 0.0));
        assert!(out.output.data().iter().all(|&v| v == 0.0));

        let p = EdcaParams::<f64>::init(4, &mut rng()).unwrap();
        let out = edca_forward(&z, &p).unwrap();
        assert!(out.attention.data().iter().all(|&v| v == 0.0));
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernels_and_identity_map() {
        let c = 3;
        let dw = Tensor::from_fn(Shape::new(c, 1, 9, 9).unwrap(), |_, _, y, x| {
            if y == 4 && x == 4 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let pw = Tensor::from_fn(Shape::new(c, c, 1, 1).unwrap(), |o, i, _, _| if o == i { 1.0 } else { 0.0 })
            .unwrap();
        let p = DcaWeights { dw, pw };
        let f = random(Shape::new(2, c, 6, 7).unwrap(), 3);
        let out = dca_forward(&f, &p).unwrap();
        assert_eq!(out.attention, f);
        assert_eq!(out.output, f.mul(&f).unwrap());
    }

    #[test]
    fn edca_zero_dilated_kernel_reduces_to_local_path() {
        let mut p = EdcaParams::<f64>::init(2, &mut rng()).unwrap();
        p.dwd = p.dwd.zeros_like();
        let f = random(Shape::new(1, 2, 12, 12).unwrap(), 4);
        let out = edca_forward(&f, &p).unwrap();
        let local = crate::ops::diff_conv2d(&f, &p.dw, ConvSpec::depthwise(5).unwrap()).unwrap();
        let expected = crate::ops::pointwise_conv(&local, &p.pw).unwrap();
        assert_eq!(out.attention, expected);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let p = DcaParams::<f64>::init(4, 9, &mut rng()).unwrap();
        let f = random(Shape::new(1, 3, 8, 8).unwrap(), 1);
        assert!(matches!(dca_forward(&f, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_config_errors() {
        assert!(matches!(
            FusionParams::<f64>::init(12, Variant::Full, 8, 9, &mut rng()),
            Err(Error::Config(_))
        ));
        let p = FusionParams::<f64>::init(16, Variant::Full, 8, 9, &mut rng()).unwrap();
        let x = random(Shape::new(1, 16, 4, 4).unwrap(), 2);
        assert!(matches!(
            variant_forward(&x, &x, Variant::Swapped, &p),
            Err(Error::Config(_))
        ));
        let y = random(Shape::new(1, 16, 4, 8).unwrap(), 2);
        assert!(matches!(fusion_forward(&x, &y, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_zero_depth_and_zero_weights() {
        let p = FusionParams::<f64>::init(16, Variant::Full, 8, 9, &mut rng()).unwrap();
        let rgb = random(Shape::new(1, 16, 8, 8).unwrap(), 5);
        let zero = rgb.zeros_like();
        let (rgb_out, depth_out) = fusion_forward(&rgb, &zero, &p).unwrap();
        assert!(depth_out.data().iter().all(|&v| v == 0.0));
        let (rgb_only, _) = variant_forward(
            &rgb,
            &zero,
            Variant::EdcaOnly,
            &FusionWeights {
                depth: None,
                rgb: p.rgb.clone(),
            },
        )
        .unwrap();
        assert_eq!(rgb_out, rgb_only);

        let zeroed = p.map("", &mut |_, t| t.zeros_like());
        let depth = random(Shape::new(1, 16, 8, 8).unwrap(), 6);
        let (rgb_out, depth_out) = fusion_forward(&rgb, &depth, &zeroed).unwrap();
        assert_eq!(depth_out, depth);
        assert_eq!(rgb_out, rgb.add(&depth).unwrap());
    }

    #[test]
    fn baseline_sums_streams() {
        let p = FusionParams::<f64>::init(8, Variant::Baseline, 8, 9, &mut rng()).unwrap();
        assert!(p.depth.is_none() && p.rgb.is_none());
        let rgb = random(Shape::new(1, 8, 4, 4).unwrap(), 7);
        let depth = random(Shape::new(1, 8, 4, 4).unwrap(), 8);
        let (r, d) = variant_forward(&rgb, &depth, Variant::Baseline, &p).unwrap();
        assert_eq!(r, rgb.add(&depth).unwrap());
        assert_eq!(d, depth);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let p = FusionParams::<f32>::init(8, v, 8, 9, &mut rng()).unwrap();
            assert_eq!(p.variant(), Some(v));
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
