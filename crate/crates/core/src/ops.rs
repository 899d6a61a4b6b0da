//! Vanilla, differential, depthwise, dilated and pointwise convolutions.
//!
//! All convolutions here run at stride 1 with "same" zero padding of
//! `d * (k - 1) / 2`, so output spatial extents equal input extents. Nothing
//! carries a bias.
//!
//! A differential convolution reweights every kernel tap by the similarity of
//! the tapped pixel to the window center:
//!
//! ```text
//! K*_i(p) = K_i * exp(-|X(p) - X(p + p_i)|)
//! Y(p)    = sum_i K*_i(p) * X(p + p_i)
//! ```
//!
//! Differences are taken on the zero-padded input, and always within the
//! channel being tapped.

use crate::error::{Error, Result};
use crate::parallel::for_each_chunk;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Grouping {
    /// Every output channel mixes all input channels.
    Dense,
    /// One filter per channel, no cross-channel mixing.
    Depthwise,
}

/// Kernel size, dilation and grouping of a stride-1 "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    kernel: usize,
    dilation: usize,
    grouping: Grouping,
}

impl ConvSpec {
    pub fn new(kernel: usize, dilation: usize, grouping: Grouping) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size must be odd and >= 1, got {kernel}")));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be >= 1"));
        }
        Ok(ConvSpec {
            kernel,
            dilation,
            grouping,
        })
    }

    pub fn dense(kernel: usize) -> Result<Self> {
        Self::new(kernel, 1, Grouping::Dense)
    }

    pub fn depthwise(kernel: usize) -> Result<Self> {
        Self::new(kernel, 1, Grouping::Depthwise)
    }

    pub fn dilated(self, dilation: usize) -> Result<Self> {
        Self::new(self.kernel, dilation, self.grouping)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Zero padding applied per side.
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Number of input pixels one kernel spans along an axis.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Validates a kernel tensor against this spec and an input shape; returns
    /// the output channel count.
    pub fn check(&self, x: Shape, w: Shape) -> Result<usize> {
        if w.h != self.kernel || w.w != self.kernel {
            return Err(Error::shape(format!(
                "kernel {w} is not {k}x{k}",
                k = self.kernel
            )));
        }
        match self.grouping {
            Grouping::Dense => {
                if w.c != x.c {
                    return Err(Error::shape(format!(
                        "dense kernel {w} expects {} input channels, input is {x}",
                        w.c
                    )));
                }
                Ok(w.n)
            }
            Grouping::Depthwise => {
                if w.c != 1 || w.n != x.c {
                    return Err(Error::shape(format!(
                        "depthwise kernel must be ({},1,k,k) for input {x}, got {w}",
                        x.c
                    )));
                }
                Ok(x.c)
            }
        }
    }

    /// Input channel tapped by output channel `o` through kernel slot `ci`.
    #[inline]
    fn source_channel(&self, o: usize, ci: usize) -> usize {
        match self.grouping {
            Grouping::Dense => ci,
            Grouping::Depthwise => o,
        }
    }

    /// Offset of tap `t` inside a padded plane of row width `wp`.
    #[inline]
    fn tap_offset(&self, t: usize, wp: usize) -> usize {
        let (ki, kj) = (t / self.kernel, t % self.kernel);
        ki * self.dilation * wp + kj * self.dilation
    }
}

/// Values a differential convolution keeps from its forward pass.
#[derive(Clone, Debug)]
pub(crate) struct DiffSaved<T> {
    /// Zero-padded input.
    pub xp: Tensor<T>,
    /// `exp(-|center - tap|)` laid out as `(n, c, tap, h, w)`.
    pub mult: Vec<T>,
}

/// `conv2d`: vanilla convolution.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    conv2d_saved(x, w, spec).map(|(y, _)| y)
}

pub(crate) fn conv2d_saved<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c_out = spec.check(x.shape(), w.shape())?;
    let xs = x.shape();
    let xp = x.pad_zero(spec.pad())?;
    let (hp, wp) = (xp.shape().h, xp.shape().w);
    let (h, wd) = (xs.h, xs.w);
    let cin_g = w.shape().c;
    let taps = spec.taps();
    let xpd = xp.data();
    let wdta = w.data();

    let out_shape = xs.with_channels(c_out);
    let mut out = vec![T::zero(); out_shape.len()];
    for_each_chunk(&mut out, h * wd, |idx, plane| {
        let (n, o) = (idx / c_out, idx % c_out);
        for ci in 0..cin_g {
            let c = spec.source_channel(o, ci);
            let src = &xpd[(n * xs.c + c) * hp * wp..][..hp * wp];
            let wk = &wdta[(o * cin_g + ci) * taps..][..taps];
            for (t, &wv) in wk.iter().enumerate() {
                let off = spec.tap_offset(t, wp);
                for y in 0..h {
                    let s = &src[off + y * wp..][..wd];
                    let d = &mut plane[y * wd..(y + 1) * wd];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv = *dv + wv * sv;
                    }
                }
            }
        }
    });
    Ok((Tensor::from_vec(out_shape, out)?, xp))
}

/// `diff_kernel_at`: effective differential kernel for one `k x k` window
/// whose center is the window's middle element.
pub fn diff_kernel_at<T: Scalar>(patch: &[T], kernel: &[T]) -> Result<Vec<T>> {
    let k = (patch.len() as f64).sqrt() as usize;
    if k * k != patch.len() || k.is_multiple_of(2) || kernel.len() != patch.len() {
        return Err(Error::shape(format!(
            "diff_kernel_at needs matching odd k x k window and kernel, got {} and {}",
            patch.len(),
            kernel.len()
        )));
    }
    let center = patch[patch.len() / 2];
    Ok(patch
        .iter()
        .zip(kernel)
        .map(|(&v, &kv)| kv * (-(center - v).abs()).exp())
        .collect())
}

/// `diff_conv2d`: convolution with the input-dependent differential kernel.
pub fn diff_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    diff_conv2d_saved(x, w, spec).map(|(y, _)| y)
}

/// `diff_conv2d_depthwise`: [`diff_conv2d`] restricted to depthwise grouping.
pub fn diff_conv2d_depthwise<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    if spec.grouping() != Grouping::Depthwise {
        return Err(Error::shape("diff_conv2d_depthwise called with a dense spec"));
    }
    diff_conv2d(x, w, spec)
}

pub(crate) fn diff_conv2d_saved<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, DiffSaved<T>)> {
    let c_out = spec.check(x.shape(), w.shape())?;
    let xs = x.shape();
    let pad = spec.pad();
    let xp = x.pad_zero(pad)?;
    let (hp, wp) = (xp.shape().h, xp.shape().w);
    let (h, wd) = (xs.h, xs.w);
    let plane = h * wd;
    let taps = spec.taps();
    let xpd = xp.data();

    // Multipliers and weighted taps per (n, c, tap) plane.
    let mut mult = vec![T::zero(); xs.n * xs.c * taps * plane];
    let mut tapped = vec![T::zero(); mult.len()];
    for_each_chunk(&mut mult, taps * plane, |nc, m| {
        let src = &xpd[nc * hp * wp..][..hp * wp];
        for t in 0..taps {
            let off = spec.tap_offset(t, wp);
            let mt = &mut m[t * plane..(t + 1) * plane];
            for y in 0..h {
                let centers = &src[(y + pad) * wp + pad..][..wd];
                let neighbors = &src[off + y * wp..][..wd];
                for ((mv, &z), &a) in mt[y * wd..(y + 1) * wd].iter_mut().zip(centers).zip(neighbors) {
                    *mv = (-(z - a).abs()).exp();
                }
            }
        }
    });
    for_each_chunk(&mut tapped, taps * plane, |nc, p| {
        let src = &xpd[nc * hp * wp..][..hp * wp];
        let m = &mult[nc * taps * plane..][..taps * plane];
        for t in 0..taps {
            let off = spec.tap_offset(t, wp);
            for y in 0..h {
                let neighbors = &src[off + y * wp..][..wd];
                let row = t * plane + y * wd;
                for ((pv, &mv), &a) in p[row..row + wd].iter_mut().zip(&m[row..row + wd]).zip(neighbors) {
                    *pv = mv * a;
                }
            }
        }
    });

    let cin_g = w.shape().c;
    let wdta = w.data();
    let out_shape = xs.with_channels(c_out);
    let mut out = vec![T::zero(); out_shape.len()];
    for_each_chunk(&mut out, plane, |idx, o_plane| {
        let (n, o) = (idx / c_out, idx % c_out);
        for ci in 0..cin_g {
            let c = spec.source_channel(o, ci);
            let src = &tapped[(n * xs.c + c) * taps * plane..][..taps * plane];
            let wk = &wdta[(o * cin_g + ci) * taps..][..taps];
            for (t, &wv) in wk.iter().enumerate() {
                for (dv, &sv) in o_plane.iter_mut().zip(&src[t * plane..(t + 1) * plane]) {
                    *dv = *dv + wv * sv;
                }
            }
        }
    });
    Ok((Tensor::from_vec(out_shape, out)?, DiffSaved { xp, mult }))
}

/// `pointwise_conv`: per-pixel linear map across channels. `w` has shape
/// `(c_out, c_in, 1, 1)`.
pub fn pointwise_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(Error::shape(format!(
            "pointwise weights must be ({{c_out}},{},1,1), got {ws}",
            xs.c
        )));
    }
    let c_out = ws.n;
    let plane = xs.plane();
    let xd = x.data();
    let wd = w.data();
    let out_shape = xs.with_channels(c_out);
    let mut out = vec![T::zero(); out_shape.len()];
    for_each_chunk(&mut out, plane, |idx, o_plane| {
        let (n, o) = (idx / c_out, idx % c_out);
        for c in 0..xs.c {
            let wv = wd[o * xs.c + c];
            let src = &xd[(n * xs.c + c) * plane..][..plane];
            for (dv, &sv) in o_plane.iter_mut().zip(src) {
                *dv = *dv + wv * sv;
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    xp: &Tensor<T>,
    x_shape: Shape,
    w: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (hp, wp) = (xp.shape().h, xp.shape().w);
    let (h, wd) = (x_shape.h, x_shape.w);
    let plane = h * wd;
    let ws = w.shape();
    let (c_out, cin_g, taps) = (ws.n, ws.c, spec.taps());
    let g = grad_out.data();
    let xpd = xp.data();
    let wdta = w.data();

    let mut dw = vec![T::zero(); ws.len()];
    for_each_chunk(&mut dw, cin_g * taps, |o, dwo| {
        for n in 0..x_shape.n {
            let go = &g[(n * c_out + o) * plane..][..plane];
            for ci in 0..cin_g {
                let c = spec.source_channel(o, ci);
                let src = &xpd[(n * x_shape.c + c) * hp * wp..][..hp * wp];
                for t in 0..taps {
                    let off = spec.tap_offset(t, wp);
                    let mut acc = T::zero();
                    for y in 0..h {
                        let s = &src[off + y * wp..][..wd];
                        for (&gv, &sv) in go[y * wd..(y + 1) * wd].iter().zip(s) {
                            acc = acc + gv * sv;
                        }
                    }
                    dwo[ci * taps + t] = dwo[ci * taps + t] + acc;
                }
            }
        }
    });

    let mut dxp = vec![T::zero(); xp.len()];
    for_each_chunk(&mut dxp, hp * wp, |nc, dst| {
        let (n, c) = (nc / x_shape.c, nc % x_shape.c);
        let mut scatter = |o: usize, ci: usize| {
            let go = &g[(n * c_out + o) * plane..][..plane];
            for t in 0..taps {
                let wv = wdta[(o * cin_g + ci) * taps + t];
                let off = spec.tap_offset(t, wp);
                for y in 0..h {
                    let d = &mut dst[off + y * wp..][..wd];
                    for (dv, &gv) in d.iter_mut().zip(&go[y * wd..(y + 1) * wd]) {
                        *dv = *dv + wv * gv;
                    }
                }
            }
        };
        match spec.grouping() {
            Grouping::Dense => (0..c_out).for_each(|o| scatter(o, c)),
            Grouping::Depthwise => scatter(c, 0),
        }
    });
    let dx = Tensor::from_vec(xp.shape(), dxp)?.crop(spec.pad())?;
    Ok((dx, Tensor::from_vec(ws, dw)?))
}

/// Gradients of [`diff_conv2d`]. With `through_difference` the chain through
/// `exp(-|center - tap|)` is included (with `sign(0) = 0`); otherwise the
/// multipliers are treated as constants.
pub(crate) fn diff_conv2d_backward<T: Scalar>(
    saved: &DiffSaved<T>,
    x_shape: Shape,
    w: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
    through_difference: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xp = &saved.xp;
    let mult = &saved.mult;
    let (hp, wp) = (xp.shape().h, xp.shape().w);
    let (h, wd) = (x_shape.h, x_shape.w);
    let pad = spec.pad();
    let plane = h * wd;
    let ws = w.shape();
    let (c_out, cin_g, taps) = (ws.n, ws.c, spec.taps());
    let g = grad_out.data();
    let xpd = xp.data();
    let wdta = w.data();

    let mut dw = vec![T::zero(); ws.len()];
    for_each_chunk(&mut dw, cin_g * taps, |o, dwo| {
        for n in 0..x_shape.n {
            let go = &g[(n * c_out + o) * plane..][..plane];
            for ci in 0..cin_g {
                let c = spec.source_channel(o, ci);
                let nc = n * x_shape.c + c;
                let src = &xpd[nc * hp * wp..][..hp * wp];
                let m = &mult[nc * taps * plane..][..taps * plane];
                for t in 0..taps {
                    let off = spec.tap_offset(t, wp);
                    let mut acc = T::zero();
                    for y in 0..h {
                        let s = &src[off + y * wp..][..wd];
                        let mr = &m[t * plane + y * wd..][..wd];
                        for ((&gv, &sv), &mv) in go[y * wd..(y + 1) * wd].iter().zip(s).zip(mr) {
                            acc = acc + gv * mv * sv;
                        }
                    }
                    dwo[ci * taps + t] = dwo[ci * taps + t] + acc;
                }
            }
        }
    });

    let mut dxp = vec![T::zero(); xp.len()];
    for_each_chunk(&mut dxp, hp * wp, |nc, dst| {
        let (n, c) = (nc / x_shape.c, nc % x_shape.c);
        let src = &xpd[nc * hp * wp..][..hp * wp];
        let m = &mult[nc * taps * plane..][..taps * plane];
        let mut a_plane = vec![T::zero(); plane];
        for t in 0..taps {
            // Upstream gradient reaching this tap, summed over output channels.
            a_plane.iter_mut().for_each(|v| *v = T::zero());
            let mut gather = |o: usize, ci: usize| {
                let wv = wdta[(o * cin_g + ci) * taps + t];
                let go = &g[(n * c_out + o) * plane..][..plane];
                for (av, &gv) in a_plane.iter_mut().zip(go) {
                    *av = *av + wv * gv;
                }
            };
            match spec.grouping() {
                Grouping::Dense => (0..c_out).for_each(|o| gather(o, c)),
                Grouping::Depthwise => gather(c, 0),
            }
            let off = spec.tap_offset(t, wp);
            for y in 0..h {
                for x in 0..wd {
                    let av = a_plane[y * wd + x];
                    let mv = m[t * plane + y * wd + x];
                    let tap_pos = off + y * wp + x;
                    let center_pos = (y + pad) * wp + x + pad;
                    if !through_difference {
                        dst[tap_pos] = dst[tap_pos] + av * mv;
                        continue;
                    }
                    let a = src[tap_pos];
                    let z = src[center_pos];
                    let s = sign(z - a);
                    dst[tap_pos] = dst[tap_pos] + av * mv * (T::one() + a * s);
                    dst[center_pos] = dst[center_pos] - av * mv * a * s;
                }
            }
        }
    });
    let dx = Tensor::from_vec(xp.shape(), dxp)?.crop(pad)?;
    Ok((dx, Tensor::from_vec(ws, dw)?))
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Smallest `|center - tap|` over all non-center taps of a saved differential
/// convolution; distance of the forward pass from the `|.|` kink.
pub(crate) fn diff_kink_margin<T: Scalar>(saved: &DiffSaved<T>, x_shape: Shape, spec: ConvSpec) -> f64 {
    let xp = saved.xp.data();
    let (hp, wp) = (saved.xp.shape().h, saved.xp.shape().w);
    let pad = spec.pad();
    let center_tap = spec.taps() / 2;
    let mut margin = f64::INFINITY;
    for nc in 0..x_shape.n * x_shape.c {
        let src = &xp[nc * hp * wp..][..hp * wp];
        for t in (0..spec.taps()).filter(|&t| t != center_tap) {
            let off = spec.tap_offset(t, wp);
            for y in 0..x_shape.h {
                for x in 0..x_shape.w {
                    let d = (src[(y + pad) * wp + x + pad] - src[off + y * wp + x]).abs();
                    margin = margin.min(d.as_f64());
                }
            }
        }
    }
    margin
}

/// Gradients of [`pointwise_conv`].
pub(crate) fn pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let c_out = w.shape().n;
    let plane = xs.plane();
    let (xd, wd, g) = (x.data(), w.data(), grad_out.data());

    let mut dw = vec![T::zero(); w.len()];
    for_each_chunk(&mut dw, xs.c, |o, row| {
        for n in 0..xs.n {
            let go = &g[(n * c_out + o) * plane..][..plane];
            for (c, dv) in row.iter_mut().enumerate() {
                let src = &xd[(n * xs.c + c) * plane..][..plane];
                let acc = go.iter().zip(src).fold(T::zero(), |a, (&gv, &sv)| a + gv * sv);
                *dv = *dv + acc;
            }
        }
    });

    let mut dx = vec![T::zero(); x.len()];
    for_each_chunk(&mut dx, plane, |nc, dst| {
        let (n, c) = (nc / xs.c, nc % xs.c);
        for o in 0..c_out {
            let wv = wd[o * xs.c + c];
            let go = &g[(n * c_out + o) * plane..][..plane];
            for (dv, &gv) in dst.iter_mut().zip(go) {
                *dv = *dv + wv * gv;
            }
        }
    });
    Ok((Tensor::from_vec(xs, dx)?, Tensor::from_vec(w.shape(), dw)?))
}

/// Inclusive bounding box of input pixels, in `(row, col)` coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Footprint {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    /// Side length a chain of unclipped convolutions reaches: `1 + sum d_j (k_j - 1)`.
    pub fn expected_side(chain: &[ConvSpec]) -> usize {
        1 + chain.iter().map(|s| s.dilation() * (s.kernel() - 1)).sum::<usize>()
    }
}

/// `receptive_footprint`: bounding box of the input pixels able to influence
/// `out_pixel` through `chain`, found by propagating an indicator backwards
/// with all-ones kernels.
pub fn receptive_footprint(
    chain: &[ConvSpec],
    out_pixel: (usize, usize),
    in_hw: (usize, usize),
) -> Result<Footprint> {
    if chain.is_empty() {
        return Err(Error::config("receptive_footprint needs a nonempty chain"));
    }
    let (h, w) = in_hw;
    if out_pixel.0 >= h || out_pixel.1 >= w {
        return Err(Error::shape(format!("pixel {out_pixel:?} outside {h}x{w}")));
    }
    let shape = Shape::new(1, 1, h, w)?;
    let mut mask = Tensor::<f64>::from_fn(shape, |_, _, y, x| {
        if (y, x) == out_pixel {
            1.0
        } else {
            0.0
        }
    })?;
    for spec in chain.iter().rev() {
        let single = ConvSpec::new(spec.kernel(), spec.dilation(), Grouping::Dense)?;
        let ones = Tensor::ones(Shape::new(1, 1, spec.kernel(), spec.kernel())?)?;
        // All-ones kernels are symmetric, so correlation equals the transposed map.
        mask = conv2d(&mask, &ones, single)?.map(|v| if v != 0.0 { 1.0 } else { 0.0 })?;
    }
    let mut fp: Option<Footprint> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.at(0, 0, y, x) == 0.0 {
                continue;
            }
            let b = fp.get_or_insert(Footprint {
                top: y,
                left: x,
                bottom: y,
                right: x,
            });
            b.top = b.top.min(y);
            b.left = b.left.min(x);
            b.bottom = b.bottom.max(y);
            b.right = b.right.max(x);
        }
    }
    fp.ok_or_else(|| Error::Contract("empty footprint".into()))
}
