//! Desk-scale two-branch encoder hosting one fusion block per stage.
//!
//! Each stage runs a 3x3 conv and a rectifier on both streams, halves the
//! resolution by 2x2 mean pooling and fuses the streams. The final RGB stream
//! is bilinearly upsampled to the input size and classified per pixel.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{fusion_graph, kaiming, squeezed_width, FusionNodes, FusionWeights, Variant, DCA_KERNEL, SQUEEZE_RATIO};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Scalar, Shape, Tensor};

pub const RGB_CHANNELS: usize = 3;
pub const DEPTH_CHANNELS: usize = 1;
const ENCODER_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyNetConfig {
    pub stages: usize,
    /// Width of the first stage; doubles every stage.
    pub base_channels: usize,
    pub classes: usize,
    pub variant: Variant,
    pub dca_kernel: usize,
    pub squeeze_ratio: usize,
    pub seed: u64,
}

impl Default for ToyNetConfig {
    fn default() -> Self {
        ToyNetConfig {
            stages: 3,
            base_channels: 16,
            classes: 5,
            variant: Variant::Full,
            dca_kernel: DCA_KERNEL,
            squeeze_ratio: SQUEEZE_RATIO,
            seed: 0,
        }
    }
}

impl ToyNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("at least one stage is required"));
        }
        if self.classes < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        ConvSpec::depthwise(self.dca_kernel)?;
        for c in self.stage_channels() {
            squeezed_width(c, self.squeeze_ratio)?;
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.base_channels << s).collect()
    }

    /// Input extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.stages
    }

    fn to_line(&self) -> String {
        format!(
            "config stages={} base_channels={} classes={} variant={} dca_kernel={} squeeze_ratio={} seed={}",
            self.stages, self.base_channels, self.classes, self.variant, self.dca_kernel, self.squeeze_ratio, self.seed
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix("config ")
            .ok_or_else(|| Error::Format(format!("expected config line, got {line:?}")))?;
        let kv: BTreeMap<&str, &str> = rest.split_whitespace().filter_map(|p| p.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint config lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint config {k} is not a number")))
        };
        Ok(ToyNetConfig {
            stages: num("stages")? as usize,
            base_channels: num("base_channels")? as usize,
            classes: num("classes")? as usize,
            variant: get("variant")?.parse()?,
            dca_kernel: num("dca_kernel")? as usize,
            squeeze_ratio: num("squeeze_ratio")? as usize,
            seed: num("seed")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights<W> {
    /// `(c_s, c_{s-1}, 3, 3)`.
    pub rgb_conv: W,
    /// `(c_s, c_{s-1}, 3, 3)`, with one input channel at the first stage.
    pub depth_conv: W,
    pub fusion: FusionWeights<W>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights<W> {
    pub stages: Vec<StageWeights<W>>,
    /// Pointwise classifier, `(classes, c_last, 1, 1)`.
    pub head: W,
}

pub type ToyNetParams<T> = NetWeights<Tensor<T>>;

impl<W> NetWeights<W> {
    /// Maps every leaf in a fixed order, passing its dotted name.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a W) -> U) -> NetWeights<U> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = format!("stage{i}");
                StageWeights {
                    rgb_conv: f(&format!("{p}.rgb_conv"), &s.rgb_conv),
                    depth_conv: f(&format!("{p}.depth_conv"), &s.depth_conv),
                    fusion: s.fusion.map(&format!("{p}.fusion"), f),
                }
            })
            .collect();
        NetWeights {
            stages,
            head: f("head", &self.head),
        }
    }

    /// Leaves in [`NetWeights::map`] order.
    pub fn leaves(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(&mut |name, w| out.push((name.to_owned(), w)));
        out
    }

    /// Rebuilds the same structure from leaves given in [`NetWeights::map`] order.
    pub fn rebuild<U>(&self, leaves: Vec<U>) -> Result<NetWeights<U>> {
        let expected = self.leaves().len();
        if leaves.len() != expected {
            return Err(Error::shape(format!(
                "{} leaves supplied for a structure of {expected}",
                leaves.len()
            )));
        }
        let mut it = leaves.into_iter();
        Ok(self.map(&mut |_, _| it.next().expect("count checked")))
    }
}

impl<T: Scalar> ToyNetParams<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> NetWeights<NodeId> {
        self.map(&mut |_, t| g.leaf(t.clone()))
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Model configuration plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet<T> {
    pub config: ToyNetConfig,
    pub params: ToyNetParams<T>,
}

/// `model_init`: seeded fan-in scaled normal weights.
///
/// Encoder convolutions and the head come from one random stream and the
/// fusion blocks from another, so variants built from the same seed share
/// their encoder initialization.
pub fn model_init<T: Scalar>(config: &ToyNetConfig) -> Result<ToyNet<T>> {
    config.validate()?;
    let mut enc_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut fusion_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let widths = config.stage_channels();
    let mut stages = Vec::with_capacity(config.stages);
    let (mut rgb_in, mut depth_in) = (RGB_CHANNELS, DEPTH_CHANNELS);
    for &c in &widths {
        let k = ENCODER_KERNEL;
        stages.push(StageWeights {
            rgb_conv: kaiming(Shape::new(c, rgb_in, k, k)?, &mut enc_rng)?,
            depth_conv: kaiming(Shape::new(c, depth_in, k, k)?, &mut enc_rng)?,
            fusion: FusionWeights::init(c, config.variant, config.squeeze_ratio, config.dca_kernel, &mut fusion_rng)?,
        });
        rgb_in = c;
        depth_in = c;
    }
    let last = *widths.last().expect("stages >= 1");
    let head = kaiming(Shape::new(config.classes, last, 1, 1)?, &mut enc_rng)?;
    Ok(ToyNet {
        config: config.clone(),
        params: NetWeights { stages, head },
    })
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct NetForward {
    pub logits: NodeId,
    pub stages: Vec<FusionNodes>,
}

/// Records the network on `g`; `rgb` is `(n, 3, H, W)` and `depth` `(n, 1, H, W)`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    rgb: NodeId,
    depth: NodeId,
    w: &NetWeights<NodeId>,
    config: &ToyNetConfig,
) -> Result<NetForward> {
    let (rs, ds) = (g.value(rgb).shape(), g.value(depth).shape());
    if rs.c != RGB_CHANNELS || ds.c != DEPTH_CHANNELS || (rs.n, rs.h, rs.w) != (ds.n, ds.h, ds.w) {
        return Err(Error::shape(format!("expected rgb (n,3,H,W) and depth (n,1,H,W), got {rs} and {ds}")));
    }
    let m = config.spatial_multiple();
    if rs.h % m != 0 || rs.w % m != 0 {
        return Err(Error::shape(format!(
            "input {}x{} is not divisible by {m} for {} stages",
            rs.h, rs.w, config.stages
        )));
    }
    if w.stages.len() != config.stages {
        return Err(Error::config("weights and config disagree on the stage count"));
    }
    let conv = ConvSpec::dense(ENCODER_KERNEL)?;
    let (mut r, mut d) = (rgb, depth);
    let mut stages = Vec::with_capacity(config.stages);
    for sw in &w.stages {
        let rc = g.conv2d(r, sw.rgb_conv, conv)?;
        let rc = g.relu(rc)?;
        r = g.avg_pool2(rc)?;
        let dc = g.conv2d(d, sw.depth_conv, conv)?;
        let dc = g.relu(dc)?;
        d = g.avg_pool2(dc)?;
        crate::attention::check_variant(config.variant, &sw.fusion)?;
        let fused = fusion_graph(g, r, d, &sw.fusion)?;
        r = fused.rgb_out;
        d = fused.depth_out;
        stages.push(fused);
    }
    let up = g.upsample_bilinear(r, rs.h, rs.w)?;
    let logits = g.pointwise(up, w.head)?;
    Ok(NetForward { logits, stages })
}

/// `model_forward`: logits `(n, classes, H, W)`.
pub fn model_forward<T: Scalar>(
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    params: &ToyNetParams<T>,
    config: &ToyNetConfig,
    variant: Variant,
) -> Result<Tensor<T>> {
    if variant != config.variant {
        return Err(Error::config(format!(
            "model configured for {} asked to run {variant}",
            config.variant
        )));
    }
    let mut g = Graph::new();
    let r = g.leaf(rgb.clone());
    let d = g.leaf(depth.clone());
    let w = params.bind(&mut g);
    let out = forward_graph(&mut g, r, d, &w, config)?;
    Ok(g.value(out.logits).clone())
}

impl<T: Scalar> ToyNet<T> {
    pub fn forward(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Tensor<T>> {
        model_forward(rgb, depth, &self.params, &self.config, self.config.variant)
    }
}

const CHECKPOINT_MAGIC: &str = "DCACKPT 1";

/// Writes a checkpoint: a text manifest (`tensor name n c h w offset bytes`
/// lines, offsets into the payload), an `end` line, then the concatenated
/// tensor records.
pub fn save_checkpoint<T: Scalar>(net: &ToyNet<T>, path: &Path) -> Result<()> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n{}\n", net.config.to_line());
    let mut payload = Vec::new();
    for (name, t) in net.params.leaves() {
        let s = t.shape();
        let bytes = t.to_bytes();
        header.push_str(&format!(
            "tensor {name} {} {} {} {} {} {}\n",
            s.n,
            s.c,
            s.h,
            s.w,
            payload.len(),
            bytes.len()
        ));
        payload.extend_from_slice(&bytes);
    }
    header.push_str("end\n");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(header.as_bytes())
        .and_then(|_| out.write_all(&payload))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ToyNet<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |input: &mut BufReader<File>| -> Result<String> {
        line.clear();
        let n = input
            .read_line(&mut line)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if n == 0 {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        Ok(line.trim_end().to_owned())
    };
    if next_line(&mut input)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let config = ToyNetConfig::from_line(&next_line(&mut input)?)?;
    let mut entries = Vec::new();
    loop {
        let l = next_line(&mut input)?;
        if l == "end" {
            break;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.len() != 8 || parts[0] != "tensor" {
            return Err(Error::Format(format!("bad manifest line {l:?}")));
        }
        let nums: Vec<usize> = parts[2..]
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Format(format!("bad number in {l:?}"))))
            .collect::<Result<_>>()?;
        entries.push((parts[1].to_owned(), nums));
    }
    let mut payload = Vec::new();
    input
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;

    let skeleton = model_init::<T>(&config)?;
    let names = skeleton.params.leaves();
    if names.len() != entries.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config needs {}",
            entries.len(),
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for ((name, nums), (expected, like)) in entries.iter().zip(&names) {
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let (offset, len) = (nums[4], nums[5]);
        let record = payload
            .get(offset..offset + len)
            .ok_or_else(|| Error::Format(format!("tensor {name} lies outside the payload")))?;
        let t = Tensor::<T>::read_from(&mut &record[..])?;
        if t.shape() != like.shape() || [t.shape().n, t.shape().c, t.shape().h, t.shape().w] != nums[..4] {
            return Err(Error::Format(format!("tensor {name} has shape {}", t.shape())));
        }
        tensors.push(t);
    }
    let params = skeleton.params.rebuild(tensors)?;
    Ok(ToyNet { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyNetConfig {
        ToyNetConfig {
            stages: 2,
            base_channels: 8,
            classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_doubles_width() {
        let cfg = ToyNetConfig::default();
        assert_eq!(cfg.stage_channels(), vec![16, 32, 64]);
        let a = model_init::<f32>(&cfg).unwrap();
        let b = model_init::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let other = model_init::<f32>(&ToyNetConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params.head, other.params.head);
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let cfg = ToyNetConfig {
            base_channels: 12,
            ..Default::default()
        };
        assert!(matches!(model_init::<f32>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn variants_share_encoder_init() {
        let full = model_init::<f32>(&ToyNetConfig::default()).unwrap();
        let base = model_init::<f32>(&ToyNetConfig {
            variant: Variant::Baseline,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(full.params.head, base.params.head);
        assert_eq!(full.params.stages[2].rgb_conv, base.params.stages[2].rgb_conv);
        assert!(base.params.stages.iter().all(|s| s.fusion.depth.is_none()));
    }

    #[test]
    fn forward_shapes_and_zero_input() {
        let net = model_init::<f32>(&ToyNetConfig::default()).unwrap();
        let rgb = Tensor::zeros(Shape::new(2, 3, 32, 32).unwrap()).unwrap();
        let depth = Tensor::zeros(Shape::new(2, 1, 32, 32).unwrap()).unwrap();
        let logits = net.forward(&rgb, &depth).unwrap();
        assert_eq!(logits.shape(), Shape::new(2, 5, 32, 32).unwrap());
        assert!(logits.data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let (r, d) = (g.leaf(rgb.clone()), g.leaf(depth.clone()));
        let w = net.params.bind(&mut g);
        let out = forward_graph(&mut g, r, d, &w, &net.config).unwrap();
        let sizes: Vec<usize> = out.stages.iter().map(|s| g.value(s.rgb_out).shape().h).collect();
        assert_eq!(sizes, vec![16, 8, 4]);

        let bad = Tensor::zeros(Shape::new(1, 3, 20, 20).unwrap()).unwrap();
        let bad_d = Tensor::zeros(Shape::new(1, 1, 20, 20).unwrap()).unwrap();
        assert!(matches!(net.forward(&bad, &bad_d), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_mismatch_is_config_error() {
        let net = model_init::<f64>(&small()).unwrap();
        let rgb = Tensor::zeros(Shape::new(1, 3, 8, 8).unwrap()).unwrap();
        let depth = Tensor::zeros(Shape::new(1, 1, 8, 8).unwrap()).unwrap();
        assert!(matches!(
            model_forward(&rgb, &depth, &net.params, &net.config, Variant::Baseline),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = model_init::<f32>(&ToyNetConfig {
            variant: Variant::Swapped,
            ..small()
        })
        .unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, net);
        assert!(load_checkpoint::<f64>(&path).is_err());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
    }
}
