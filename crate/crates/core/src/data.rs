//! Synthetic RGB-D scenes where appearance is ambiguous but depth is locally
//! continuous within every labeled region.
//!
//! A scene is painted back to front: a class-0 background at depth 1.0, then
//! rectangles and ellipses. Every object class owns one fronto-parallel depth
//! plane per scene, with class 1 nearest; plane positions shift from scene to
//! scene, so only their ordering is fixed. Colors come from a per-class palette
//! except that designated class pairs `(1,2)`, `(3,4)`, ... share one color
//! distribution with probability `color_confusion`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{read_exact_or_format, Shape, Tensor};

pub const BACKGROUND_CLASS: usize = 0;
pub const BACKGROUND_DEPTH: f64 = 1.0;
/// Per-pixel RGB noise standard deviation.
pub const RGB_NOISE: f64 = 0.05;
/// Depth noise is a normal truncated at this many standard deviations.
pub const DEPTH_NOISE_TRUNCATION: f64 = 2.5;
/// Half-width of the uniform per-shape color jitter.
const COLOR_JITTER: f64 = 0.08;
/// Nearest and farthest admissible object planes.
const NEAREST_PLANE: f64 = 0.05;
const MAX_PLACEMENT_TRIES: usize = 100;
/// Pixels every placed shape must keep visible.
const MIN_VISIBLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a designated class pair shares one color distribution.
    pub color_confusion: f64,
    /// Standard deviation of the depth noise.
    pub depth_noise: f64,
    /// Minimum gap between any two depth planes, background included.
    pub plane_separation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 32,
            width: 32,
            classes: 5,
            min_shapes: 4,
            max_shapes: 7,
            color_confusion: 0.5,
            depth_noise: 0.02,
            plane_separation: 0.15,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(Error::config(format!(
                "scene extents {}x{} must be positive multiples of 8",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("need a background and at least one object class"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.color_confusion) {
            return Err(Error::config("color_confusion must lie in [0, 1]"));
        }
        if !(self.depth_noise >= 0.0) || !(self.plane_separation > 0.0) {
            return Err(Error::config("depth_noise must be >= 0 and plane_separation > 0"));
        }
        if DEPTH_NOISE_TRUNCATION * self.depth_noise >= self.plane_separation / 2.0 {
            return Err(Error::config(format!(
                "depth noise amplitude {} must stay below half the plane separation",
                DEPTH_NOISE_TRUNCATION * self.depth_noise
            )));
        }
        if self.plane_slack() < 0.0 {
            return Err(Error::config(format!(
                "{} object planes do not fit between {NEAREST_PLANE} and the background with separation {}",
                self.classes - 1,
                self.plane_separation
            )));
        }
        Ok(())
    }

    /// Depth range left over once every plane gap is at its minimum.
    fn plane_slack(&self) -> f64 {
        let objects = (self.classes - 1) as f64;
        (BACKGROUND_DEPTH - NEAREST_PLANE) - objects * self.plane_separation
    }
}

/// One synthetic RGB-D scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `(1, 1, H, W)` in `[0, 1]`.
    pub depth: Tensor<f32>,
    /// Row-major `H x W` class labels.
    pub labels: Vec<usize>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.rgb.shape().h
    }

    pub fn width(&self) -> usize {
        self.rgb.shape().w
    }
}

/// Mean color of each class before jitter and noise.
pub fn palette_color(class: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 5] = [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.80, 0.25],
    ];
    if let Some(c) = BASE.get(class) {
        return *c;
    }
    // Extra classes walk the hue circle.
    let hue = (class as f64 * 0.381_966) % 1.0;
    let f = |shift: f64| 0.5 + 0.35 * (std::f64::consts::TAU * (hue + shift)).cos();
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

/// The class whose color distribution `class` draws from when its pair is confused.
fn confusion_partner(class: usize) -> Option<usize> {
    (class >= 1 && class.is_multiple_of(2)).then(|| class - 1)
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rect,
    Ellipse,
}

struct Placed {
    class: usize,
    kind: ShapeKind,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

impl Placed {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.top || x < self.left || y >= self.top + self.h || x >= self.left + self.w {
            return false;
        }
        match self.kind {
            ShapeKind::Rect => true,
            ShapeKind::Ellipse => {
                let (ry, rx) = (self.h as f64 / 2.0, self.w as f64 / 2.0);
                let dy = (y as f64 + 0.5 - self.top as f64 - ry) / ry;
                let dx = (x as f64 + 0.5 - self.left as f64 - rx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Index of the topmost shape at every pixel (`usize::MAX` for background).
fn owner_map(shapes: &[Placed], h: usize, w: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; h * w];
    for (i, s) in shapes.iter().enumerate() {
        for y in s.top..s.top + s.h {
            for x in s.left..s.left + s.w {
                if s.covers(y, x) {
                    owner[y * w + x] = i;
                }
            }
        }
    }
    owner
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = normal.sample(rng);
        if v.abs() <= DEPTH_NOISE_TRUNCATION * std {
            return v;
        }
    }
}

/// Per-scene plane depths for classes `1..classes`, nearest first.
fn sample_planes<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Vec<f64> {
    let objects = cfg.classes - 1;
    // Split the slack over the objects+1 gaps by sorted uniform cuts.
    let mut cuts: Vec<f64> = (0..objects).map(|_| rng.gen::<f64>()).collect();
    cuts.sort_by(f64::total_cmp);
    let slack = cfg.plane_slack();
    (0..objects)
        .map(|i| NEAREST_PLANE + cuts[i] * slack + i as f64 * cfg.plane_separation)
        .collect()
}

/// `generate_scene`: a pure function of `(cfg, seed)`.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let planes = sample_planes(cfg, &mut rng);

    let mut source = (0..cfg.classes).collect::<Vec<_>>();
    for class in 1..cfg.classes {
        if let Some(partner) = confusion_partner(class) {
            if rng.gen_bool(cfg.color_confusion) {
                source[class] = partner;
            }
        }
    }

    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let (min_h, max_h) = ((h / 6).max(2), (h / 2).max(2));
    let (min_w, max_w) = ((w / 6).max(2), (w / 2).max(2));
    let mut shapes: Vec<Placed> = Vec::with_capacity(count);
    for index in 0..count {
        let class = rng.gen_range(1..cfg.classes);
        let kind = *[ShapeKind::Rect, ShapeKind::Ellipse].choose(&mut rng).expect("nonempty");
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let sh = rng.gen_range(min_h..=max_h);
            let sw = rng.gen_range(min_w..=max_w);
            let candidate = Placed {
                class,
                kind,
                top: rng.gen_range(0..=h - sh),
                left: rng.gen_range(0..=w - sw),
                h: sh,
                w: sw,
            };
            shapes.push(candidate);
            let owner = owner_map(&shapes, h, w);
            let visible_ok = (0..shapes.len()).all(|i| owner.iter().filter(|&&o| o == i).count() >= MIN_VISIBLE);
            if visible_ok {
                placed = true;
                break;
            }
            shapes.pop();
        }
        if !placed {
            return Err(Error::Generation(format!(
                "shape {index} could not be placed after {MAX_PLACEMENT_TRIES} tries"
            )));
        }
    }

    // Per-shape colors; the background gets its own jittered color.
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3]| {
        base.map(|c| c + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER))
    };
    let background_color = jitter(&mut rng, palette_color(BACKGROUND_CLASS));
    let shape_colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| jitter(&mut rng, palette_color(source[s.class])))
        .collect();

    let owner = owner_map(&shapes, h, w);
    let rgb_noise = Normal::new(0.0, RGB_NOISE).expect("positive std");
    let mut labels = vec![BACKGROUND_CLASS; h * w];
    let mut rgb = vec![0f32; 3 * h * w];
    let mut depth = vec![0f32; h * w];
    for p in 0..h * w {
        let (class, color, plane) = match owner[p] {
            usize::MAX => (BACKGROUND_CLASS, background_color, BACKGROUND_DEPTH),
            i => (shapes[i].class, shape_colors[i], planes[shapes[i].class - 1]),
        };
        labels[p] = class;
        for (ch, &c) in color.iter().enumerate() {
            rgb[ch * h * w + p] = (c + rgb_noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
        depth[p] = (plane + truncated_normal(&mut rng, cfg.depth_noise)).clamp(0.0, 1.0) as f32;
    }
    Ok(SceneSample {
        rgb: Tensor::from_vec(Shape::new(1, 3, h, w)?, rgb)?,
        depth: Tensor::from_vec(Shape::new(1, 1, h, w)?, depth)?,
        labels,
    })
}

/// `count` scenes seeded `base_seed + index`; independent of thread scheduling.
pub fn generate_dataset(cfg: &GenConfig, count: usize, base_seed: u64) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, base_seed.wrapping_add(i)))
        .collect()
}

const DATASET_MAGIC: &[u8; 4] = b"DCAD";
const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(samples: &[SceneSample]) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(Error::Contract("refusing to write an empty dataset".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let labels = Tensor::<f32>::from_vec(
            Shape::new(1, 1, s.height(), s.width())?,
            s.labels.iter().map(|&l| l as f32).collect(),
        )?;
        for t in [&s.rgb, &s.depth, &labels] {
            t.write_to(&mut buf).expect("writing to a Vec cannot fail");
        }
    }
    Ok(buf)
}

pub fn decode_dataset<R: Read>(input: &mut R) -> Result<Vec<SceneSample>> {
    let mut header = [0u8; 12];
    read_exact_or_format(input, &mut header, "dataset header")?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if count == 0 {
        return Err(Error::Format("dataset holds no samples".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let rgb = Tensor::<f32>::read_from(input)?;
        let depth = Tensor::<f32>::read_from(input)?;
        let labels = Tensor::<f32>::read_from(input)?;
        let (rs, ds, ls) = (rgb.shape(), depth.shape(), labels.shape());
        if rs.n != 1 || rs.c != 3 || ds != rs.with_channels(1) || ls != ds {
            return Err(Error::Format(format!("sample {i} has inconsistent shapes {rs}, {ds}, {ls}")));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("sample {i} has non-integral label {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(SceneSample { rgb, depth, labels });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after the last sample".into()));
    }
    Ok(samples)
}

/// `save_dataset`.
pub fn save_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// `load_dataset`.
pub fn load_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 42).unwrap());
        assert_ne!(generate_scene(&cfg, 42).unwrap(), generate_scene(&cfg, 43).unwrap());
    }

    #[test]
    fn values_and_labels_in_range() {
        let cfg = GenConfig::default();
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert!(s.rgb.data().iter().chain(s.depth.data()).all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.labels.iter().all(|&l| l < cfg.classes));
            assert!(s.labels.iter().any(|&l| l != BACKGROUND_CLASS));
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut GenConfig)| {
            let mut c = GenConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(|c| c.height = 30));
        assert!(bad(|c| c.color_confusion = 1.5));
        assert!(bad(|c| c.depth_noise = 0.05));
        assert!(bad(|c| c.classes = 8));
        assert!(bad(|c| c.min_shapes = 9));
    }

    #[test]
    fn overcrowded_scene_fails_to_place() {
        let cfg = GenConfig {
            height: 8,
            width: 8,
            min_shapes: 40,
            max_shapes: 40,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_errors() {
        assert!(matches!(encode_dataset(&[]), Err(Error::Contract(_))));
        let samples = generate_dataset(&GenConfig::default(), 3, 9).unwrap();
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(&bytes[..4], b"DCAD");
        assert_eq!(decode_dataset(&mut bytes.as_slice()).unwrap(), samples);
        for cut in [5, 12, 100, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&mut &bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
