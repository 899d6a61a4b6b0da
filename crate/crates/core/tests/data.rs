use std::collections::VecDeque;

use dcattn::data::{
    generate_dataset, generate_scene, load_dataset, palette_color, save_dataset, GenConfig, SceneSample,
};
use dcattn::Error;

fn depth(s: &SceneSample, i: usize, j: usize) -> f64 {
    s.depth.at(0, 0, i, j) as f64
}

fn label(s: &SceneSample, i: usize, j: usize) -> usize {
    s.labels[i * s.width() + j]
}

#[test]
fn regeneration_is_deterministic() {
    let cfg = GenConfig::default();
    let a = generate_dataset(&cfg, 12, 5).unwrap();
    let b = generate_dataset(&cfg, 12, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[3], generate_scene(&cfg, 8).unwrap());
}

#[test]
fn three_by_three_depth_spread_is_small() {
    let cfg = GenConfig::default();
    let mut worst: f64 = 0.0;
    for s in generate_dataset(&cfg, 1000, 0).unwrap() {
        for i in 1..s.height() - 1 {
            for j in 1..s.width() - 1 {
                let l = label(&s, i, j);
                let window = (i - 1..=i + 1).flat_map(|y| (j - 1..=j + 1).map(move |x| (y, x)));
                if window.clone().all(|(y, x)| label(&s, y, x) == l) {
                    let v: Vec<f64> = window.map(|(y, x)| depth(&s, y, x)).collect();
                    let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
                    worst = worst.max(spread);
                }
            }
        }
    }
    assert!(worst < 0.12, "max spread {worst}");
}

#[test]
fn adjacent_same_label_pixels_share_a_plane() {
    let cfg = GenConfig::default();
    let (mut close, mut total) = (0u64, 0u64);
    for s in generate_dataset(&cfg, 200, 1).unwrap() {
        for i in 0..s.height() {
            for j in 0..s.width() {
                for (y, x) in [(i + 1, j), (i, j + 1)] {
                    if y < s.height() && x < s.width() && label(&s, i, j) == label(&s, y, x) {
                        total += 1;
                        close += ((depth(&s, i, j) - depth(&s, y, x)).abs() < cfg.plane_separation / 2.0) as u64;
                    }
                }
            }
        }
    }
    assert!(close as f64 / total as f64 >= 0.99, "{close}/{total}");
}

#[test]
fn every_labeled_component_lies_on_one_plane() {
    let cfg = GenConfig::default();
    let amplitude = 2.0 * 2.5 * cfg.depth_noise + 1e-6;
    for s in generate_dataset(&cfg, 100, 2).unwrap() {
        let (h, w) = (s.height(), s.width());
        let mut seen = vec![false; h * w];
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let l = s.labels[start];
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(p) = queue.pop_front() {
                let d = depth(&s, p / w, p % w);
                lo = lo.min(d);
                hi = hi.max(d);
                let (i, j) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if !seen[q] && s.labels[q] == l {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                };
                if i > 0 { visit(p - w) }
                if i + 1 < h { visit(p + w) }
                if j > 0 { visit(p - 1) }
                if j + 1 < w { visit(p + 1) }
            }
            assert!(hi - lo <= amplitude, "component of class {l} spans {lo}..{hi}");
        }
    }
}

fn class_mean_color(s: &SceneSample, class: usize) -> Option<[f64; 3]> {
    let plane = s.height() * s.width();
    let pixels: Vec<usize> = (0..plane).filter(|&p| s.labels[p] == class).collect();
    if pixels.is_empty() {
        return None;
    }
    let mut m = [0.0; 3];
    for (c, slot) in m.iter_mut().enumerate() {
        *slot = pixels.iter().map(|&p| s.rgb.data()[c * plane + p] as f64).sum::<f64>() / pixels.len() as f64;
    }
    Some(m)
}

#[test]
fn unconfused_classes_separate_by_mean_color() {
    let cfg = GenConfig {
        color_confusion: 0.0,
        depth_noise: 0.0,
        ..Default::default()
    };
    for s in generate_dataset(&cfg, 200, 3).unwrap() {
        for class in 0..cfg.classes {
            let Some(m) = class_mean_color(&s, class) else { continue };
            let nearest = (0..cfg.classes)
                .min_by(|&a, &b| {
                    let d = |c: usize| palette_color(c).iter().zip(m).map(|(p, v)| (p - v).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(nearest, class);
        }
    }
}

#[test]
fn confused_pair_needs_depth() {
    let cfg = GenConfig {
        color_confusion: 1.0,
        ..Default::default()
    };
    let scenes = generate_dataset(&cfg, 100, 4).unwrap();
    let pixels = |s: &SceneSample, class: usize| -> Vec<([f64; 3], f64)> {
        let plane = s.height() * s.width();
        (0..plane)
            .filter(|&p| s.labels[p] == class)
            .map(|p| {
                let rgb = [0, 1, 2].map(|c| s.rgb.data()[c * plane + p] as f64);
                (rgb, s.depth.data()[p] as f64)
            })
            .collect()
    };

    // RGB: a nearest-mean classifier fitted on half the scenes is at chance on the rest.
    let mean = |scenes: &[SceneSample], class: usize| {
        let all: Vec<[f64; 3]> = scenes.iter().flat_map(|s| pixels(s, class)).map(|(c, _)| c).collect();
        [0, 1, 2].map(|k| all.iter().map(|c| c[k]).sum::<f64>() / all.len() as f64)
    };
    let (fit, held) = scenes.split_at(50);
    let (m1, m2) = (mean(fit, 1), mean(fit, 2));
    let dist = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let recall = |class: usize| {
        let px: Vec<[f64; 3]> = held.iter().flat_map(|s| pixels(s, class)).map(|(c, _)| c).collect();
        let hits = px.iter().filter(|c| (dist(c, &m1) < dist(c, &m2)) == (class == 1)).count();
        hits as f64 / px.len() as f64
    };
    let balanced = (recall(1) + recall(2)) / 2.0;
    assert!((balanced - 0.5).abs() < 0.05, "rgb balanced accuracy {balanced}");

    // Depth: within every scene one threshold splits the pair.
    let (mut correct, mut total) = (0usize, 0usize);
    for s in &scenes {
        let (a, b) = (pixels(s, 1), pixels(s, 2));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let mut candidates: Vec<f64> = a.iter().chain(&b).map(|&(_, d)| d).collect();
        candidates.sort_by(f64::total_cmp);
        let best = candidates
            .iter()
            .map(|&t| a.iter().filter(|p| p.1 <= t).count() + b.iter().filter(|p| p.1 > t).count())
            .max()
            .unwrap();
        correct += best;
        total += a.len() + b.len();
    }
    assert!(total > 0);
    assert!(correct as f64 / total as f64 >= 0.99, "{correct}/{total}");
}

#[test]
fn nearer_class_sits_on_nearer_plane() {
    for s in generate_dataset(&GenConfig::default(), 100, 6).unwrap() {
        let plane_of = |class: usize| {
            let d: Vec<f64> = (0..s.labels.len()).filter(|&p| s.labels[p] == class).map(|p| s.depth.data()[p] as f64).collect();
            (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
        };
        let planes: Vec<f64> = (1..5).filter_map(plane_of).collect();
        assert!(planes.windows(2).all(|w| w[0] < w[1]));
        if let Some(bg) = plane_of(0) {
            assert!(planes.iter().all(|&p| p < bg));
        }
    }
}

#[test]
fn dataset_file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.dcad");
    let samples = generate_dataset(&GenConfig::default(), 10, 0).unwrap();
    save_dataset(&samples, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), samples);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DCAD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    assert!(matches!(save_dataset(&[], &path), Err(Error::Contract(_))));
    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
}
