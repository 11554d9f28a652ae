//! Synthetic street-like scenes for fast end-to-end runs.
//!
//! Class 0 objects are filled rectangles, class 1 objects are filled discs.
//! The adverse domain darkens a scene and overlays rain streaks; box
//! geometry is left untouched.

use super::{Domain, DomainDataset};
use crate::detection::{iou, BBox, BoxSet};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Brightness multiplier of the adverse domain.
    pub darkening: f64,
    pub streaks: usize,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self { size: 64, min_objects: 1, max_objects: 3, darkening: 0.4, streaks: 40 }
    }
}

pub const TOY_NUM_CLASSES: usize = 2;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render(cfg: &ToySceneConfig, rng: &mut ChaCha8Rng) -> (Vec<[f64; 3]>, BoxSet) {
    let n = cfg.size;
    let nf = n as f64;
    let horizon = rng.random_range(0.3..0.5);
    let sky = hsv(rng.random_range(0.55..0.65), 0.35, 0.85);
    let road = rng.random_range(0.40..0.55);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut px = vec![[0.0; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let fy = y as f64 / nf;
            let tex = 0.03 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.45).cos());
            let base = if fy < horizon { sky } else { [road, road, road * 1.05] };
            let noise = rng.random_range(-0.02..0.02);
            px[y * n + x] = base.map(|c| c + tex + noise);
        }
    }
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let class_id = rng.random_range(0..TOY_NUM_CLASSES);
            let (bw, bh) = if class_id == 0 {
                (rng.random_range(0.2..0.38) * nf, rng.random_range(0.14..0.26) * nf)
            } else {
                let d = rng.random_range(0.16..0.28) * nf;
                (d, d)
            };
            let (bw, bh) = (bw.round().max(2.0), bh.round().max(2.0));
            let x0 = rng.random_range(0.0..=(nf - bw)).floor();
            let y0 = rng.random_range(0.0..=(nf - bh)).floor();
            let b = BBox::from_corners(class_id, x0 / nf, y0 / nf, (x0 + bw) / nf, (y0 + bh) / nf);
            if boxes.iter().any(|o| iou(o, &b) > 0.05) {
                continue;
            }
            let color = hsv(rng.random_range(0.0..1.0), rng.random_range(0.6..0.95), rng.random_range(0.75..1.0));
            let (cx, cy, r) = (x0 + bw / 2.0, y0 + bh / 2.0, bw / 2.0);
            for y in y0 as usize..(y0 + bh) as usize {
                for x in x0 as usize..(x0 + bw) as usize {
                    let inside = class_id == 0 || {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        dx * dx + dy * dy <= r * r
                    };
                    if inside {
                        px[y * n + x] = color;
                    }
                }
            }
            boxes.push(b);
            break;
        }
    }
    (px, BoxSet::new(boxes))
}

fn to_image(n: usize, px: &[[f64; 3]]) -> RgbImage {
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let p = px[y as usize * n + x as usize];
        Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Darkens `img` and overlays rain streaks.
pub fn adverse_transform<R: Rng>(img: &RgbImage, cfg: &ToySceneConfig, rng: &mut R) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = RgbImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y).0;
        let tint = [0.0, 0.01, 0.04];
        Rgb([0, 1, 2].map(|c| {
            let v = p[c] as f64 / 255.0 * cfg.darkening + tint[c];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    for _ in 0..cfg.streaks {
        let len = rng.random_range(4..10);
        let (mut x, mut y) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64);
        for _ in 0..len {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                break;
            }
            let p = out.get_pixel_mut(x as u32, y as u32);
            p.0 = p.0.map(|c| c.saturating_add(45));
            y += 1;
            if y % 3 == 0 {
                x -= 1;
            }
        }
    }
    out
}

/// `n` labeled toy scenes of one domain. Different seeds give unpaired sets.
pub fn synth_toy_domain(n: usize, cfg: &ToySceneConfig, domain: Domain, seed: u64) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weather_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ad5e);
    let mut names = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (px, boxes) = render(cfg, &mut rng);
        let img = to_image(cfg.size, &px);
        let img = match domain {
            Domain::Normal => img,
            Domain::Adverse => adverse_transform(&img, cfg, &mut weather_rng),
        };
        names.push(format!("{:05}.png", i));
        images.push(img);
        labels.push(boxes);
    }
    DomainDataset { domain, names, images, labels: Some(labels) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_intensity(ds: &DomainDataset) -> f64 {
        let total: f64 = ds.images.iter().flat_map(|i| i.as_raw().iter()).map(|&v| v as f64 / 255.0).sum();
        total / ds.images.iter().map(|i| i.as_raw().len()).sum::<usize>() as f64
    }

    #[test]
    fn adverse_is_darker() {
        let cfg = ToySceneConfig::default();
        let a = synth_toy_domain(20, &cfg, Domain::Normal, 3);
        let b = synth_toy_domain(20, &cfg, Domain::Adverse, 3);
        assert!(mean_intensity(&b) < 0.6 * mean_intensity(&a));
    }

    #[test]
    fn adverse_keeps_geometry() {
        let cfg = ToySceneConfig::default();
        let a = synth_toy_domain(5, &cfg, Domain::Normal, 8);
        let b = synth_toy_domain(5, &cfg, Domain::Adverse, 8);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn boxes_are_valid_and_nonempty() {
        let ds = synth_toy_domain(30, &ToySceneConfig::default(), Domain::Normal, 11);
        for set in ds.labels.unwrap() {
            assert!(!set.is_empty());
            set.validate().unwrap();
            for b in set.iter() {
                let (x1, y1, x2, y2) = b.corners();
                assert!(x1 >= -1e-12 && y1 >= -1e-12 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
            }
        }
    }
}
