//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. Everything here is plain loops over `f64`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weathergan_core::attention::PositionAttention;
use weathergan_core::detection::{BBox, BoxSet};
use weathergan_core::generators::Scale;
use weathergan_core::metrics::ScaleCandidate;
use weathergan_core::nn::{Conv2d, ParamStore};
use weathergan_core::Tensor;

// ---------------------------------------------------------------- boxes / mAP

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx0, by0, bx1, by1) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching of a ranked prefix, recomputed from scratch.
fn tp_of_prefix(ranked: &[(usize, &BBox)], gts: &[BoxSet], class: usize, thr: f64) -> usize {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|s| vec![false; s.boxes.len()]).collect();
    let mut tp = 0;
    for &(img, p) in ranked {
        let mut best = None;
        let mut best_v = -1.0;
        for (g, gt) in gts[img].boxes.iter().enumerate() {
            if gt.class_id == class && !used[img][g] {
                let v = iou_ref(p, gt);
                if v >= thr && v > best_v {
                    best_v = v;
                    best = Some(g);
                }
            }
        }
        if let Some(g) = best {
            used[img][g] = true;
            tp += 1;
        }
    }
    tp
}

pub struct MapOracle {
    pub map: f64,
    pub per_class: Vec<(usize, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Enumerates every confidence cut-off: for each prefix of the ranking the
/// matching is redone from scratch, and AP sums, over the prefixes that add
/// a true positive, `1/n_gt` times the best precision at that or any deeper
/// cut-off.
pub fn map_oracle(preds: &[BoxSet], gts: &[BoxSet], thr: f64) -> MapOracle {
    let mut classes: Vec<usize> = gts.iter().chain(preds).flat_map(|s| s.boxes.iter().map(|b| b.class_id)).collect();
    classes.sort();
    classes.dedup();
    let mut per_class = Vec::new();
    let mut tp_total = 0;
    for &c in &classes {
        let mut ranked: Vec<(f64, usize, usize, &BBox)> = Vec::new();
        for (img, s) in preds.iter().enumerate() {
            for (j, b) in s.boxes.iter().enumerate() {
                if b.class_id == c {
                    ranked.push((b.confidence, img, j, b));
                }
            }
        }
        // confidence descending, ties by (image, index)
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let list: Vec<(usize, &BBox)> = ranked.iter().map(|r| (r.1, r.3)).collect();
        let n_gt = gts.iter().flat_map(|s| s.boxes.iter()).filter(|b| b.class_id == c).count();
        let tps: Vec<usize> = (0..=list.len()).map(|k| tp_of_prefix(&list[..k], gts, c, thr)).collect();
        tp_total += tps[list.len()];
        if n_gt == 0 {
            continue;
        }
        let prec: Vec<f64> = (1..=list.len()).map(|k| tps[k] as f64 / k as f64).collect();
        let mut ap = 0.0;
        for k in 1..=list.len() {
            if tps[k] > tps[k - 1] {
                let best = prec[k - 1..].iter().cloned().fold(0.0, f64::max);
                ap += best / n_gt as f64;
            }
        }
        per_class.push((c, ap));
    }
    let n_gt: usize = gts.iter().map(|s| s.boxes.len()).sum();
    let n_pred: usize = preds.iter().map(|s| s.boxes.len()).sum();
    let map = per_class.iter().map(|p| p.1).sum::<f64>() / per_class.len() as f64;
    MapOracle { map, per_class, tp: tp_total, fp: n_pred - tp_total, fn_: n_gt - tp_total }
}

/// Random detection fixture with at most `max_boxes` boxes in total, on a
/// coarse grid so that exact overlaps and confidence ties occur.
pub fn random_fixture(rng: &mut ChaCha8Rng, max_boxes: usize) -> (Vec<BoxSet>, Vec<BoxSet>) {
    let n_img = rng.random_range(1..=3);
    let mut gts = vec![BoxSet::default(); n_img];
    let mut preds = vec![BoxSet::default(); n_img];
    let total = rng.random_range(1..=max_boxes);
    let n_gt = rng.random_range(1..=total.max(1)).min(total);
    let coarse = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let steps = 8;
        lo + (hi - lo) * rng.random_range(0..=steps) as f64 / steps as f64
    };
    for _ in 0..n_gt {
        let img = rng.random_range(0..n_img);
        let b = BBox::gt(rng.random_range(0..2), coarse(rng, 0.2, 0.8), coarse(rng, 0.2, 0.8), coarse(rng, 0.1, 0.3), coarse(rng, 0.1, 0.3));
        gts[img].boxes.push(b);
    }
    for _ in n_gt..total {
        let img = rng.random_range(0..n_img);
        let conf = rng.random_range(1..=5) as f64 / 5.0;
        let near = gts[img].boxes.get(rng.random_range(0..gts[img].boxes.len().max(1))).cloned();
        let b = match near {
            Some(g) if rng.random_bool(0.7) => BBox {
                class_id: if rng.random_bool(0.85) { g.class_id } else { 1 - g.class_id },
                cx: g.cx + coarse(rng, -0.05, 0.05),
                cy: g.cy + coarse(rng, -0.05, 0.05),
                w: g.w * coarse(rng, 0.8, 1.2),
                h: g.h,
                confidence: conf,
            },
            _ => BBox {
                class_id: rng.random_range(0..2),
                cx: coarse(rng, 0.2, 0.8),
                cy: coarse(rng, 0.2, 0.8),
                w: coarse(rng, 0.1, 0.3),
                h: coarse(rng, 0.1, 0.3),
                confidence: conf,
            },
        };
        preds[img].boxes.push(b);
    }
    if gts.iter().all(|s| s.boxes.is_empty()) {
        gts[0].boxes.push(BBox::gt(0, 0.5, 0.5, 0.2, 0.2));
    }
    (preds, gts)
}

// ---------------------------------------------------------------- KID / FID

pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² written directly as the three double sums.
pub fn mmd2_bruteforce(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += poly_kernel(&x[i], &x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += poly_kernel(&y[i], &y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for a in x {
        for b in y {
            kxy += poly_kernel(a, b);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

// ---------------------------------------------------------------- Pareto

/// O(n²) non-dominated filter, sorted by scale denominator.
pub fn pareto_oracle(c: &[ScaleCandidate]) -> Vec<Scale> {
    let mut out: Vec<Scale> = Vec::new();
    for (i, a) in c.iter().enumerate() {
        let dominated = c.iter().enumerate().any(|(j, b)| {
            j != i && b.fid <= a.fid && b.map >= a.map && (b.fid < a.fid || b.map > a.map)
        });
        if !dominated {
            out.push(a.scale);
        }
    }
    out.sort_by_key(|s| s.denominator());
    out
}

// ---------------------------------------------------------------- attention

fn conv1x1(store: &ParamStore<f64>, conv: &Conv2d, x: &[Vec<f64>], hw: usize) -> Vec<Vec<f64>> {
    let w = store.get(conv.weight);
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let bias = conv.bias.map(|b| store.get(b).data().to_vec()).unwrap_or_else(|| vec![0.0; cout]);
    (0..cout)
        .map(|o| {
            (0..hw)
                .map(|p| bias[o] + (0..cin).map(|i| w.data()[o * cin + i] * x[i][p]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn adaptive_pool(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1) = (oy * h / oh, ((oy + 1) * h).div_ceil(oh));
        for ox in 0..ow {
            let (x0, x1) = (ox * w / ow, ((ox + 1) * w).div_ceil(ow));
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += plane[y * w + x];
                }
            }
            out[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

fn bilinear(plane: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, i: usize, n: usize| {
        let src = ((o as f64 + 0.5) * i as f64 / n as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(i - 1);
        let i1 = (i0 + 1).min(i - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, ih, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, iw, ow);
            let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
            let bot = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn planes(t: &Tensor<f64>) -> (Vec<Vec<f64>>, usize, usize) {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    ((0..c).map(|i| t.data()[i * h * w..(i + 1) * h * w].to_vec()).collect(), h, w)
}

/// Position attention on a `[C, H, W]` map: returns (output, gate).
pub fn pam_oracle(store: &ParamStore<f64>, m: &PositionAttention, f: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (x, h, w) = planes(f);
    let mut branches = Vec::new();
    for (&d, proj) in m.pool_divisors.iter().zip(&m.branch_proj) {
        let (ph, pw) = (h / d, w / d);
        let pooled: Vec<Vec<f64>> = x.iter().map(|p| adaptive_pool(p, h, w, ph, pw)).collect();
        let z = conv1x1(store, proj, &pooled, ph * pw);
        branches.push(bilinear(&z[0], ph, pw, h, w));
    }
    let fused = conv1x1(store, &m.fuse, &branches, h * w);
    let gate: Vec<f64> = fused[0].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let out = x.iter().flat_map(|p| p.iter().zip(&gate).map(|(a, g)| a * g).collect::<Vec<_>>()).collect();
    (out, gate)
}

/// Channel attention on a `[C, H, W]` map: returns (output, affinity rows).
pub fn cam_oracle(f: &Tensor<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (a, h, w) = planes(f);
    let c = a.len();
    let hw = h * w;
    let mut rows = Vec::new();
    for i in 0..c {
        let e: Vec<f64> = (0..c).map(|j| (0..hw).map(|p| a[i][p] * a[j][p]).sum()).collect();
        let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - mx).exp()).sum();
        rows.push(e.iter().map(|v| (v - mx).exp() / z).collect::<Vec<f64>>());
    }
    let mut out = vec![0.0; c * hw];
    for i in 0..c {
        for p in 0..hw {
            out[i * hw + p] = (0..c).map(|j| rows[i][j] * a[j][p]).sum::<f64>() + a[i][p];
        }
    }
    (out, rows)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- trainer fixtures

use weathergan_core::data::ImageBatch;
use weathergan_core::detection::{DetectorConfig, ToyDetector};
use weathergan_core::discriminators::CriticConfig;
use weathergan_core::generators::GeneratorConfig;
use weathergan_core::losses::LossWeights;
use weathergan_core::trainer::{Ablation, TrainConfig, TrainState};

/// Two-channel 8x8 pipeline small enough for finite differences.
pub struct GradPipeline {
    pub state: TrainState<f64>,
    pub x: ImageBatch<f64>,
    pub y: Tensor<f64>,
    pub detector: ToyDetector<f64>,
}

pub fn grad_pipeline(ablation: Ablation, seed: u64) -> GradPipeline {
    let generator = GeneratorConfig {
        image_channels: 2,
        base_channels: 2,
        num_downsample: 1,
        num_residual_blocks_g1: 1,
        num_residual_blocks_g2: 1,
        downsample_scale: Scale::new(2).unwrap(),
        pam_pool_divisors: vec![1, 2],
        ..GeneratorConfig::default()
    };
    let cfg = TrainConfig {
        ablation,
        seed,
        generator,
        critic: CriticConfig { image_channels: 2, base_channels: 2, n_layers: 1 },
        ..TrainConfig::toy(1)
    };
    let mut state = TrainState::<f64>::new(&cfg).unwrap();
    // larger init than the 0.02 default so every path carries signal
    let mut rng = seeded(seed ^ 0x9a);
    for p in state.generators.store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for p in state.critics.store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let x = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.random_range(-0.9..0.9));
    let y = Tensor::from_fn(&[2, 2, 8, 8], |_| rng.random_range(-0.9..0.9));
    let labels = vec![
        BoxSet::new(vec![BBox::gt(0, 0.3, 0.4, 0.3, 0.4)]),
        BoxSet::new(vec![BBox::gt(1, 0.6, 0.6, 0.5, 0.3), BBox::gt(0, 0.2, 0.2, 0.2, 0.2)]),
    ];
    let dcfg = DetectorConfig { image_size: 8, image_channels: 2, width: 4, n_down: 1, ..DetectorConfig::default() };
    let mut detector = ToyDetector::<f64>::new(&dcfg, seed + 1).unwrap();
    for p in detector.store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    GradPipeline { state, x: ImageBatch { pixels: x, labels: Some(labels) }, y, detector }
}

pub struct GradCheck {
    pub checked: usize,
    pub agreeing: usize,
    pub worst: f64,
}

/// Central differences of the total generator loss against the analytic
/// gradient for `per_tensor` sampled entries of every generator tensor.
pub fn grad_check(p: &mut GradPipeline, per_tensor: usize, h: f64, rel_tol: f64, seed: u64) -> GradCheck {
    let w = LossWeights::default();
    let det = Some(&p.detector as &dyn weathergan_core::detection::FrozenDetector<f64>);
    let analytic = p.state.generator_gradients(&p.x, &p.y, det, &w).unwrap().grads;
    let mut rng = seeded(seed);
    let mut out = GradCheck { checked: 0, agreeing: 0, worst: 0.0 };
    for t in 0..analytic.len() {
        let n = analytic[t].numel();
        for _ in 0..per_tensor.min(n) {
            let i = rng.random_range(0..n);
            let orig = p.state.generators.store.iter_mut().nth(t).unwrap().value.data()[i];
            let mut eval = |v: f64| {
                p.state.generators.store.iter_mut().nth(t).unwrap().value.data_mut()[i] = v;
                p.state.generator_gradients(&p.x, &p.y, det, &w).unwrap().report.total
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            out.checked += 1;
            if err <= rel_tol {
                out.agreeing += 1;
            }
            out.worst = out.worst.max(err);
        }
    }
    out
}

pub fn all_ablations() -> [(&'static str, Ablation); 4] {
    let full = Ablation::default();
    [
        ("full", full),
        ("no-pam", Ablation { use_pam: false, ..full }),
        ("no-cam", Ablation { use_cam: false, ..full }),
        ("no-multiscale", Ablation { use_multiscale: false, ..full }),
    ]
}
