//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p weathergan-core --test acceptance` runs everything;
//! trailing numeric arguments (`-- 2 7`) restrict the run to those criteria.

mod common;

use common::*;
use rand::Rng;
use std::time::{Duration, Instant};
use weathergan_core::attention::{cam_apply, DualAttention, FeatureMap, PositionAttention, DEFAULT_POOL_DIVISORS};
use weathergan_core::data::{image_to_tensor, stack, synth_toy_domain, tensor_to_image, Domain, DomainDataset, ToySceneConfig};
use weathergan_core::detection::{evaluate_map, retrain_detector, BBox, BoxSet, DetectorTrainConfig, FrozenDetector, ToyDetector};
use weathergan_core::generators::{Direction, Scale};
use weathergan_core::losses::{LossReport, LossWeights};
use weathergan_core::metrics::{fid, kid, mmd2_unbiased, pareto_front, pareto_table, FeatureSet, KidConfig, ScaleCandidate};
use weathergan_core::nn::{ParamBuilder, ParamStore};
use weathergan_core::trainer::{read_loss_log, run_training, run_training_with, Ablation, RunOptions, TrainConfig, TrainState, LOSS_LOG};
use weathergan_core::report::Table;
use weathergan_core::Tensor;

// pinned tolerances
const ATTN_TOL: f64 = 1e-5;
const ATTN_CASES: usize = 100;
const ATTN_BUDGET: Duration = Duration::from_secs(60);
const GRAD_REL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const GRAD_AGREE: f64 = 0.95;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const FID_OFFSET_TOL: f64 = 1e-3;
const FID_SELF_TOL: f64 = 1e-6;
const FID_SYM_TOL: f64 = 1e-9;
const KID_EXACT_REL: f64 = 1e-12;
const MAP_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-12;
const CYCLE_RATIO: f64 = 0.5;
const E2E_BUDGET: Duration = Duration::from_secs(30 * 60);
const RESUME_TOL: f64 = 1e-6;
const RETRAIN_SEEDS: [u64; 4] = [0, 1, 2, 3];

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|r| r.as_slice()).collect()
}

fn set(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::new("acceptance", rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn documented_targets() -> Outcome {
    let mut fid_t = Table::new("FID on the rainy split (documented target)", &["dataset", "method", "FID"]);
    fid_t.push(vec!["AllRain-rainy".into(), "full model".into(), "55.2".into()]);
    let mut det_t = Table::new("Detector trained with generated data (documented targets)", &["setting", "mAP"]);
    det_t.push(vec!["rainy".into(), "0.422".into()]);
    det_t.push(vec!["night".into(), "0.469".into()]);
    println!("{}", fid_t.to_markdown());
    println!("{}", det_t.to_markdown());
    Ok("full-scale targets (FID 55.2, mAP 0.422 rainy / 0.469 night, 15.5 h V100 runs) are documented only; \
        external datasets and GPU budget are not available here"
        .into())
}

fn attention_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = seeded(0xa77e);
    let (mut worst_pam, mut worst_cam, mut worst_rows) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..ATTN_CASES {
        let (c, h, w) = (rng.random_range(1..=8), rng.random_range(16..=32), rng.random_range(16..=32));
        // amplitude ~ 1/sqrt(HW) keeps channel energies O(1), so the softmax is not one-hot
        let amp = 3.0 / ((h * w) as f64).sqrt();
        let f = FeatureMap::new(Tensor::from_fn(&[c, h, w], |_| amp * rng.random_range(-1.0..1.0))).unwrap();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, case as u64, 0.5);
        let pam = PositionAttention::new(&mut b, c, &DEFAULT_POOL_DIVISORS).unwrap();
        let dual = DualAttention::new(&mut b, c, &DEFAULT_POOL_DIVISORS, true, true).unwrap();
        let (out, gate) = pam.apply(&store, &f).unwrap();
        if out.tensor().shape() != [c, h, w] || !gate.in_open_unit_interval() {
            return Err(format!("PAM case {} [{},{},{}]: shape or gate range violated", case, c, h, w));
        }
        let (want, want_gate) = pam_oracle(&store, &pam, f.tensor());
        worst_pam = worst_pam.max(max_diff(out.tensor().data(), &want)).max(max_diff(gate.tensor().data(), &want_gate));

        let (out, m) = cam_apply(&f).unwrap();
        if out.tensor().shape() != [c, h, w] {
            return Err(format!("CAM case {}: shape", case));
        }
        worst_rows = worst_rows.max(m.max_row_sum_error());
        let (want, rows) = cam_oracle(f.tensor());
        let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst_cam = worst_cam.max(max_diff(out.tensor().data(), &want) / scale).max(max_diff(m.tensor().data(), &rows.concat()));

        if dual.apply(&store, &f).unwrap().tensor().shape() != [c, h, w] {
            return Err(format!("dual case {}: shape", case));
        }
    }
    let dt = t0.elapsed();
    check(
        worst_pam <= ATTN_TOL && worst_cam <= ATTN_TOL && worst_rows <= ATTN_TOL && dt < ATTN_BUDGET,
        format!(
            "{} inputs up to [8,32,32]: PAM oracle {:.1e}, CAM oracle {:.1e}, row sums {:.1e} (tol {:.0e}), {:.1?}",
            ATTN_CASES, worst_pam, worst_cam, worst_rows, ATTN_TOL, dt
        ),
    )
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, (name, ab)) in all_ablations().into_iter().enumerate() {
        let mut p = grad_pipeline(ab, 21 + i as u64);
        let r = grad_check(&mut p, 3, GRAD_STEP, GRAD_REL, 5);
        let frac = r.agreeing as f64 / r.checked as f64;
        ok &= r.checked >= 30 && frac >= GRAD_AGREE;
        parts.push(format!("{} {}/{}", name, r.agreeing, r.checked));
    }
    let dt = t0.elapsed();
    check(ok && dt < GRAD_BUDGET, format!("[2,8,8] f64 pipeline, rel {:.0e}: {} agree, {:.1?}", GRAD_REL, parts.join(", "), dt))
}

fn fid_oracle() -> Outcome {
    let mut rng = seeded(7);
    let a = gaussian_rows(&mut rng, 10_000, 8);
    let d = [0.5, -1.0, 0.25, 0.0, 2.0, -0.5, 0.1, 1.5];
    let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&d).map(|(v, s)| v + s).collect()).collect();
    let want: f64 = d.iter().map(|v| v * v).sum();
    let (sa, sb) = (set(&a), set(&b));
    let shifted = fid(&sa, &sb).map_err(|e| e.to_string())?;
    let selfd = fid(&sa, &sa).map_err(|e| e.to_string())?;
    let sc = set(&gaussian_rows(&mut rng, 2000, 8));
    let asym = (fid(&sa, &sc).unwrap() - fid(&sc, &sa).unwrap()).abs();
    check(
        (shifted - want).abs() <= FID_OFFSET_TOL && selfd.abs() <= FID_SELF_TOL && asym <= FID_SYM_TOL,
        format!("|d|^2 {:.4} vs {:.4}; FID(a,a) {:.1e}; asymmetry {:.1e}", shifted, want, selfd, asym),
    )
}

fn kid_oracle() -> Outcome {
    let mut rng = seeded(3);
    let mut worst = 0.0f64;
    for n in 2..=8 {
        for m in 2..=8 {
            let x = gaussian_rows(&mut rng, n, 5);
            let y: Vec<Vec<f64>> = gaussian_rows(&mut rng, m, 5).into_iter().map(|r| r.iter().map(|v| v + 0.3).collect()).collect();
            let want = mmd2_bruteforce(&x, &y);
            let got = mmd2_unbiased(&rows(&x), &rows(&y)).map_err(|e| e.to_string())?;
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
            if n == m {
                let (mean, _) = kid(&set(&x), &set(&y), &KidConfig { subset_size: n, n_subsets: 2, seed: 1 }).unwrap();
                worst = worst.max((mean - want).abs() / want.abs().max(1e-300));
            }
        }
    }
    let vals: Vec<f64> = (0..100)
        .map(|_| {
            let x = gaussian_rows(&mut rng, 50, 8);
            let y = gaussian_rows(&mut rng, 50, 8);
            mmd2_unbiased(&rows(&x), &rows(&y)).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / 100.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    let se = sd / 10.0;
    check(
        worst <= KID_EXACT_REL && mean.abs() <= 3.0 * se,
        format!("U-statistic rel err {:.1e} for N<=8; null mean {:.2e} (3 s.e. = {:.2e})", worst, mean, 3.0 * se),
    )
}

fn map_oracle_suite() -> Outcome {
    let mut rng = seeded(11);
    let mut fixtures = 0;
    for case in 0..2000 {
        let (preds, gts) = random_fixture(&mut rng, 10);
        let n_gt: usize = gts.iter().map(|s| s.len()).sum();
        for thr in [0.3, 0.5, 0.75] {
            let got = evaluate_map(&preds, &gts, thr).map_err(|e| e.to_string())?;
            let want = map_oracle(&preds, &gts, thr);
            if (got.map - want.map).abs() > MAP_TOL || (got.tp, got.fp, got.fn_) != (want.tp, want.fp, want.fn_) {
                return Err(format!("fixture {} thr {}: mAP {} vs oracle {}", case, thr, got.map, want.map));
            }
            if got.tp + got.fn_ != n_gt {
                return Err(format!("fixture {}: tp+fn {} != {}", case, got.tp + got.fn_, n_gt));
            }
            fixtures += 1;
        }
    }
    let gts = vec![BoxSet::new(vec![
        BBox::gt(0, 0.3, 0.3, 0.2, 0.2),
        BBox::gt(1, 0.7, 0.6, 0.1, 0.3),
    ])];
    let perfect: Vec<_> = gts
        .iter()
        .map(|s| BoxSet::new(s.iter().map(|b| b.clone().with_confidence(0.9)).collect()))
        .collect();
    let p = evaluate_map(&perfect, &gts, 0.5).unwrap().map;
    check(p == 1.0, format!("{} fixtures match exhaustive oracle within {:.0e}; perfect fixture mAP {}", fixtures, MAP_TOL, p))
}

fn pareto() -> Outcome {
    let c = |den, fid, map| ScaleCandidate { scale: Scale::new(den).unwrap(), fid, map };
    let cands = [c(2, 76.9, 0.406), c(4, 67.3, 0.422), c(8, 65.6, 0.415)];
    let front = pareto_front(&cands).map_err(|e| e.to_string())?;
    let names: Vec<String> = front.iter().map(|c| c.scale.to_string()).collect();
    println!("{}", pareto_table(&cands, &front).to_markdown());
    check(names == ["1/4", "1/8"], format!("front {{{}}}", names.join(", ")))
}

fn loss_weights() -> Outcome {
    let w = LossWeights::default();
    let defaults = (w.k1, w.k2, w.k3, w.a, w.b, w.c) == (0.8, 1.0, 10.0, 0.4, 0.3, 0.3);
    let mut worst = 0.0f64;
    let mut rng = seeded(8);
    for _ in 0..1000 {
        let r = LossReport::from_components(
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..2.0),
            (rng.random_range(0.0..2.5), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)),
            &w,
        )
        .unwrap();
        let det = w.a * r.det_ciou + w.b * r.det_cls + w.c * r.det_conf;
        let total = w.k1 * r.det + w.k2 * r.adv + w.k3 * r.cyc;
        worst = worst.max((r.det - det).abs()).max((r.total - total).abs()).max(r.identity_error(&w));
    }
    check(
        defaults && worst <= IDENTITY_TOL,
        format!("k1 {} k2 {} k3 {} a {} b {} c {}; identity error {:.1e}", w.k1, w.k2, w.k3, w.a, w.b, w.c, worst),
    )
}

fn translate(state: &TrainState<f32>, src: &DomainDataset, n: usize) -> DomainDataset {
    let mut out = DomainDataset::empty(Domain::Adverse, true);
    let labels = src.labels.as_ref().expect("labeled source");
    for i in 0..n.min(src.len()) {
        let x = stack(&[image_to_tensor::<f32>(&src.images[i])]).unwrap();
        let y = state.generators.translate(Direction::NormalToAdverse, &x).unwrap();
        out.names.push(src.names[i].clone());
        out.images.push(tensor_to_image(&y).unwrap());
        out.labels.as_mut().unwrap().push(labels[i].clone());
    }
    out
}

/// Adverse-test mAP of detectors retrained on `base + added`, averaged over
/// `RETRAIN_SEEDS` (one retrain alone varies by about 0.08).
fn retrained_map(base: &DomainDataset, added: &DomainDataset, test: &DomainDataset) -> Result<f64, String> {
    let x = test.stacked::<f32>().map_err(|e| e.to_string())?;
    let mut sum = 0.0;
    for seed in RETRAIN_SEEDS {
        let d = retrain_detector::<f32>(base, added, &DetectorTrainConfig { seed, ..Default::default() }).map_err(|e| e.to_string())?;
        let preds = d.detect(&x).map_err(|e| e.to_string())?;
        sum += evaluate_map(&preds, test.labels.as_ref().unwrap(), 0.5).map_err(|e| e.to_string())?.map;
    }
    Ok(sum / RETRAIN_SEEDS.len() as f64)
}

fn toy_end_to_end() -> Outcome {
    let scene = ToySceneConfig::default();
    let src = synth_toy_domain(300, &scene, Domain::Normal, 1);
    let tgt = synth_toy_domain(300, &scene, Domain::Adverse, 2);
    let test = synth_toy_domain(100, &scene, Domain::Adverse, 3);
    let none = DomainDataset::empty(Domain::Adverse, true);

    // frozen loss detector, pretrained on a separate labeled mixed-condition set
    let mut broad = synth_toy_domain(300, &scene, Domain::Normal, 101);
    broad.extend(&synth_toy_domain(300, &scene, Domain::Adverse, 102)).unwrap();
    let loss_detector =
        retrain_detector::<f32>(&broad, &none, &DetectorTrainConfig { seed: 77, ..Default::default() }).map_err(|e| e.to_string())?;

    let base_map = retrained_map(&src, &none, &test)?;
    let mut msgs = Vec::new();
    let mut ok = true;
    let mut maps = Vec::new();
    for use_det in [true, false] {
        let mut cfg = TrainConfig::toy(2000);
        cfg.ablation.use_detection_loss = use_det;
        let tmp = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let ckpt = run_training::<f32>(&cfg, &src, &tgt, Some(&loss_detector), tmp.path()).map_err(|e| e.to_string())?;
        let dt = t0.elapsed();
        let log = read_loss_log(&tmp.path().join(LOSS_LOG)).map_err(|e| e.to_string())?;
        let mean = |r: &[(u64, LossReport)]| r.iter().map(|x| x.1.cyc).sum::<f64>() / r.len() as f64;
        let (first, last) = (mean(&log[..100]), mean(&log[log.len() - 100..]));
        let state = TrainState::<f32>::load(&ckpt).map_err(|e| e.to_string())?;
        let m = retrained_map(&src, &translate(&state, &src, 200), &test)?;
        maps.push(m);
        let tag = if use_det { "with det loss" } else { "no-det" };
        ok &= last <= CYCLE_RATIO * first && dt <= E2E_BUDGET;
        msgs.push(format!("{}: cyc {:.4} -> {:.4} (ratio {:.3}), trained in {:.0?}, retrained mAP {:.4}", tag, first, last, last / first, dt, m));
    }
    ok &= maps.iter().all(|&m| m > base_map) && maps[0] > maps[1];
    check(ok, format!("day-only baseline mAP {:.4}; {}", base_map, msgs.join("; ")))
}

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy(1000);
    cfg.generator.base_channels = 4;
    cfg.generator.num_residual_blocks_g1 = 1;
    cfg.generator.num_residual_blocks_g2 = 1;
    cfg.critic.base_channels = 4;
    cfg.ablation = Ablation { use_detection_loss: false, ..Ablation::default() };
    cfg
}

fn determinism() -> Outcome {
    let scene = ToySceneConfig::default();
    let src = synth_toy_domain(20, &scene, Domain::Normal, 1);
    let tgt = synth_toy_domain(20, &scene, Domain::Adverse, 2);
    let det = ToyDetector::<f32>::new(&Default::default(), 9).unwrap();

    let logged = |cfg: &TrainConfig, opts_list: &[RunOptions]| {
        let tmp = tempfile::tempdir().unwrap();
        for o in opts_list {
            run_training_with::<f32>(cfg, &src, &tgt, Some(&det), tmp.path(), o, &mut |_, _| {}).unwrap();
        }
        read_loss_log(&tmp.path().join(LOSS_LOG)).unwrap()
    };
    let bits = |log: &[(u64, LossReport)]| log.iter().map(|(i, r)| (*i, r.values().map(f64::to_bits))).collect::<Vec<_>>();

    let toy = TrainConfig::toy(100);
    let (a, b) = (logged(&toy, &[RunOptions::default()]), logged(&toy, &[RunOptions::default()]));
    let identical = a.len() == 100 && bits(&a) == bits(&b);

    let tiny = tiny_config();
    let whole = logged(&tiny, &[RunOptions::default()]);
    let resumed = logged(
        &tiny,
        &[RunOptions { resume: false, stop_after: Some(500) }, RunOptions { resume: true, stop_after: None }],
    );
    let mut worst = if whole.len() == resumed.len() && whole.len() == 1000 { 0.0f64 } else { f64::INFINITY };
    for ((i, r), (j, s)) in whole.iter().zip(&resumed) {
        if i != j {
            worst = f64::INFINITY;
        }
        worst = worst.max(max_diff(&r.values(), &s.values()));
    }
    check(
        identical && worst <= RESUME_TOL,
        format!(
            "100-step logs bit-identical: {}; 1000-step run interrupted at 500 and resumed: max per-step deviation {:.1e} (tol {:.0e})",
            identical, worst, RESUME_TOL
        ),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("full-scale targets", documented_targets),
        ("attention invariants", attention_suite),
        ("gradient checks", gradient_checks),
        ("FID oracle", fid_oracle),
        ("KID oracle", kid_oracle),
        ("mAP oracle", map_oracle_suite),
        ("Pareto front", pareto),
        ("loss-weight defaults", loss_weights),
        ("toy end-to-end", toy_end_to_end),
        ("determinism and resume", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(msg) => println!("PASS [{}] {}: {} ({:.1?})", id, name, msg, t0.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{}] {}: {} ({:.1?})", id, name, msg, t0.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
