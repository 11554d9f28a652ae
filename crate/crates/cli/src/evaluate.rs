use crate::cache;
use crate::manifest::RunManifest;
use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use std::path::{Path, PathBuf};
use weathergan_core::data::{image_files, image_to_tensor, label_dir_for, read_image, stack};
use weathergan_core::detection::{evaluate_map, stats_table, BoxSet, DetectionStats};
use weathergan_core::metrics::{
    fid, kid, pareto_front, pareto_table, read_candidates, FeatureExtractor, FeatureSet, KidConfig,
    RandomProjectionExtractor,
};
use weathergan_core::report::Table;

#[derive(Subcommand, Debug)]
pub enum EvaluateCmd {
    /// Fréchet distance between two image directories or feature files.
    Fid(FeatureArgs),
    /// Kernel inception distance (mean and std over random subsets).
    Kid(KidArgs),
    /// mAP of a prediction directory against ground truth.
    Map(MapArgs),
    /// Pareto front of (scale, FID, mAP) candidates from a CSV file.
    Pareto(ParetoArgs),
    /// FN/FP/TP and per-class AP for one or more prediction directories.
    Stats(StatsArgs),
}

impl EvaluateCmd {
    pub fn out(&self) -> PathBuf {
        match self {
            EvaluateCmd::Fid(a) => a.out.clone(),
            EvaluateCmd::Kid(a) => a.features.out.clone(),
            EvaluateCmd::Map(a) => a.out.clone(),
            EvaluateCmd::Pareto(a) => a.out.clone(),
            EvaluateCmd::Stats(a) => a.out.clone(),
        }
    }
}

#[derive(Args, Debug)]
pub struct FeatureArgs {
    /// Image directory or `.wgf` feature file.
    pub a: PathBuf,
    /// Image directory or `.wgf` feature file.
    pub b: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
    /// Seed of the built-in random-projection extractor used for image directories.
    #[arg(long, default_value_t = 0)]
    pub extractor_seed: u64,
    /// Dataset label for the report row.
    #[arg(long, default_value = "")]
    pub dataset: String,
    /// Method label for the report row.
    #[arg(long, default_value = "")]
    pub method: String,
}

#[derive(Args, Debug)]
pub struct KidArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    #[arg(long, default_value_t = 100)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 100)]
    pub subsets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct MapArgs {
    /// Directory of prediction files (`class cx cy w h conf` per line).
    pub preds: PathBuf,
    /// Directory of ground-truth label files.
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParetoArgs {
    /// CSV with columns scale, fid, map.
    pub candidates: PathBuf,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Ground-truth label directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Prediction directories, one report row each.
    #[arg(required = true)]
    pub preds: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value = "Detection statistics")]
    pub title: String,
    #[arg(long, default_value = "reports")]
    pub out: PathBuf,
}

/// Features of an image directory (cached by content) or a feature file.
pub fn load_features(path: &Path, extractor: &RandomProjectionExtractor) -> Result<FeatureSet> {
    if path.is_file() {
        return FeatureSet::load(path).with_context(|| format!("metrics: loading features {}", path.display()));
    }
    if !path.is_dir() {
        bail!("data: {} is neither a feature file nor an image directory", path.display());
    }
    let mut files = image_files(path)?;
    files.sort();
    if files.is_empty() {
        bail!("data: no images in {}", path.display());
    }
    let id = <RandomProjectionExtractor as FeatureExtractor<f32>>::id(extractor);
    let key = cache::content_key(&files, &id)?;
    let cached = cache::entry("features", &key).with_extension("wgf");
    if let Ok(f) = FeatureSet::load(&cached) {
        if f.extractor == id {
            return Ok(f);
        }
    }
    let mut data = Vec::new();
    for f in &files {
        let x = stack(&[image_to_tensor::<f32>(&read_image(f)?)])?;
        let fs = FeatureExtractor::<f32>::extract(extractor, &x).context("metrics: extracting features")?;
        data.extend(fs.data);
    }
    let set = FeatureSet::new(id, files.len(), extractor.dim, data)?;
    if let Some(parent) = cached.parent() {
        let _ = std::fs::create_dir_all(parent);
    }
    if let Err(e) = set.save(&cached) {
        eprintln!("warning: could not cache features at {}: {}", cached.display(), e);
    }
    Ok(set)
}

fn feature_pair(a: &FeatureArgs) -> Result<(FeatureSet, FeatureSet)> {
    let ex = RandomProjectionExtractor::new(a.extractor_seed, 3, 8, 64);
    let fa = load_features(&a.a, &ex)?;
    let fb = load_features(&a.b, &ex)?;
    if fa.extractor != fb.extractor {
        bail!("metrics: extractor mismatch: {:?} vs {:?}", fa.extractor, fb.extractor);
    }
    Ok((fa, fb))
}

fn write_report(t: &Table, out: &Path, stem: &str) -> Result<()> {
    let (csv, md) = t.write(out, stem)?;
    eprintln!("wrote {} and {}", csv.display(), md.display());
    Ok(())
}

fn label_files(dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        bail!("data: label directory {} does not exist", dir.display());
    }
    Ok(label_dir_for(dir).unwrap_or_else(|| dir.to_path_buf()))
}

/// Ground truth from `gt` and matching predictions from `preds`, paired by file stem.
pub fn load_detection_pairs(preds: &Path, gt: &Path) -> Result<(Vec<BoxSet>, Vec<BoxSet>)> {
    let gt_dir = label_files(gt)?;
    let pred_dir = label_files(preds)?;
    let mut names = Vec::new();
    for f in cache::files_in(&gt_dir)? {
        if f.extension().is_some_and(|e| e == "txt") {
            names.push(f.file_name().expect("file name").to_owned());
        }
    }
    if names.is_empty() {
        bail!("data: no ground-truth label files in {}", gt_dir.display());
    }
    let mut p = Vec::with_capacity(names.len());
    let mut g = Vec::with_capacity(names.len());
    for n in &names {
        g.push(BoxSet::read(&gt_dir.join(n))?);
        let pf = pred_dir.join(n);
        p.push(if pf.is_file() { BoxSet::read(&pf)? } else { BoxSet::default() });
    }
    Ok((p, g))
}

fn dir_label(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

fn stats_for(preds: &Path, gt: &Path, iou: f64) -> Result<DetectionStats> {
    let (p, g) = load_detection_pairs(preds, gt)?;
    evaluate_map(&p, &g, iou).context("detection: evaluating mAP")
}

pub fn run(cmd: &EvaluateCmd, manifest: &mut RunManifest) -> Result<()> {
    match cmd {
        EvaluateCmd::Fid(a) => {
            let (fa, fb) = feature_pair(a)?;
            let v = fid(&fa, &fb).context("metrics: FID")?;
            println!("FID {:.6}", v);
            let mut t = Table::new("FID between image sets", &["dataset", "method", "FID"]);
            t.push(vec![a.dataset.clone(), a.method.clone(), format!("{:.4}", v)]);
            write_report(&t, &a.out, "fid")?;
        }
        EvaluateCmd::Kid(k) => {
            let (fa, fb) = feature_pair(&k.features)?;
            let cfg = KidConfig { subset_size: k.subset_size, n_subsets: k.subsets, seed: k.seed };
            manifest.seed = Some(k.seed);
            let (m, s) = kid(&fa, &fb, &cfg).context("metrics: KID")?;
            println!("KID {:.6} ± {:.6}", m, s);
            let mut t = Table::new("KID between image sets", &["dataset", "method", "KID", "KID std"]);
            t.push(vec![k.features.dataset.clone(), k.features.method.clone(), format!("{:.6}", m), format!("{:.6}", s)]);
            write_report(&t, &k.features.out, "kid")?;
        }
        EvaluateCmd::Map(a) => {
            let st = stats_for(&a.preds, &a.gt, a.iou)?;
            println!("mAP {:.6}", st.map);
            let t = stats_table(&format!("mAP@{}", a.iou), &[(dir_label(&a.preds), st)]);
            write_report(&t, &a.out, "map")?;
        }
        EvaluateCmd::Stats(a) => {
            let mut rows = Vec::new();
            for p in &a.preds {
                let st = stats_for(p, &a.gt, a.iou)?;
                println!("{} mAP {:.6} FN {} FP {} TP {}", dir_label(p), st.map, st.fn_, st.fp, st.tp);
                rows.push((dir_label(p), st));
            }
            write_report(&stats_table(&a.title, &rows), &a.out, "stats")?;
        }
        EvaluateCmd::Pareto(a) => {
            let cands = read_candidates(&a.candidates)
                .with_context(|| format!("metrics: reading candidates {}", a.candidates.display()))?;
            let front = pareto_front(&cands).context("metrics: Pareto front")?;
            let names: Vec<String> = front.iter().map(|c| c.scale.to_string()).collect();
            println!("pareto front: {}", names.join(", "));
            write_report(&pareto_table(&cands, &front), &a.out, "pareto")?;
        }
    }
    Ok(())
}
