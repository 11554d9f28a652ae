use crate::cache;
use crate::manifest::RunManifest;
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use weathergan_core::data::{image_files, Domain, DomainDataset};
use weathergan_core::detection::{retrain_detector, DetectorTrainConfig, FrozenDetector, ToyDetector};
use weathergan_core::generators::Scale;
use weathergan_core::trainer::{run_training_with, RunOptions, TrainConfig};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with a `[data]` table and the training fields.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable a component; repeatable.
    #[arg(long, value_parser = ["no-pam", "no-cam", "no-multiscale", "no-det"])]
    pub ablation: Vec<String>,
    /// Input resize of the reduced-resolution branch.
    #[arg(long, value_parser = ["1/2", "1/4", "1/8"])]
    pub scale: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    /// Normal-domain images (labels required when the detection loss is on).
    pub source: PathBuf,
    /// Adverse-domain images.
    pub target: PathBuf,
    /// Pretrained toy detector directory; trained on `source` when absent.
    pub detector: Option<PathBuf>,
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataPaths,
    #[serde(default)]
    pub detector_training: DetectorTrainConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads the file and resolves data paths relative to its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cli: reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("cli: parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.data.source = resolve(&cfg.data.source);
        cfg.data.target = resolve(&cfg.data.target);
        cfg.data.detector = cfg.data.detector.as_deref().map(resolve);
        Ok(cfg)
    }
}

fn check_dir(p: &Path, what: &str) -> Result<()> {
    if !p.is_dir() {
        bail!("data: {} directory {} does not exist", what, p.display());
    }
    Ok(())
}

/// Loads or trains the frozen detector, caching trained ones by source content.
fn obtain_detector(cfg: &RunConfig, src: &DomainDataset, out: &Path) -> Result<ToyDetector<f32>> {
    if let Some(dir) = &cfg.data.detector {
        check_dir(dir, "detector")?;
        return ToyDetector::load(dir).with_context(|| format!("detection: loading detector {}", dir.display()));
    }
    let mut files = image_files(&cfg.data.source)?;
    files.sort();
    let tag = toml::to_string(&cfg.detector_training).context("cli: serializing detector config")?;
    let labels: Vec<String> = src.labels.iter().flatten().map(|l| l.to_text(false)).collect();
    let key = cache::content_key(&files, &format!("{}\n{}", tag, labels.join("\n")))?;
    let cached = cache::entry("detectors", &key);
    let det = match ToyDetector::<f32>::load(&cached) {
        Ok(d) => {
            eprintln!("detection: using cached detector {}", cached.display());
            d
        }
        Err(_) => {
            eprintln!("detection: training toy detector on {} images", src.len());
            let empty = DomainDataset::empty(Domain::Adverse, true);
            let d = retrain_detector::<f32>(src, &empty, &cfg.detector_training).context("detection: training detector")?;
            if let Err(e) = d.save(&cached) {
                eprintln!("warning: could not cache detector at {}: {}", cached.display(), e);
            }
            d
        }
    };
    det.save(&out.join("detector")).context("detection: saving detector")?;
    Ok(det)
}

pub fn run(args: &TrainArgs, manifest: &mut RunManifest) -> Result<()> {
    let mut cfg = RunConfig::read(&args.config)?;
    let t = &mut cfg.train;
    if let Some(s) = args.seed {
        t.seed = s;
    }
    for a in &args.ablation {
        t.ablation.disable(a)?;
    }
    if let Some(s) = &args.scale {
        t.generator.downsample_scale = s.parse::<Scale>()?;
    }
    if let Some(n) = args.iterations {
        t.iterations = n;
    }
    t.validate().context("trainer: invalid config")?;
    manifest.config = Some(args.config.clone());
    manifest.seed = Some(t.seed);

    let use_det = cfg.train.ablation.use_detection_loss;
    check_dir(&cfg.data.source, "source")?;
    check_dir(&cfg.data.target, "target")?;
    let src = DomainDataset::load_dir(&cfg.data.source, Domain::Normal, use_det)
        .with_context(|| format!("data: loading source images {}", cfg.data.source.display()))?;
    let tgt = DomainDataset::load_dir(&cfg.data.target, Domain::Adverse, false)
        .with_context(|| format!("data: loading target images {}", cfg.data.target.display()))?;
    let detector = if use_det { Some(obtain_detector(&cfg, &src, &args.out)?) } else { None };

    let effective = args.out.join("train_config.toml");
    std::fs::write(&effective, toml::to_string(&cfg).context("cli: serializing config")?)
        .with_context(|| format!("cli: writing {}", effective.display()))?;
    let opts = RunOptions { resume: args.resume, stop_after: None };
    let total = cfg.train.iterations;
    let mut progress = |it: u64, r: &weathergan_core::losses::LossReport| {
        if it % 100 == 0 || it == total {
            eprintln!("iter {}/{} total {:.4} adv {:.4} cyc {:.4} det {:.4}", it, total, r.total, r.adv, r.cyc, r.det);
        }
    };
    let det_ref = detector.as_ref().map(|d| d as &dyn FrozenDetector<f32>);
    let ckpt = run_training_with::<f32>(&cfg.train, &src, &tgt, det_ref, &args.out, &opts, &mut progress)
        .context("trainer")?;
    println!("{}", ckpt.display());
    Ok(())
}
