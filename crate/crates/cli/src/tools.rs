use crate::manifest::RunManifest;
use anyhow::{bail, Context, Result};
use clap::Args;
use std::path::PathBuf;
use weathergan_core::data::{image_files, image_to_tensor, label_file_name, read_image, stack, synth_toy_domain, DatasetManifest, Domain, DomainDataset, Split, ToySceneConfig};
use weathergan_core::detection::{retrain_detector, DetectorTrainConfig, FrozenDetector, ToyDetector};

#[derive(Args, Debug)]
pub struct TrainDetectorArgs {
    /// Labeled image directory; repeatable. The first is the base set.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long)]
    pub detector: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Images per training split.
    #[arg(long, default_value_t = 300)]
    pub train: usize,
    /// Images per test split.
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn train_detector(args: &TrainDetectorArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let mut sets = Vec::new();
    for d in &args.data {
        if !d.is_dir() {
            bail!("data: directory {} does not exist", d.display());
        }
        sets.push(DomainDataset::load_dir(d, Domain::Normal, true).with_context(|| format!("data: loading {}", d.display()))?);
    }
    let mut added = DomainDataset::empty(Domain::Adverse, true);
    for s in &sets[1..] {
        added.extend(s)?;
    }
    let cfg = DetectorTrainConfig { steps: args.steps, seed: args.seed, ..Default::default() };
    let det = retrain_detector::<f32>(&sets[0], &added, &cfg).context("detection: training")?;
    det.save(&args.out).context("detection: saving detector")?;
    Ok(())
}

pub fn detect(args: &DetectArgs) -> Result<()> {
    let det = ToyDetector::<f32>::load(&args.detector)
        .with_context(|| format!("detection: loading detector {}", args.detector.display()))?;
    if !args.input.is_dir() {
        bail!("data: input directory {} does not exist", args.input.display());
    }
    let mut files = image_files(&args.input)?;
    files.sort();
    if files.is_empty() {
        bail!("data: no images in {}", args.input.display());
    }
    let mut ok = 0;
    for f in &files {
        let r = (|| -> Result<()> {
            let x = stack(&[image_to_tensor::<f32>(&read_image(f)?)])?;
            let boxes = det.detect(&x)?;
            let name = f.file_name().context("data: image path without file name")?.to_string_lossy();
            boxes[0].write(&args.out.join(label_file_name(&name)), true)?;
            Ok(())
        })();
        match r {
            Ok(()) => ok += 1,
            Err(e) => eprintln!("warning: skipping {}: {:#}", f.display(), e),
        }
    }
    if ok == 0 {
        bail!("detection: every input image failed");
    }
    Ok(())
}

pub fn synth(args: &SynthArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let scene = ToySceneConfig::default();
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let n = if matches!(split, Split::TrainA | Split::TrainB) { args.train } else { args.test };
        let ds = synth_toy_domain(n, &scene, split.domain(), args.seed.wrapping_add(i as u64 + 1));
        ds.save_dir(&args.out.join(split.dir_name())).with_context(|| format!("data: writing {}", split.dir_name()))?;
    }
    DatasetManifest::describe(&args.out)?.write(&args.out)?;
    Ok(())
}
