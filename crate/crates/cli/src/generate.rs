use anyhow::{bail, Context, Result};
use clap::Args;
use image::RgbImage;
use std::fs;
use std::path::{Path, PathBuf};
use weathergan_core::data::{image_files, image_to_tensor, label_dir_for, label_file_name, read_image, stack, tensor_to_image, write_image};
use weathergan_core::generators::{Direction, GeneratorPair};
use weathergan_core::trainer::{latest_checkpoint, TrainState};

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint directory, or a `train` output directory (uses its latest checkpoint).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "normal-to-adverse", value_parser = ["normal-to-adverse", "adverse-to-normal"])]
    pub direction: String,
}

/// Edge-replicating pad to `(w, h)`.
fn pad(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let (iw, ih) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| *img.get_pixel(x.min(iw - 1), y.min(ih - 1)))
}

/// Translates one image, padding it to a size the generator accepts and
/// cropping the result back to the input size.
pub fn translate_image(pair: &GeneratorPair<f32>, direction: Direction, img: &RgbImage) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        bail!("data: empty image");
    }
    let (ph, pw) = pair.generator(direction).cfg.fit_input(h as usize, w as usize);
    let x = stack(&[image_to_tensor::<f32>(&pad(img, pw as u32, ph as u32))])?;
    let y = pair.translate(direction, &x).context("generators")?;
    let out = tensor_to_image(&y)?;
    Ok(image::imageops::crop_imm(&out, 0, 0, w, h).to_image())
}

fn process(pair: &GeneratorPair<f32>, direction: Direction, src: &Path, out: &Path, labels: Option<&Path>) -> Result<()> {
    let img = read_image(src)?;
    let y = translate_image(pair, direction, &img)?;
    let name = src.file_name().context("data: image path without file name")?;
    write_image(&out.join(name), &y)?;
    if let Some(ld) = labels {
        let lf = ld.join(label_file_name(&name.to_string_lossy()));
        if lf.is_file() {
            let dst = out.join("labels").join(lf.file_name().expect("label file name"));
            fs::copy(&lf, &dst).with_context(|| format!("data: copying {}", lf.display()))?;
        }
    }
    Ok(())
}

/// A checkpoint directory, or a run directory whose `checkpoints/latest` names one.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("checkpoint.toml").is_file() {
        return Ok(path.to_path_buf());
    }
    match latest_checkpoint(path)? {
        Some(p) => Ok(p),
        None => bail!("trainer: {} is neither a checkpoint nor a run directory", path.display()),
    }
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let direction: Direction = args.direction.parse()?;
    let ckpt = resolve_checkpoint(&args.checkpoint)?;
    let state = TrainState::<f32>::load(&ckpt).with_context(|| format!("trainer: loading checkpoint {}", ckpt.display()))?;
    if !args.input.is_dir() {
        bail!("data: input directory {} does not exist", args.input.display());
    }
    if let (Ok(a), Ok(b)) = (args.input.canonicalize(), args.out.canonicalize()) {
        if a == b {
            bail!("cli: --out must differ from --input ({})", a.display());
        }
    }
    let mut files = image_files(&args.input)?;
    files.sort();
    if files.is_empty() {
        bail!("data: no images in {}", args.input.display());
    }
    let labels = label_dir_for(&args.input);
    if labels.is_some() {
        fs::create_dir_all(args.out.join("labels")).with_context(|| format!("cli: creating {}/labels", args.out.display()))?;
    }
    let mut ok = 0;
    for f in &files {
        match process(&state.generators, direction, f, &args.out, labels.as_deref()) {
            Ok(()) => ok += 1,
            Err(e) => eprintln!("warning: skipping {}: {:#}", f.display(), e),
        }
    }
    eprintln!("generated {}/{} images into {}", ok, files.len(), args.out.display());
    if ok == 0 {
        bail!("generators: every input image failed");
    }
    Ok(())
}
