//! Unpaired two-domain image datasets, crop policy and batch sampling.
//!
//! On disk a dataset root holds `trainA`, `trainB`, `testA` and `testB` image
//! directories (A = normal weather, B = adverse). YOLO label files live either
//! in `<split>/labels/<stem>.txt` or in `labels/<split>/<stem>.txt`.

mod crop;
mod toy;

pub use crop::{crop_boxes, CropMode, CropPolicy};
pub use toy::{adverse_transform, synth_toy_domain, ToySceneConfig, TOY_NUM_CLASSES};

use crate::detection::BoxSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Normal,
    Adverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    TrainA,
    TrainB,
    TestA,
    TestB,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainA, Split::TrainB, Split::TestA, Split::TestB];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::TrainA => "trainA",
            Split::TrainB => "trainB",
            Split::TestA => "testA",
            Split::TestB => "testB",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::TrainA | Split::TestA => Domain::Normal,
            Split::TrainB | Split::TestB => Domain::Adverse,
        }
    }
}

/// Images of one domain, with optional per-image box labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub names: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Option<Vec<BoxSet>>,
}

impl DomainDataset {
    pub fn new(domain: Domain, names: Vec<String>, images: Vec<RgbImage>, labels: Option<Vec<BoxSet>>) -> Result<Self> {
        if names.len() != images.len() {
            return Err(Error::InvalidInput(format!("{} names for {} images", names.len(), images.len())));
        }
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::InvalidInput(format!("{} label sets for {} images", l.len(), images.len())));
            }
            for set in l {
                set.validate()?;
            }
        }
        Ok(Self { domain, names, images, labels })
    }

    pub fn empty(domain: Domain, labeled: bool) -> Self {
        Self { domain, names: Vec::new(), images: Vec::new(), labels: labeled.then(Vec::new) }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels_of(&self, i: usize) -> Option<&BoxSet> {
        self.labels.as_ref().map(|l| &l[i])
    }

    pub fn tensor<T: Scalar>(&self, i: usize) -> Tensor<T> {
        image_to_tensor(&self.images[i])
    }

    /// All images stacked as `[N, 3, H, W]`; images must share one size.
    pub fn stacked<T: Scalar>(&self) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = (0..self.len()).map(|i| self.tensor(i)).collect();
        stack(&parts)
    }

    /// Loads every image in `dir` (sorted by file name).
    ///
    /// With `require_labels`, a missing label file is an error; otherwise
    /// labels are attached only if every image has one.
    pub fn load_dir(dir: &Path, domain: Domain, require_labels: bool) -> Result<Self> {
        let mut files = image_files(dir)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
        }
        let label_dir = label_dir_for(dir);
        let mut names = Vec::new();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut all_labeled = true;
        for f in &files {
            images.push(read_image(f)?);
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let label_path = label_dir.as_ref().map(|d| d.join(label_file_name(&name)));
            match label_path.filter(|p| p.is_file()) {
                Some(p) => labels.push(BoxSet::read(&p)?),
                None if require_labels => {
                    return Err(Error::InvalidInput(format!("no label file for {}", f.display())));
                }
                None => all_labeled = false,
            }
            names.push(name);
        }
        Self::new(domain, names, images, all_labeled.then_some(labels))
    }

    pub fn load_split(root: &Path, split: Split, require_labels: bool) -> Result<Self> {
        Self::load_dir(&root.join(split.dir_name()), split.domain(), require_labels)
    }

    /// Writes images as PNG into `dir` and labels into `dir/labels`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, img) in self.names.iter().zip(&self.images) {
            write_image(&dir.join(name), img)?;
        }
        if let Some(labels) = &self.labels {
            let ld = dir.join("labels");
            std::fs::create_dir_all(&ld).map_err(|e| Error::io(&ld, e))?;
            for (name, set) in self.names.iter().zip(labels) {
                set.write(&ld.join(label_file_name(name)), false)?;
            }
        }
        Ok(())
    }

    /// Appends `other`; both must agree on whether they are labeled.
    pub fn extend(&mut self, other: &DomainDataset) -> Result<()> {
        match (&mut self.labels, &other.labels) {
            (Some(a), Some(b)) => a.extend(b.iter().cloned()),
            (None, None) => {}
            _ => return Err(Error::InvalidInput("cannot merge labeled and unlabeled datasets".into())),
        }
        self.names.extend(other.names.iter().cloned());
        self.images.extend(other.images.iter().cloned());
        Ok(())
    }
}

/// `image.png` -> `image.txt`.
pub fn label_file_name(image_name: &str) -> String {
    let stem = Path::new(image_name).file_stem().and_then(|s| s.to_str()).unwrap_or(image_name);
    format!("{}.txt", stem)
}

/// Label directory for an image directory, if one exists.
pub fn label_dir_for(image_dir: &Path) -> Option<PathBuf> {
    let inner = image_dir.join("labels");
    if inner.is_dir() {
        return Some(inner);
    }
    let split = image_dir.file_name()?;
    let sibling = image_dir.parent()?.join("labels").join(split);
    sibling.is_dir().then_some(sibling)
}

pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if p.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    Ok(img.to_rgb8())
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// `[3, H, W]` tensor with pixels mapped from `[0, 255]` to `[-1, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        T::c(raw[p * 3 + c] as f64 / 127.5 - 1.0)
    })
}

/// Inverse of [`image_to_tensor`]; values are clamped to `[-1, 1]` and rounded.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::Shape(format!("expected a [3, H, W] image tensor, got {:?}", s))),
    };
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for c in 0..3 {
        for p in 0..h * w {
            let v = d[c * h * w + p].to_f64c();
            let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
            raw[p * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches"))
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::Shape(format!("cannot stack {:?} with {:?}", p.shape(), first.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&shape, data)
}

/// Normalized images `[N, 3, H, W]` with optional per-image boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub pixels: Tensor<T>,
    pub labels: Option<Vec<BoxSet>>,
}

/// Draws one unpaired batch: `batch_size` source images (with their boxes,
/// if labeled) and as many independently drawn target images.
///
/// Source images whose boxes are all cropped away are redrawn.
pub fn load_pair_batch<T: Scalar>(
    source: &DomainDataset,
    target: &DomainDataset,
    policy: &CropPolicy,
    batch_size: usize,
    seed: u64,
) -> Result<(ImageBatch<T>, ImageBatch<T>)> {
    const MAX_DRAWS: usize = 64;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("source and target datasets must be non-empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(batch_size);
    let mut boxes = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut drawn = None;
        for _ in 0..MAX_DRAWS {
            let i = rng.random_range(0..source.len());
            let labels = source.labels_of(i).cloned().unwrap_or_default();
            let (img, kept) = policy.apply(&source.images[i], &labels, &mut rng)?;
            if labels.is_empty() || !kept.is_empty() {
                drawn = Some((img, kept));
                break;
            }
        }
        let (img, kept) = drawn.ok_or_else(|| {
            Error::InvalidInput(format!("no crop kept any labeled box after {} draws", MAX_DRAWS))
        })?;
        xs.push(image_to_tensor::<T>(&img));
        boxes.push(kept);
    }
    let mut ys = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let j = rng.random_range(0..target.len());
        let (img, _) = policy.apply(&target.images[j], &BoxSet::default(), &mut rng)?;
        ys.push(image_to_tensor::<T>(&img));
    }
    let x = ImageBatch { pixels: stack(&xs)?, labels: source.is_labeled().then_some(boxes) };
    let y = ImageBatch { pixels: stack(&ys)?, labels: None };
    Ok((x, y))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub domain: Domain,
    pub images: usize,
    pub labeled: bool,
    pub width: u32,
    pub height: u32,
}

/// Summary of a dataset root, stored as `manifest.toml`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: BTreeMap<String, SplitInfo>,
}

impl DatasetManifest {
    pub fn describe(root: &Path) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let dir = root.join(split.dir_name());
            if !dir.is_dir() {
                continue;
            }
            let ds = DomainDataset::load_dir(&dir, split.domain(), false)?;
            let (width, height) = ds.images[0].dimensions();
            splits.insert(
                split.dir_name().to_string(),
                SplitInfo { domain: ds.domain, images: ds.len(), labeled: ds.is_labeled(), width, height },
            );
        }
        Ok(Self { splits })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
    }
}
