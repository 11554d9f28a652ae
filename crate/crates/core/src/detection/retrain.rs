use super::boxes::BoxSet;
use super::detector::{DetectorConfig, ToyDetector};
use crate::data::{image_to_tensor, stack, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::ciou_loss_rows;
use crate::nn::{Adam, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::autograd::Graph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub detector: DetectorConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Drop exact duplicate (image, labels) pairs before training.
    pub dedup: bool,
    /// Random horizontal flips.
    pub flip: bool,
    pub box_weight: f64,
    pub cls_weight: f64,
    pub obj_weight: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            seed: 0,
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            dedup: true,
            flip: true,
            box_weight: 1.0,
            cls_weight: 1.0,
            obj_weight: 4.0,
        }
    }
}

struct Sample<'a> {
    image: &'a image::RgbImage,
    labels: &'a BoxSet,
}

fn fingerprint(img: &image::RgbImage, labels: &BoxSet) -> u64 {
    let mut h = DefaultHasher::new();
    img.dimensions().hash(&mut h);
    img.as_raw().hash(&mut h);
    labels.to_text(true).hash(&mut h);
    h.finish()
}

fn labeled<'a>(ds: &'a DomainDataset, what: &str) -> Result<&'a [BoxSet]> {
    let labels = ds.labels.as_deref().ok_or_else(|| Error::InvalidInput(format!("{} dataset has no labels", what)))?;
    if labels.len() != ds.images.len() {
        return Err(Error::InvalidInput(format!(
            "{} dataset has {} label sets for {} images",
            what,
            labels.len(),
            ds.images.len()
        )));
    }
    Ok(labels)
}

/// Trains a fresh detector on `base ∪ added` with a fixed seed and step budget.
///
/// Each object is assigned to the grid cell containing its center; that
/// cell learns the box (CIoU), the class (BCE) and objectness 1, every
/// other cell objectness 0.
pub fn retrain_detector<T: Scalar>(
    base: &DomainDataset,
    added: &DomainDataset,
    cfg: &DetectorTrainConfig,
) -> Result<ToyDetector<T>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("detector training needs batch_size >= 1 and lr > 0".into()));
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (ds, what) in [(base, "base"), (added, "added")] {
        let labels = labeled(ds, what)?;
        for (image, labels) in ds.images.iter().zip(labels) {
            if cfg.dedup && !seen.insert(fingerprint(image, labels)) {
                continue;
            }
            samples.push(Sample { image, labels });
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training images for the detector".into()));
    }
    let mut det = ToyDetector::<T>::new(&cfg.detector, cfg.seed)?;
    let mut adam = Adam::new(&det.store, cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut ys = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let mut x: Tensor<T> = image_to_tensor(s.image);
            let mut labels = s.labels.clone();
            if cfg.flip && rng.random_bool(0.5) {
                x = flip_horizontal(&x);
                for b in &mut labels.boxes {
                    b.cx = 1.0 - b.cx;
                }
            }
            xs.push(x);
            ys.push(labels);
        }
        let batch = stack(&xs)?;
        let graph = Graph::new();
        let session = Session::trainable(&graph, &det.store);
        let maps = det.forward_dense(&session, graph.constant(batch))?;
        let loss = assignment_loss(&maps, &ys, det.cfg.grid(), cfg)?;
        if !loss.value().is_finite() {
            return Err(Error::NonFinite("detector training loss".into()));
        }
        let mut grads = graph.backward(loss);
        let grads = session.gradients(&mut grads);
        drop(session);
        adam.update(&mut det.store, &grads);
    }
    Ok(det)
}

fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let w = s[s.len() - 1];
    Tensor::from_fn(s, |i| {
        let col = i % w;
        x.data()[i - col + (w - 1 - col)]
    })
}

fn assignment_loss<'g, T: Scalar>(
    maps: &super::DenseMaps<'g, T>,
    targets: &[BoxSet],
    grid: usize,
    cfg: &DetectorTrainConfig,
) -> Result<crate::autograd::Var<'g, T>> {
    let cells = grid * grid;
    let k = maps.class_probs.shape()[2];
    let n = targets.len();
    let mut obj_t = Tensor::zeros(&[n, cells]);
    let (mut box_idx, mut box_gt, mut cls_idx, mut cls_t) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, set) in targets.iter().enumerate() {
        for b in set.iter() {
            if b.class_id >= k {
                return Err(Error::InvalidInput(format!("class {} outside detector's {} classes", b.class_id, k)));
            }
            let gx = ((b.cx * grid as f64) as usize).min(grid - 1);
            let gy = ((b.cy * grid as f64) as usize).min(grid - 1);
            let cell = i * cells + gy * grid + gx;
            if obj_t.data()[cell] == T::one() {
                continue;
            }
            obj_t.data_mut()[cell] = T::one();
            box_idx.extend((0..4).map(|j| cell * 4 + j));
            box_gt.extend([b.cx, b.cy, b.w, b.h].map(T::c));
            cls_idx.extend((0..k).map(|c| cell * k + c));
            cls_t.extend((0..k).map(|c| if c == b.class_id { T::one() } else { T::zero() }));
        }
    }
    let mut loss = maps.objectness.bce_prob(&obj_t, 1e-7).mean().scale(T::c(cfg.obj_weight));
    let m = box_idx.len() / 4;
    if m > 0 {
        let pred = maps.boxes.gather_flat(&box_idx).reshape(&[m, 4]);
        let l_box = ciou_loss_rows(pred, &Tensor::from_vec(&[m, 4], box_gt)).mean();
        let l_cls = maps.class_probs.gather_flat(&cls_idx).bce_prob(&Tensor::from_vec(&[m * k], cls_t), 1e-7).mean();
        loss = loss.add(l_box.scale(T::c(cfg.box_weight))).add(l_cls.scale(T::c(cfg.cls_weight)));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, DomainDataset};

    #[test]
    fn flip_reverses_rows() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(flip_horizontal(&x).data(), &[3., 2., 1., 6., 5., 4.]);
    }

    #[test]
    fn unlabeled_or_mismatched_rejected() {
        let img = image::RgbImage::new(64, 64);
        let bad = DomainDataset { domain: Domain::Normal, names: vec!["a".into()], images: vec![img], labels: Some(vec![]) };
        let empty = DomainDataset::empty(Domain::Adverse, true);
        let cfg = DetectorTrainConfig { steps: 1, ..Default::default() };
        assert!(retrain_detector::<f32>(&bad, &empty, &cfg).is_err());
        let unlabeled = DomainDataset { labels: None, ..bad };
        assert!(retrain_detector::<f32>(&unlabeled, &empty, &cfg).is_err());
    }
}
