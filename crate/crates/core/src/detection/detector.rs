use super::boxes::{nms, BBox, BoxSet};
use crate::attention::check_finite;
use crate::autograd::{concat, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamBuilder, ParamStore, Padding, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dense per-cell detector outputs, all probabilities / normalized boxes.
///
/// `objectness` is `[N, S]`, `class_probs` `[N, S, K]` and `boxes`
/// `[N, S, 4]` in `(cx, cy, w, h)` order, with `S` grid cells in row-major order.
pub struct DenseMaps<'g, T> {
    pub objectness: Var<'g, T>,
    pub class_probs: Var<'g, T>,
    pub boxes: Var<'g, T>,
}

/// A detector whose parameters never change while it is used as a loss.
pub trait FrozenDetector<T: Scalar> {
    fn num_classes(&self) -> usize;

    /// Differentiable dense outputs; gradients flow into `images` only.
    fn dense<'g>(&'g self, graph: &'g Graph<T>, images: Var<'g, T>) -> Result<DenseMaps<'g, T>>;

    /// Thresholded, NMS-filtered boxes per image.
    fn detect(&self, images: &Tensor<T>) -> Result<Vec<BoxSet>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    /// Stride-2 stages; the grid is `image_size >> n_down` cells per side.
    pub n_down: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            num_classes: 2,
            width: 16,
            n_down: 3,
            conf_threshold: 0.25,
            nms_iou: 0.45,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> usize {
        self.image_size >> self.n_down
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 || self.image_size % (1 << self.n_down) != 0 || self.grid() == 0 {
            return Err(Error::Config(format!(
                "detector image size {} must be a positive multiple of 2^{}",
                self.image_size, self.n_down
            )));
        }
        if self.num_classes == 0 || self.width == 0 || self.image_channels == 0 {
            return Err(Error::Config("detector needs positive class and channel counts".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("detector thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Anchor-free single-scale grid detector.
///
/// Each cell predicts objectness, per-class probabilities and one box whose
/// center lies inside the cell.
#[derive(Clone, Debug)]
pub struct ToyDetector<T> {
    pub cfg: DetectorConfig,
    layers: Vec<Conv2d>,
    head: Conv2d,
    pub store: ParamStore<T>,
}

const OBJECTNESS_PRIOR_LOGIT: f64 = -4.0;
const CONFIG_FILE: &str = "detector.toml";
const PARAMS_FILE: &str = "detector.bin";

impl<T: Scalar> ToyDetector<T> {
    pub fn new(cfg: &DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::with_init(&mut store, seed, Init::FanIn(2f64.sqrt()));
        let mut layers = Vec::new();
        let mut cin = cfg.image_channels;
        for i in 0..cfg.n_down {
            let cout = cfg.width << i.min(2);
            layers.push(Conv2d::new(&mut b, &format!("down{}", i), cin, cout, 3, 2, Padding::Zero(1), true));
            cin = cout;
        }
        layers.push(Conv2d::new(&mut b, "mix", cin, cin, 3, 1, Padding::Zero(1), true));
        let head = Conv2d::new(&mut b, "head", cin, 5 + cfg.num_classes, 1, 1, Padding::Zero(0), true);
        let bias = head.bias.expect("head has a bias");
        store.get_mut(bias).data_mut()[0] = T::c(OBJECTNESS_PRIOR_LOGIT);
        Ok(Self { cfg: cfg.clone(), layers, head, store })
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.image_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(Error::Shape(format!(
                "detector expects [N, {}, {}, {}], got {:?}",
                c.image_channels, c.image_size, c.image_size, shape
            )));
        }
        Ok(())
    }

    /// Dense outputs with parameters bound through `s` (trainable or frozen).
    pub fn forward_dense<'g>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<DenseMaps<'g, T>> {
        let shape = x.shape();
        self.validate_input(&shape)?;
        check_finite(x, "detector input")?;
        let n = shape[0];
        let k = self.cfg.num_classes;
        let g = self.cfg.grid();
        let cells = g * g;
        let slope = T::c(0.1);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(s, h).leaky_relu(slope);
        }
        let h = self.head.forward(s, h).reshape(&[n, 5 + k, cells]);
        let objectness = h.narrow(1, 0, 1).reshape(&[n, cells]).sigmoid();
        let class_probs = h.narrow(1, 1, k).sigmoid().transpose_last2();
        let offsets = Tensor::from_fn(&[1, 2, cells], |i| {
            let cell = i % cells;
            T::c(if i < cells { (cell % g) as f64 } else { (cell / g) as f64 })
        });
        let centers = h
            .narrow(1, 1 + k, 2)
            .sigmoid()
            .add(s.graph().constant(offsets))
            .scale(T::c(1.0 / g as f64));
        let sizes = h.narrow(1, 3 + k, 2).sigmoid();
        let boxes = concat(&[centers, sizes], 1).transpose_last2();
        Ok(DenseMaps { objectness, class_probs, boxes })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        self.store.save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: DetectorConfig = toml::from_str(&text).map_err(|e| Error::parse(&cfg_path, e.to_string()))?;
        let mut det = Self::new(&cfg, 0)?;
        det.store.copy_from(&ParamStore::load(&dir.join(PARAMS_FILE))?)?;
        Ok(det)
    }
}

impl<T: Scalar> FrozenDetector<T> for ToyDetector<T> {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn dense<'g>(&'g self, graph: &'g Graph<T>, images: Var<'g, T>) -> Result<DenseMaps<'g, T>> {
        let s = Session::frozen(graph, &self.store);
        self.forward_dense(&s, images)
    }

    fn detect(&self, images: &Tensor<T>) -> Result<Vec<BoxSet>> {
        let g = Graph::new();
        let maps = self.dense(&g, g.constant(images.clone()))?;
        Ok(decode_dense(
            &maps.objectness.value(),
            &maps.class_probs.value(),
            &maps.boxes.value(),
            self.cfg.conf_threshold,
            self.cfg.nms_iou,
        ))
    }
}

/// Turns dense maps into boxes: confidence = objectness x best class
/// probability, thresholded, then class-wise NMS. Boxes are clipped to the
/// unit square.
pub fn decode_dense<T: Scalar>(
    objectness: &Tensor<T>,
    class_probs: &Tensor<T>,
    boxes: &Tensor<T>,
    conf_threshold: f64,
    nms_iou: f64,
) -> Vec<BoxSet> {
    let (n, cells) = (objectness.shape()[0], objectness.shape()[1]);
    let k = class_probs.shape()[2];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut cands = Vec::new();
        for s in 0..cells {
            let obj = objectness.data()[i * cells + s].to_f64c();
            let probs = &class_probs.data()[(i * cells + s) * k..(i * cells + s + 1) * k];
            let (class_id, p) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v.to_f64c() > best.1 { (c, v.to_f64c()) } else { best });
            let conf = obj * p;
            if !(conf >= conf_threshold) || conf <= 0.0 {
                continue;
            }
            let b = &boxes.data()[(i * cells + s) * 4..(i * cells + s + 1) * 4];
            let (cx, cy, w, h) = (b[0].to_f64c(), b[1].to_f64c(), b[2].to_f64c(), b[3].to_f64c());
            let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
            let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
            let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
            let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
            if x2 <= x1 || y2 <= y1 {
                continue;
            }
            cands.push(BBox::from_corners(class_id, x1, y1, x2, y2).with_confidence(conf.min(1.0)));
        }
        out.push(BoxSet::new(nms(cands, nms_iou)));
    }
    out
}
