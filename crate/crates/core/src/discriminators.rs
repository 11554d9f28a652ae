//! PatchGAN critics scoring overlapping image patches.
//!
//! The critics use no normalization layers, so every output score depends only
//! on the input pixels inside its receptive field.

use crate::attention::check_finite;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamStore, Padding, Session};
use crate::scalar::Scalar;
use crate::tensor::{conv_out, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 convolutions (3 gives the 70x70 patch critic).
    pub n_layers: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { image_channels: 3, base_channels: 64, n_layers: 3 }
    }
}

impl CriticConfig {
    pub fn toy() -> Self {
        Self { image_channels: 3, base_channels: 16, n_layers: 2 }
    }

    /// Receptive field (pixels per side) of one output score.
    pub fn receptive_field(&self) -> usize {
        // two stride-1 k4 convs, then n stride-2 k4 convs, walking backwards
        let mut r = 1 + 3 + 3;
        for _ in 0..self.n_layers {
            r = (r - 1) * 2 + 4;
        }
        r
    }

    /// Score map size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let step = |mut s: usize| {
            for _ in 0..self.n_layers {
                s = conv_out(s, 4, 2, 1)?;
            }
            conv_out(conv_out(s, 4, 1, 1)?, 4, 1, 1)
        };
        Some((step(h)?, step(w)?))
    }
}

/// Per-patch realism scores `[N, 1, h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCriticOutput<T>(pub Tensor<T>);

impl<T: Scalar> PatchCriticOutput<T> {
    pub fn scores(&self) -> &Tensor<T> {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct PatchCritic {
    pub cfg: CriticConfig,
    pub layers: Vec<Conv2d>,
}

impl PatchCritic {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &CriticConfig) -> Result<Self> {
        if cfg.n_layers == 0 || cfg.base_channels == 0 || cfg.image_channels == 0 {
            return Err(Error::Config("critic needs n_layers >= 1 and positive channel counts".into()));
        }
        let mut layers = Vec::new();
        let mut cin = cfg.image_channels;
        let mut cout = cfg.base_channels;
        for i in 0..cfg.n_layers {
            layers.push(Conv2d::new(b, &format!("conv{}", i), cin, cout, 4, 2, Padding::Zero(1), true));
            cin = cout;
            cout = (cout * 2).min(cfg.base_channels * 8);
        }
        layers.push(Conv2d::new(b, &format!("conv{}", cfg.n_layers), cin, cout, 4, 1, Padding::Zero(1), true));
        layers.push(Conv2d::new(b, "score", cout, 1, 4, 1, Padding::Zero(1), true));
        Ok(Self { cfg: cfg.clone(), layers })
    }

    /// Inputs smaller than the receptive field are accepted as long as the
    /// padded convolutions still leave at least one score.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        match self.cfg.output_size(h, w) {
            Some((oh, ow)) if oh > 0 && ow > 0 => Ok(()),
            _ => Err(Error::Shape(format!("critic input {}x{} leaves no score map", h, w))),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "critic expects [N, {}, H, W], got {:?}",
                self.cfg.image_channels, shape
            )));
        }
        self.validate_input(shape[2], shape[3])?;
        check_finite(x, "critic input")?;
        let slope = T::c(0.2);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i != last {
                h = h.leaky_relu(slope);
            }
        }
        Ok(h)
    }

    pub fn score<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<PatchCriticOutput<T>> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let out = self.forward(&s, g.constant(images.clone()))?;
        let v = (*out.value()).clone();
        Ok(PatchCriticOutput(v))
    }
}

/// Critics for both domains in one parameter store.
#[derive(Clone, Debug)]
pub struct CriticPair<T> {
    /// Judges normal-domain images.
    pub normal: PatchCritic,
    /// Judges adverse-domain images.
    pub adverse: PatchCritic,
    pub store: ParamStore<T>,
}

impl<T: Scalar> CriticPair<T> {
    pub fn build(cfg: &CriticConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed, 0.02);
        let normal = b.scoped("d_normal", |b| PatchCritic::new(b, cfg))?;
        let adverse = b.scoped("d_adverse", |b| PatchCritic::new(b, cfg))?;
        Ok(Self { normal, adverse, store })
    }
}
