//! Position attention (multi-scale pooled spatial gate), channel attention
//! (row-softmax channel affinity) and their two-branch fusion.

use crate::autograd::{concat, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamStore, Padding, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default pyramid of the position attention module: 1/1, 1/2, 1/4, 1/16.
pub const DEFAULT_POOL_DIVISORS: [usize; 4] = [1, 2, 4, 16];

/// A single `[C, H, W]` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Scalar> FeatureMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.shape().contains(&0) {
            return Err(Error::Shape(format!("feature map must be [C, H, W], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    /// `[1, C, H, W]` view for the batched network code.
    pub fn to_batch(&self) -> Tensor<T> {
        let s = self.0.shape();
        self.0.clone().reshape(&[1, s[0], s[1], s[2]])
    }

    fn from_batch(t: Tensor<T>) -> Self {
        let (_, c, h, w) = t.dims4();
        Self(t.reshape(&[c, h, w]))
    }
}

/// The `[1, H, W]` sigmoid gate of the position attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionAttentionMap<T>(Tensor<T>);

impl<T: Scalar> PositionAttentionMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Every entry strictly inside (0, 1).
    pub fn in_open_unit_interval(&self) -> bool {
        self.0.data().iter().all(|&v| v > T::zero() && v < T::one())
    }
}

/// The `[C, C]` row-stochastic channel affinity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionMatrix<T>(Tensor<T>);

impl<T: Scalar> ChannelAttentionMatrix<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_sum_error(&self) -> T {
        let c = self.0.shape()[0];
        self.0
            .data()
            .chunks(c)
            .map(|r| (r.iter().copied().sum::<T>() - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn check_finite<T: Scalar>(x: Var<'_, T>, what: &str) -> Result<()> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Position attention: pool at each scale, project to one channel, upsample
/// back, concatenate, fuse to one channel, sigmoid, multiply into the input.
#[derive(Clone, Debug)]
pub struct PositionAttention {
    pub pool_divisors: Vec<usize>,
    pub branch_proj: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl PositionAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize, pool_divisors: &[usize]) -> Result<Self> {
        if pool_divisors.is_empty() || pool_divisors.contains(&0) {
            return Err(Error::Config(format!("invalid pool scales 1/{:?}", pool_divisors)));
        }
        b.scoped("pam", |b| {
            let branch_proj = pool_divisors
                .iter()
                .enumerate()
                .map(|(i, _)| Conv2d::new(b, &format!("branch{}", i), channels, 1, 1, 1, Padding::Zero(0), true))
                .collect();
            let fuse = Conv2d::new(b, "fuse", pool_divisors.len(), 1, 1, 1, Padding::Zero(0), true);
            Ok(Self { pool_divisors: pool_divisors.to_vec(), branch_proj, fuse })
        })
    }

    /// Largest divisor; the input must be at least this large spatially.
    pub fn min_spatial(&self) -> usize {
        self.pool_divisors.iter().copied().max().unwrap_or(1)
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let need = self.min_spatial();
        if h < need || w < need {
            return Err(Error::Shape(format!(
                "position attention needs spatial dims >= {} (pooling at 1/{}), got {}x{}",
                need, need, h, w
            )));
        }
        Ok(())
    }

    /// Returns `(M ⊗ f, M)` for a batched `[N, C, H, W]` input.
    pub fn forward_with_map<'g, T: Scalar>(
        &self,
        s: &Session<'g, T>,
        f: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let shape = f.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("position attention expects [N, C, H, W], got {:?}", shape)));
        }
        let (h, w) = (shape[2], shape[3]);
        self.validate_input(h, w)?;
        check_finite(f, "position attention input")?;
        let branches: Vec<_> = self
            .pool_divisors
            .iter()
            .zip(&self.branch_proj)
            .map(|(&d, proj)| {
                let pooled = f.adaptive_avg_pool2d(h / d, w / d);
                proj.forward(s, pooled).upsample_bilinear(h, w)
            })
            .collect();
        let merged = concat(&branches, 1);
        let gate = self.fuse.forward(s, merged).sigmoid();
        Ok((gate.mul(f), gate))
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_with_map(s, f).map(|(out, _)| out)
    }

    /// Standalone evaluation on a single feature map.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f: &FeatureMap<T>,
    ) -> Result<(FeatureMap<T>, PositionAttentionMap<T>)> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let (out, gate) = self.forward_with_map(&s, g.constant(f.to_batch()))?;
        let gate = gate.value();
        let (_, _, h, w) = gate.dims4();
        Ok((
            FeatureMap::from_batch((*out.value()).clone()),
            PositionAttentionMap((*gate).clone().reshape(&[1, h, w])),
        ))
    }
}

/// Channel affinity `softmax_rows(A Bᵀ)` for `[N, C, H, W]`, shape `[N, C, C]`.
pub fn channel_attention_matrix<'g, T: Scalar>(f: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = f.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("channel attention expects [N, C, H, W], got {:?}", shape)));
    }
    check_finite(f, "channel attention input")?;
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let a = f.reshape(&[n, c, h * w]);
    Ok(a.bmm(a.transpose_last2()).softmax_last())
}

/// Channel attention: `X · C + A` reshaped back to `[N, C, H, W]`, where
/// `A`, `B`, `C` are the same `[C, HW]` view of the input.
pub fn cam_forward<'g, T: Scalar>(f: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = f.shape();
    let x = channel_attention_matrix(f)?;
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let a = f.reshape(&[n, c, h * w]);
    Ok(x.bmm(a).add(a).reshape(&shape))
}

/// Standalone channel attention on one feature map.
pub fn cam_apply<T: Scalar>(f: &FeatureMap<T>) -> Result<(FeatureMap<T>, ChannelAttentionMatrix<T>)> {
    let g = Graph::new();
    let x = g.constant(f.to_batch());
    let out = cam_forward(x)?;
    let m = channel_attention_matrix(x)?.value();
    let c = f.channels();
    Ok((FeatureMap::from_batch((*out.value()).clone()), ChannelAttentionMatrix((*m).clone().reshape(&[c, c]))))
}

/// `proj_pam(PAM(f)) + proj_cam(CAM(f))`, either branch optional.
#[derive(Clone, Debug)]
pub struct DualAttention {
    pub pam: Option<(PositionAttention, Conv2d)>,
    pub cam_proj: Option<Conv2d>,
}

impl DualAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        channels: usize,
        pool_divisors: &[usize],
        use_pam: bool,
        use_cam: bool,
    ) -> Result<Self> {
        b.scoped("attn", |b| {
            let pam = if use_pam {
                let module = PositionAttention::new(b, channels, pool_divisors)?;
                let proj = Conv2d::new(b, "pam_proj", channels, channels, 1, 1, Padding::Zero(0), true);
                Some((module, proj))
            } else {
                None
            };
            let cam_proj =
                use_cam.then(|| Conv2d::new(b, "cam_proj", channels, channels, 1, 1, Padding::Zero(0), true));
            Ok(Self { pam, cam_proj })
        })
    }

    pub fn is_active(&self) -> bool {
        self.pam.is_some() || self.cam_proj.is_some()
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        match &self.pam {
            Some((p, _)) => p.validate_input(h, w),
            None => Ok(()),
        }
    }

    /// Fused attention output; `None` when both branches are disabled.
    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, f: Var<'g, T>) -> Result<Option<Var<'g, T>>> {
        let pam = match &self.pam {
            Some((module, proj)) => Some(proj.forward(s, module.forward(s, f)?)),
            None => None,
        };
        let cam = match &self.cam_proj {
            Some(proj) => Some(proj.forward(s, cam_forward(f)?)),
            None => None,
        };
        Ok(match (pam, cam) {
            (Some(p), Some(c)) => Some(p.add(c)),
            (p, c) => p.or(c),
        })
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, f: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let x = g.constant(f.to_batch());
        match self.forward(&s, x)? {
            Some(out) => Ok(FeatureMap::from_batch((*out.value()).clone())),
            None => Ok(FeatureMap(Tensor::zeros(f.tensor().shape()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_map(shape: &[usize], seed: usize) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_fn(shape, |i| (((i + seed) * 2654435761usize % 1000) as f64 / 500.0) - 1.0))
            .unwrap()
    }

    fn pam(channels: usize) -> (ParamStore<f64>, PositionAttention) {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 1, 0.5);
        let m = PositionAttention::new(&mut b, channels, &DEFAULT_POOL_DIVISORS).unwrap();
        (store, m)
    }

    #[test]
    fn pam_preserves_shape_and_gate_range() {
        let (store, m) = pam(64);
        let f = random_map(&[64, 64, 64], 3);
        let (out, gate) = m.apply(&store, &f).unwrap();
        assert_eq!(out.tensor().shape(), &[64, 64, 64]);
        assert_eq!(gate.tensor().shape(), &[1, 64, 64]);
        assert!(gate.in_open_unit_interval());
    }

    #[test]
    fn pam_zero_input_gives_half_gate() {
        let (store, m) = pam(4);
        // biases are zero-initialized, so the fused logit is exactly 0
        let f = FeatureMap::new(Tensor::zeros(&[4, 16, 16])).unwrap();
        let (out, gate) = m.apply(&store, &f).unwrap();
        assert!(gate.tensor().data().iter().all(|&v| v == 0.5));
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pam_rejects_small_maps() {
        let (store, m) = pam(2);
        let f = FeatureMap::new(Tensor::zeros(&[2, 8, 32])).unwrap();
        assert!(matches!(m.apply(&store, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_map_rejects_nan() {
        let mut t = Tensor::<f64>::zeros(&[1, 16, 16]);
        t.data_mut()[3] = f64::NAN;
        assert!(matches!(FeatureMap::new(t), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cam_single_channel_doubles_input() {
        let f = random_map(&[1, 5, 7], 11);
        let (out, x) = cam_apply(&f).unwrap();
        assert_eq!(x.tensor().data(), &[1.0]);
        for (o, i) in out.tensor().data().iter().zip(f.tensor().data()) {
            assert_eq!(*o, 2.0 * i);
        }
    }

    #[test]
    fn cam_identical_channels_is_uniform() {
        let plane: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let c = 3;
        let data: Vec<f64> = (0..c).flat_map(|_| plane.clone()).collect();
        let f = FeatureMap::new(Tensor::from_vec(&[c, 4, 4], data)).unwrap();
        let (out, x) = cam_apply(&f).unwrap();
        for &v in x.tensor().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        // mean channel equals the shared plane, so the output is 2f
        for (o, i) in out.tensor().data().iter().zip(f.tensor().data()) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_survives_huge_activations() {
        let f = FeatureMap::new(Tensor::from_fn(&[3, 4, 4], |i| 1e3 * (i as f64).cos())).unwrap();
        let (out, x) = cam_apply(&f).unwrap();
        assert!(out.tensor().is_finite());
        assert!(x.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn dual_with_zero_projections_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut b = ParamBuilder::new(&mut store, 5, 0.3);
        let d = DualAttention::new(&mut b, 3, &DEFAULT_POOL_DIVISORS, true, true).unwrap();
        for p in store.iter_mut() {
            if p.name.contains("proj") {
                p.value.data_mut().fill(0.0);
            }
        }
        let out = d.apply(&store, &random_map(&[3, 16, 16], 2)).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }
}
