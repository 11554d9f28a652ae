//! Multi-scale generators: a reduced-resolution branch whose deconvolved
//! features are added into the full-resolution trunk, followed by dual
//! attention, residual blocks and a tanh image head.

use crate::attention::{check_finite, DualAttention, DEFAULT_POOL_DIVISORS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Deconv2d, ParamBuilder, ParamStore, Padding, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A resize factor `1/den` with `den` a power of two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Scale {
    den: u32,
}

impl Scale {
    pub fn new(den: u32) -> Result<Self> {
        if den == 0 || !den.is_power_of_two() {
            return Err(Error::Config(format!("scale 1/{} must have a power-of-two denominator", den)));
        }
        Ok(Self { den })
    }

    pub fn denominator(self) -> u32 {
        self.den
    }

    pub fn value(self) -> f64 {
        1.0 / self.den as f64
    }

    fn log2(self) -> i32 {
        self.den.trailing_zeros() as i32
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.den)
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let den = match s.split_once('/') {
            Some((num, den)) if num.trim() == "1" => den.trim().parse::<u32>().ok(),
            Some(_) => None,
            None if s == "1" => Some(1),
            None => None,
        };
        den.ok_or_else(|| Error::Config(format!("cannot parse scale {:?}, expected 1/N", s)))
            .and_then(Scale::new)
    }
}

impl TryFrom<String> for Scale {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scale> for String {
    fn from(s: Scale) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Stride-2 convolutions between the stem and the trunk.
    pub num_downsample: usize,
    pub num_residual_blocks_g1: usize,
    pub num_residual_blocks_g2: usize,
    /// Input resize of the reduced-resolution branch.
    pub downsample_scale: Scale,
    pub use_multiscale: bool,
    pub use_pam: bool,
    pub use_cam: bool,
    pub pam_pool_divisors: Vec<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 64,
            num_downsample: 2,
            num_residual_blocks_g1: 6,
            num_residual_blocks_g2: 9,
            downsample_scale: Scale { den: 4 },
            use_multiscale: true,
            use_pam: true,
            use_cam: true,
            pam_pool_divisors: DEFAULT_POOL_DIVISORS.to_vec(),
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale profile for 64x64 toy images.
    pub fn toy() -> Self {
        Self { base_channels: 8, num_residual_blocks_g1: 2, num_residual_blocks_g2: 3, ..Self::default() }
    }

    /// Same architecture without the reduced-resolution branch.
    pub fn single_scale(&self) -> Self {
        Self { use_multiscale: false, ..self.clone() }
    }

    pub fn trunk_channels(&self) -> usize {
        self.base_channels << self.num_downsample
    }

    /// (downsampling convs, deconvolutions) of the reduced-resolution branch.
    ///
    /// Its output must land on the trunk grid, `H / 2^num_downsample`.
    pub fn g1_stages(&self) -> (usize, usize) {
        let d = self.downsample_scale.log2() - self.num_downsample as i32;
        if d >= 0 {
            (1, 1 + d as usize)
        } else {
            (1 + (-d) as usize, 1)
        }
    }

    /// Spatial dims must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        let trunk = 1usize << self.num_downsample;
        if !self.use_multiscale {
            return trunk;
        }
        let (down, _) = self.g1_stages();
        trunk.max((self.downsample_scale.den as usize) << down)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_residual_blocks_g2 == 0 || (self.use_multiscale && self.num_residual_blocks_g1 == 0) {
            return Err(Error::Config("residual block counts must be >= 1".into()));
        }
        if self.use_pam && (self.pam_pool_divisors.is_empty() || self.pam_pool_divisors.contains(&0)) {
            return Err(Error::Config("position attention needs positive pool divisors".into()));
        }
        Ok(())
    }

    /// Smallest `(H, W) >= (h, w)` accepted by [`Self::validate_input`].
    pub fn fit_input(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.required_multiple();
        let need = if self.use_pam {
            self.pam_pool_divisors.iter().copied().max().unwrap_or(1) << self.num_downsample
        } else {
            1
        };
        let fit = |v: usize| v.max(need).div_ceil(m) * m;
        (fit(h), fit(w))
    }

    /// Checks that an `h x w` input fits every stage of this architecture.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "generator input {}x{} must be a multiple of {} (scale {}, {} trunk downsamples)",
                h, w, m, self.downsample_scale, self.num_downsample
            )));
        }
        if self.use_pam {
            let need = self.pam_pool_divisors.iter().copied().max().unwrap_or(1) << self.num_downsample;
            if h < need || w < need {
                return Err(Error::Shape(format!(
                    "generator input {}x{} too small for position attention: need >= {}",
                    h, w, need
                )));
            }
        }
        Ok(())
    }
}

/// Two 3x3 convs with instance norm and a skip connection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, ch: usize) -> Self {
        b.scoped(name, |b| Self {
            conv1: Conv2d::new(b, "conv1", ch, ch, 3, 1, Padding::Reflect(1), false),
            conv2: Conv2d::new(b, "conv2", ch, ch, 3, 1, Padding::Reflect(1), false),
        })
    }

    fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.conv1.forward(s, x).instance_norm(IN_EPS).relu();
        let h = self.conv2.forward(s, h).instance_norm(IN_EPS);
        x.add(h)
    }
}

const IN_EPS: f64 = 1e-5;

fn conv_in_relu<'g, T: Scalar>(c: &Conv2d, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
    c.forward(s, x).instance_norm(IN_EPS).relu()
}

fn deconv_in_relu<'g, T: Scalar>(c: &Deconv2d, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
    c.forward(s, x).instance_norm(IN_EPS).relu()
}

/// The reduced-resolution branch embedded into the trunk.
#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub divisor: usize,
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub blocks: Vec<ResBlock>,
    pub up: Vec<Deconv2d>,
}

impl GlobalBranch {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &GeneratorConfig) -> Self {
        let (n_down, n_up) = cfg.g1_stages();
        let base = cfg.base_channels;
        b.scoped("g1", |b| {
            let stem = Conv2d::new(b, "stem", cfg.image_channels, base, 7, 1, Padding::Reflect(3), false);
            let down = (0..n_down)
                .map(|i| Conv2d::new(b, &format!("down{}", i), base << i, base << (i + 1), 3, 2, Padding::Zero(1), false))
                .collect();
            let width = base << n_down;
            let blocks = (0..cfg.num_residual_blocks_g1).map(|i| ResBlock::new(b, &format!("res{}", i), width)).collect();
            let out = cfg.trunk_channels();
            let up = (0..n_up)
                .map(|i| {
                    let cin = if i == 0 { width } else { (width >> i).max(1) };
                    let cout = if i + 1 == n_up { out } else { (width >> (i + 1)).max(1) };
                    Deconv2d::new(b, &format!("up{}", i), cin, cout, false)
                })
                .collect();
            Self { divisor: cfg.downsample_scale.den as usize, stem, down, blocks, up }
        })
    }

    fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        let mut f = if self.divisor == 1 { x } else { x.adaptive_avg_pool2d(h / self.divisor, w / self.divisor) };
        f = conv_in_relu(&self.stem, s, f);
        for c in &self.down {
            f = conv_in_relu(c, s, f);
        }
        for blk in &self.blocks {
            f = blk.forward(s, f);
        }
        for u in &self.up {
            f = deconv_in_relu(u, s, f);
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub g1: Option<GlobalBranch>,
    pub attention: DualAttention,
    pub blocks: Vec<ResBlock>,
    pub up: Vec<Deconv2d>,
    pub head: Conv2d,
}

impl Generator {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_channels;
        let nd = cfg.num_downsample;
        let trunk = cfg.trunk_channels();
        let stem = Conv2d::new(b, "stem", cfg.image_channels, base, 7, 1, Padding::Reflect(3), false);
        let down = (0..nd)
            .map(|i| Conv2d::new(b, &format!("down{}", i), base << i, base << (i + 1), 3, 2, Padding::Zero(1), false))
            .collect();
        let g1 = cfg.use_multiscale.then(|| GlobalBranch::new(b, cfg));
        let attention = DualAttention::new(b, trunk, &cfg.pam_pool_divisors, cfg.use_pam, cfg.use_cam)?;
        let blocks = (0..cfg.num_residual_blocks_g2).map(|i| ResBlock::new(b, &format!("res{}", i), trunk)).collect();
        let up = (0..nd)
            .map(|i| Deconv2d::new(b, &format!("up{}", i), trunk >> i, trunk >> (i + 1), false))
            .collect();
        let head = Conv2d::new(b, "head", base, cfg.image_channels, 7, 1, Padding::Reflect(3), true);
        Ok(Self { cfg: cfg.clone(), stem, down, g1, attention, blocks, up, head })
    }

    fn check_image<T: Scalar>(&self, x: Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.cfg.image_channels {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, H, W], got {:?}",
                self.cfg.image_channels, shape
            )));
        }
        self.cfg.validate_input(shape[2], shape[3])?;
        check_finite(x, "generator input")
    }

    /// Feature of the reduced-resolution branch after its deconvolutions.
    pub fn g1_forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_image(x)?;
        let g1 = self
            .g1
            .as_ref()
            .ok_or_else(|| Error::Config("generator was built without the multi-scale branch".into()))?;
        Ok(g1.forward(s, x))
    }

    /// Trunk feature after the stem and downsampling convolutions.
    pub fn trunk_input<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut f = conv_in_relu(&self.stem, s, x);
        for c in &self.down {
            f = conv_in_relu(c, s, f);
        }
        f
    }

    /// Full translation of a `[N, C, H, W]` batch in `[-1, 1]`.
    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_image(x)?;
        let mut f = self.trunk_input(s, x);
        if let Some(g1) = &self.g1 {
            f = f.add(g1.forward(s, x));
        }
        if let Some(a) = self.attention.forward(s, f)? {
            f = f.add(a);
        }
        for blk in &self.blocks {
            f = blk.forward(s, f);
        }
        for u in &self.up {
            f = deconv_in_relu(u, s, f);
        }
        Ok(self.head.forward(s, f).tanh())
    }

    /// Runs the generator outside any training graph.
    pub fn translate<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let s = Session::frozen(&g, store);
        let y = self.forward(&s, g.constant(images.clone()))?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}

/// Normal-to-adverse (multi-scale) and adverse-to-normal (single-scale)
/// generators sharing one parameter store.
#[derive(Clone, Debug)]
pub struct GeneratorPair<T> {
    pub normal_to_adverse: Generator,
    pub adverse_to_normal: Generator,
    pub store: ParamStore<T>,
}

pub const FORWARD_PREFIX: &str = "n2a.";
pub const BACKWARD_PREFIX: &str = "a2n.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    NormalToAdverse,
    AdverseToNormal,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal-to-adverse" => Ok(Direction::NormalToAdverse),
            "adverse-to-normal" => Ok(Direction::AdverseToNormal),
            other => Err(Error::Config(format!(
                "unknown direction {:?} (expected normal-to-adverse or adverse-to-normal)",
                other
            ))),
        }
    }
}

impl<T: Scalar> GeneratorPair<T> {
    /// Builds the asymmetric pair; the backward generator may not be multi-scale.
    pub fn build(cfg_forward: &GeneratorConfig, cfg_backward: &GeneratorConfig, seed: u64) -> Result<Self> {
        if cfg_backward.use_multiscale {
            return Err(Error::Config(
                "the adverse-to-normal generator must be single-scale (use_multiscale = false)".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, seed, 0.02);
        let normal_to_adverse = b.scoped("n2a", |b| Generator::new(b, cfg_forward))?;
        let adverse_to_normal = b.scoped("a2n", |b| Generator::new(b, cfg_backward))?;
        Ok(Self { normal_to_adverse, adverse_to_normal, store })
    }

    pub fn generator(&self, d: Direction) -> &Generator {
        match d {
            Direction::NormalToAdverse => &self.normal_to_adverse,
            Direction::AdverseToNormal => &self.adverse_to_normal,
        }
    }

    pub fn forward_param_count(&self) -> usize {
        self.store.num_scalars_with_prefix(FORWARD_PREFIX)
    }

    pub fn backward_param_count(&self) -> usize {
        self.store.num_scalars_with_prefix(BACKWARD_PREFIX)
    }

    pub fn translate(&self, d: Direction, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.generator(d).translate(&self.store, images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image(seed: usize) -> Tensor<f32> {
        Tensor::from_fn(&[1, 3, 64, 64], |i| (((i * 31 + seed) % 97) as f32 / 48.5) - 1.0)
    }

    #[test]
    fn fit_input_is_accepted() {
        let cfg = GeneratorConfig::toy();
        for (h, w) in [(64, 64), (50, 70), (1, 1), (100, 33)] {
            let (fh, fw) = cfg.fit_input(h, w);
            assert!(fh >= h && fw >= w);
            cfg.validate_input(fh, fw).unwrap();
        }
        assert_eq!(cfg.fit_input(64, 64), (64, 64));
    }

    #[test]
    fn scale_parsing() {
        assert_eq!("1/4".parse::<Scale>().unwrap().denominator(), 4);
        assert_eq!("1".parse::<Scale>().unwrap().denominator(), 1);
        assert!("1/3".parse::<Scale>().is_err());
        assert!("2/4".parse::<Scale>().is_err());
    }

    #[test]
    fn g1_stage_counts() {
        let mut cfg = GeneratorConfig::default();
        for (den, want) in [(2, (2, 1)), (4, (1, 1)), (8, (1, 2)), (1, (3, 1))] {
            cfg.downsample_scale = Scale::new(den).unwrap();
            assert_eq!(cfg.g1_stages(), want, "scale 1/{}", den);
        }
    }

    #[test]
    fn g1_tap_matches_trunk_at_256() {
        let cfg = GeneratorConfig { base_channels: 4, num_residual_blocks_g1: 1, num_residual_blocks_g2: 1, ..Default::default() };
        let pair = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 1).unwrap();
        let g = Graph::new();
        let s = Session::frozen(&g, &pair.store);
        let x = g.constant(Tensor::from_fn(&[1, 3, 256, 256], |i| ((i % 13) as f32 / 6.5) - 1.0));
        let gen = &pair.normal_to_adverse;
        let tap = gen.g1_forward(&s, x).unwrap();
        let trunk = gen.trunk_input(&s, x);
        assert_eq!(tap.shape(), trunk.shape());
        assert_eq!(tap.shape(), vec![1, 16, 64, 64]);
    }

    #[test]
    fn output_geometry_and_range() {
        let cfg = GeneratorConfig::toy();
        let pair = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 3).unwrap();
        for d in [Direction::NormalToAdverse, Direction::AdverseToNormal] {
            let y = pair.translate(d, &toy_image(1)).unwrap();
            assert_eq!(y.shape(), &[1, 3, 64, 64]);
            assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = GeneratorConfig::toy();
        let a = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 9).unwrap();
        let b = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 9).unwrap();
        let x = toy_image(5);
        let ya = a.translate(Direction::NormalToAdverse, &x).unwrap();
        let yb = b.translate(Direction::NormalToAdverse, &x).unwrap();
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn forward_has_more_parameters() {
        let cfg = GeneratorConfig::toy();
        let pair = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 0).unwrap();
        assert!(pair.forward_param_count() > pair.backward_param_count());
    }

    #[test]
    fn backward_multiscale_is_rejected() {
        let cfg = GeneratorConfig::toy();
        assert!(matches!(GeneratorPair::<f32>::build(&cfg, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let cfg = GeneratorConfig::toy();
        let pair = GeneratorPair::<f32>::build(&cfg, &cfg.single_scale(), 0).unwrap();
        let err = pair.translate(Direction::NormalToAdverse, &Tensor::zeros(&[1, 3, 60, 64])).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{}", err);
    }

    #[test]
    fn ablated_pair_is_plain_resnet() {
        let cfg = GeneratorConfig { use_pam: false, use_cam: false, ..GeneratorConfig::toy() };
        let pair = GeneratorPair::<f32>::build(&cfg.single_scale(), &cfg.single_scale(), 0).unwrap();
        assert!(!pair.normal_to_adverse.attention.is_active());
        assert!(pair.normal_to_adverse.g1.is_none());
        assert_eq!(pair.forward_param_count(), pair.backward_param_count());
        assert!(pair.store.iter().all(|(_, p)| !p.name.contains("attn") && !p.name.contains("g1")));
    }
}
