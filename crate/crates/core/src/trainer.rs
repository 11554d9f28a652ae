//! Alternating critic/generator optimization, checkpoints and resume.

use crate::autograd::Graph;
use crate::data::{load_pair_batch, CropPolicy, DomainDataset, ImageBatch};
use crate::detection::FrozenDetector;
use crate::discriminators::{CriticConfig, CriticPair};
use crate::error::{Error, Result};
use crate::generators::{GeneratorConfig, GeneratorPair};
use crate::losses::{adversarial_loss, cycle_loss, detection_loss, total_loss, AdversarialRole, LossReport, LossWeights};
use crate::nn::{Adam, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_pam: bool,
    pub use_cam: bool,
    pub use_multiscale: bool,
    pub use_detection_loss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_pam: true, use_cam: true, use_multiscale: true, use_detection_loss: true }
    }
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no-pam", "no-cam", "no-multiscale", "no-det"];

    /// Turns off one component by its CLI name (`no-pam`, `no-cam`, `no-multiscale`, `no-det`).
    pub fn disable(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no-pam" => self.use_pam = false,
            "no-cam" => self.use_cam = false,
            "no-multiscale" => self.use_multiscale = false,
            "no-det" => self.use_detection_loss = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {:?} (expected one of {})",
                    other,
                    Self::FLAGS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub loss_weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: only the final one).
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub crop: CropPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 1,
            iterations: 0,
            loss_weights: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 0,
            checkpoint_every: 1000,
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            crop: CropPolicy::street(),
        }
    }
}

impl TrainConfig {
    /// Small networks and whole-image crops for 64x64 toy data.
    pub fn toy(iterations: u64) -> Self {
        Self {
            iterations,
            checkpoint_every: 500,
            generator: GeneratorConfig::toy(),
            critic: CriticConfig::toy(),
            crop: CropPolicy::toy(64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss_weights.validate()?;
        self.generator_configs().0.validate()?;
        Ok(())
    }

    /// Forward and backward generator configs with the ablation applied.
    pub fn generator_configs(&self) -> (GeneratorConfig, GeneratorConfig) {
        let fwd = GeneratorConfig {
            use_pam: self.generator.use_pam && self.ablation.use_pam,
            use_cam: self.generator.use_cam && self.ablation.use_cam,
            use_multiscale: self.generator.use_multiscale && self.ablation.use_multiscale,
            ..self.generator.clone()
        };
        let bwd = fwd.single_scale();
        (fwd, bwd)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// True when `other` trains the same model on the same stream and only
    /// the run length or checkpoint cadence differ.
    fn resumable_as(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self { iterations: 0, checkpoint_every: 0, ..c.clone() };
        strip(self) == strip(other)
    }
}

/// Seed of the data draw for one iteration, independent of earlier draws so
/// that resumed runs see the same batches.
pub fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(iteration))
}

const CRITIC_SEED_OFFSET: u64 = 0x00c1_7e5e;

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub cfg: TrainConfig,
    pub generators: GeneratorPair<T>,
    pub critics: CriticPair<T>,
    pub gen_opt: Adam<T>,
    pub critic_opt: Adam<T>,
    /// Completed steps.
    pub iteration: u64,
    /// Mean LossReport over all completed steps.
    pub running: LossReport,
}

/// Per-parameter generator gradients and the loss report of one evaluation.
pub struct GeneratorGradients<T> {
    pub grads: Vec<Tensor<T>>,
    pub report: LossReport,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    precision: String,
    iteration: u64,
    gen_adam_step: u64,
    critic_adam_step: u64,
    running: LossReport,
    config: TrainConfig,
}

const META_FILE: &str = "checkpoint.toml";
const GEN_FILE: &str = "generators.bin";
const CRITIC_FILE: &str = "critics.bin";
const GEN_ADAM_FILE: &str = "generators.adam.bin";
const CRITIC_ADAM_FILE: &str = "critics.adam.bin";

fn all_finite<T: Scalar>(ts: &[Tensor<T>]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (fwd, bwd) = cfg.generator_configs();
        let generators = GeneratorPair::build(&fwd, &bwd, cfg.seed)?;
        let critics = CriticPair::build(&cfg.critic, cfg.seed ^ CRITIC_SEED_OFFSET)?;
        let gen_opt = Adam::new(&generators.store, cfg.lr, cfg.beta1, cfg.beta2);
        let critic_opt = Adam::new(&critics.store, cfg.lr, cfg.beta1, cfg.beta2);
        Ok(Self { cfg: cfg.clone(), generators, critics, gen_opt, critic_opt, iteration: 0, running: LossReport::default() })
    }

    fn check_batch(&self, x: &ImageBatch<T>, y: &Tensor<T>) -> Result<()> {
        if x.pixels.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "source batch {:?} and target batch {:?} differ",
                x.pixels.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    /// Critic loss of both directions on detached fakes, and its gradients.
    fn critic_gradients(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        y: &Tensor<T>,
        fake_x: &Tensor<T>,
        fake_y: &Tensor<T>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let graph = Graph::new();
        let s = Session::trainable(&graph, store);
        let d_adv = &self.critics.adverse;
        let d_norm = &self.critics.normal;
        let adv = adversarial_loss(
            Some(d_adv.forward(&s, graph.constant(y.clone()))?),
            d_adv.forward(&s, graph.constant(fake_y.clone()))?,
            AdversarialRole::Critic,
        )?;
        let norm = adversarial_loss(
            Some(d_norm.forward(&s, graph.constant(x.clone()))?),
            d_norm.forward(&s, graph.constant(fake_x.clone()))?,
            AdversarialRole::Critic,
        )?;
        let loss = adv.add(norm);
        let value = loss.item().to_f64c();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("critic loss ({})", value)));
        }
        let mut g = graph.backward(loss);
        Ok((value, s.gradients(&mut g)))
    }

    /// Generator objective `k1·det + k2·adv + k3·cyc` and its gradients.
    ///
    /// With `step_critics` the critics first take one step on the detached
    /// translations of this pass and the objective is scored by the updated
    /// critics, which are returned alongside (uncommitted).
    fn generator_pass(
        &self,
        x: &ImageBatch<T>,
        y: &Tensor<T>,
        detector: Option<&dyn FrozenDetector<T>>,
        weights: &LossWeights,
        step_critics: bool,
    ) -> Result<(GeneratorGradients<T>, Option<(ParamStore<T>, Adam<T>)>)> {
        let detector = match (self.cfg.ablation.use_detection_loss, detector) {
            (true, None) => {
                return Err(Error::Config("detection loss is enabled but no detector was supplied".into()))
            }
            (true, Some(d)) => Some(d),
            (false, _) => None,
        };
        let graph = Graph::new();
        let gs = Session::trainable(&graph, &self.generators.store);
        let g = &self.generators.normal_to_adverse;
        let f = &self.generators.adverse_to_normal;
        let xv = graph.constant(x.pixels.clone());
        let yv = graph.constant(y.clone());
        let fake_y = g.forward(&gs, xv)?;
        let fake_x = f.forward(&gs, yv)?;
        let updated = if step_critics {
            let (_, grads) = self.critic_gradients(&self.critics.store, &x.pixels, y, &fake_x.value(), &fake_y.value())?;
            if !all_finite(&grads) {
                return Err(Error::NonFinite("critic gradients".into()));
            }
            let mut store = self.critics.store.clone();
            let mut opt = self.critic_opt.clone();
            opt.update(&mut store, &grads);
            Some((store, opt))
        } else {
            None
        };
        let report;
        let grads;
        {
            let critic_store = updated.as_ref().map_or(&self.critics.store, |u| &u.0);
            let cs = Session::frozen(&graph, critic_store);
            let rec_x = f.forward(&gs, fake_y)?;
            let rec_y = g.forward(&gs, fake_x)?;
            let adv = adversarial_loss(None, self.critics.adverse.forward(&cs, fake_y)?, AdversarialRole::Generator)?
                .add(adversarial_loss(None, self.critics.normal.forward(&cs, fake_x)?, AdversarialRole::Generator)?);
            let cyc = cycle_loss(xv, rec_x, yv, rec_y)?;
            let det = match detector {
                Some(d) => {
                    let labels = x
                        .labels
                        .as_deref()
                        .ok_or_else(|| Error::InvalidInput("detection loss needs labeled source images".into()))?;
                    let maps = d.dense(&graph, fake_y)?;
                    Some(detection_loss(&maps, labels)?)
                }
                None => None,
            };
            let (total, r) = total_loss(adv, cyc, det.as_ref(), weights)?;
            if !r.total.is_finite() {
                return Err(Error::NonFinite(format!("total generator loss ({})", r.total)));
            }
            let mut g = graph.backward(total);
            grads = gs.gradients(&mut g);
            report = r;
        }
        if !all_finite(&grads) {
            return Err(Error::NonFinite("generator gradients".into()));
        }
        Ok((GeneratorGradients { grads, report }, updated))
    }

    /// Generator gradients at the current parameters under `weights`,
    /// without updating anything.
    pub fn generator_gradients(
        &self,
        x: &ImageBatch<T>,
        y: &Tensor<T>,
        detector: Option<&dyn FrozenDetector<T>>,
        weights: &LossWeights,
    ) -> Result<GeneratorGradients<T>> {
        self.check_batch(x, y)?;
        Ok(self.generator_pass(x, y, detector, weights, false)?.0)
    }

    /// Critic loss and gradients on the current generators' translations.
    pub fn critic_step_gradients(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let fake_y = self.generators.translate(crate::generators::Direction::NormalToAdverse, x)?;
        let fake_x = self.generators.translate(crate::generators::Direction::AdverseToNormal, y)?;
        self.critic_gradients(&self.critics.store, x, y, &fake_x, &fake_y)
    }

    /// One alternating update: critics first, then generators against the
    /// updated critics.
    ///
    /// On error nothing is modified.
    pub fn train_step(
        &mut self,
        x: &ImageBatch<T>,
        y: &Tensor<T>,
        detector: Option<&dyn FrozenDetector<T>>,
    ) -> Result<LossReport> {
        self.check_batch(x, y)?;
        let weights = self.cfg.loss_weights.clone();
        let (gen, updated) = self.generator_pass(x, y, detector, &weights, true)?;
        let (critic_store, critic_opt) = updated.expect("critics stepped");
        self.gen_opt.update(&mut self.generators.store, &gen.grads);
        self.critics.store = critic_store;
        self.critic_opt = critic_opt;
        self.iteration += 1;
        let n = self.iteration as f64;
        let mut running = self.running.values();
        for (r, v) in running.iter_mut().zip(gen.report.values()) {
            *r += (v - *r) / n;
        }
        let [total, det, adv, cyc, det_ciou, det_cls, det_conf] = running;
        self.running = LossReport { total, det, adv, cyc, det_ciou, det_cls, det_conf };
        Ok(gen.report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            precision: T::NAME.to_string(),
            iteration: self.iteration,
            gen_adam_step: self.gen_opt.step,
            critic_adam_step: self.critic_opt.step,
            running: self.running,
            config: self.cfg.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        self.generators.store.save(&dir.join(GEN_FILE))?;
        self.critics.store.save(&dir.join(CRITIC_FILE))?;
        self.gen_opt.to_store(&self.generators.store).save(&dir.join(GEN_ADAM_FILE))?;
        self.critic_opt.to_store(&self.critics.store).save(&dir.join(CRITIC_ADAM_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        if meta.precision != T::NAME {
            return Err(Error::InvalidInput(format!(
                "checkpoint {} holds {} parameters, expected {}",
                dir.display(),
                meta.precision,
                T::NAME
            )));
        }
        let mut state = Self::new(&meta.config)?;
        state.generators.store.copy_from(&ParamStore::load(&dir.join(GEN_FILE))?)?;
        state.critics.store.copy_from(&ParamStore::load(&dir.join(CRITIC_FILE))?)?;
        state.gen_opt.load_moments(&ParamStore::load(&dir.join(GEN_ADAM_FILE))?, meta.gen_adam_step)?;
        state.critic_opt.load_moments(&ParamStore::load(&dir.join(CRITIC_ADAM_FILE))?, meta.critic_adam_step)?;
        state.iteration = meta.iteration;
        state.running = meta.running;
        Ok(state)
    }
}

/// Options of [`run_training_with`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from `out/checkpoints/latest` when it exists.
    pub resume: bool,
    /// Stop after this many completed iterations without a final checkpoint
    /// (simulates an interrupted run).
    pub stop_after: Option<u64>,
}

pub const LOSS_LOG: &str = "loss_log.csv";
const LATEST: &str = "latest";

pub fn checkpoint_dir(out: &Path, iteration: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{:06}", iteration))
}

/// Checkpoint directory named by `out/checkpoints/latest`, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let p = out.join("checkpoints").join(LATEST);
    match fs::read_to_string(&p) {
        Ok(name) => Ok(Some(out.join("checkpoints").join(name.trim()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(&p, e)),
    }
}

fn save_checkpoint<T: Scalar>(state: &TrainState<T>, out: &Path) -> Result<PathBuf> {
    let dir = checkpoint_dir(out, state.iteration);
    state.save(&dir)?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let p = out.join("checkpoints").join(LATEST);
    fs::write(&p, name).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    iteration: u64,
    total: f64,
    det: f64,
    adv: f64,
    cyc: f64,
    det_ciou: f64,
    det_cls: f64,
    det_conf: f64,
}

impl LogRow {
    fn new(iteration: u64, r: &LossReport) -> Self {
        Self {
            iteration,
            total: r.total,
            det: r.det,
            adv: r.adv,
            cyc: r.cyc,
            det_ciou: r.det_ciou,
            det_cls: r.det_cls,
            det_conf: r.det_conf,
        }
    }

    fn report(&self) -> LossReport {
        LossReport {
            total: self.total,
            det: self.det,
            adv: self.adv,
            cyc: self.cyc,
            det_ciou: self.det_ciou,
            det_cls: self.det_cls,
            det_conf: self.det_conf,
        }
    }
}

/// Reads a loss log as `(iteration, report)` rows.
pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<LogRow>().map(|row| row.map(|row| (row.iteration, row.report())).map_err(Error::from)).collect()
}

fn open_log(path: &Path, keep_until: u64) -> Result<csv::Writer<fs::File>> {
    let kept = if keep_until > 0 && path.exists() {
        read_loss_log(path)?.into_iter().filter(|(it, _)| *it <= keep_until).collect()
    } else {
        Vec::new()
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(std::iter::once("iteration").chain(LossReport::FIELDS))?;
    for (it, r) in &kept {
        w.serialize(LogRow::new(*it, r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(w)
}

/// Trains for `cfg.iterations` steps, writing `out/loss_log.csv` and
/// checkpoints under `out/checkpoints/`. Returns the final checkpoint.
pub fn run_training<T: Scalar>(
    cfg: &TrainConfig,
    src: &DomainDataset,
    tgt: &DomainDataset,
    detector: Option<&dyn FrozenDetector<T>>,
    out: &Path,
) -> Result<PathBuf> {
    run_training_with(cfg, src, tgt, detector, out, &RunOptions::default(), &mut |_, _| {})
}

/// [`run_training`] with resume/stop control and a per-step callback.
pub fn run_training_with<T: Scalar>(
    cfg: &TrainConfig,
    src: &DomainDataset,
    tgt: &DomainDataset,
    detector: Option<&dyn FrozenDetector<T>>,
    out: &Path,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(u64, &LossReport),
) -> Result<PathBuf> {
    cfg.validate()?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidInput("source and target datasets must be non-empty".into()));
    }
    if cfg.ablation.use_detection_loss {
        if detector.is_none() {
            return Err(Error::Config("detection loss is enabled but no detector is available".into()));
        }
        if !src.is_labeled() {
            return Err(Error::InvalidInput("detection loss needs a labeled source dataset".into()));
        }
    }
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let resumed = match (opts.resume, latest_checkpoint(out)?) {
        (true, Some(dir)) => Some(TrainState::<T>::load(&dir)?),
        _ => None,
    };
    let mut state = match resumed {
        Some(mut s) => {
            if !s.cfg.resumable_as(cfg) {
                return Err(Error::Config(
                    "checkpoint config differs from the requested run beyond iterations/checkpoint_every".into(),
                ));
            }
            s.cfg = cfg.clone();
            s
        }
        None => {
            let s = TrainState::<T>::new(cfg)?;
            save_checkpoint(&s, out)?;
            s
        }
    };
    let log_path = out.join(LOSS_LOG);
    let mut log = open_log(&log_path, state.iteration)?;
    let mut last = checkpoint_dir(out, state.iteration);
    while state.iteration < cfg.iterations {
        if opts.stop_after.is_some_and(|s| state.iteration >= s) {
            return Ok(last);
        }
        let (x, y) = load_pair_batch::<T>(src, tgt, &cfg.crop, cfg.batch_size, iteration_seed(cfg.seed, state.iteration))?;
        let report = state.train_step(&x, &y.pixels, detector)?;
        log.serialize(LogRow::new(state.iteration, &report))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        on_step(state.iteration, &report);
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            last = save_checkpoint(&state, out)?;
        }
    }
    if !checkpoint_dir(out, state.iteration).join(META_FILE).exists() {
        last = save_checkpoint(&state, out)?;
    }
    Ok(last)
}
