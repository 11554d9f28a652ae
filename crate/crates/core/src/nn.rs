//! Parameter storage, per-pass parameter binding and the basic layers.

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter tensors of one network (or a group of networks that are
/// optimized together).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

const BLOB_MAGIC: &[u8; 4] = b"WGP1";

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    /// Serializes names, shapes and little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        let tname = T::NAME.as_bytes();
        out.push(tname.len() as u8);
        out.extend_from_slice(tname);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("parameter blob: {}", m));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != BLOB_MAGIC {
            return Err(bad("bad magic"));
        }
        let tlen = r.take(1).ok_or_else(|| bad("truncated"))?[0] as usize;
        let tname = r.take(tlen).ok_or_else(|| bad("truncated"))?;
        if tname != T::NAME.as_bytes() {
            return Err(bad(&format!(
                "stored as {}, requested {}",
                String::from_utf8_lossy(tname),
                T::NAME
            )));
        }
        let count = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let width = std::mem::size_of::<T>();
        let mut store = Self::new();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| bad("truncated"))? as usize;
            let name = String::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated"))?.to_vec())
                .map_err(|_| bad("name is not utf-8"))?;
            let rank = r.take(1).ok_or_else(|| bad("truncated"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| bad("truncated"))? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * width).ok_or_else(|| bad("truncated"))?;
            let data = raw.chunks(width).map(T::read_le).collect();
            store.add(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Replaces values from `other`, which must have identical names and shapes.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidInput(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::InvalidInput(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
}

/// Weight initialization of a [`ParamBuilder`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, std)`.
    Normal(f64),
    /// `N(0, gain / sqrt(fan_in))`, fan-in being the product of all but the first dim.
    FanIn(f64),
}

/// Creates parameters in a store with seeded normal initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
    init: Init,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    /// `std` is the initialization standard deviation (0.02 for the GAN nets).
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, std: f64) -> Self {
        Self::with_init(store, seed, Init::Normal(std))
    }

    pub fn with_init(store: &'a mut ParamStore<T>, seed: u64, init: Init) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new(), init }
    }

    pub fn push_prefix(&mut self, p: &str) -> String {
        let old = self.prefix.clone();
        self.prefix = format!("{}{}.", self.prefix, p);
        old
    }

    pub fn restore_prefix(&mut self, old: String) {
        self.prefix = old;
    }

    /// Runs `f` with `p` appended to the name prefix.
    pub fn scoped<R>(&mut self, p: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let old = self.push_prefix(p);
        let r = f(self);
        self.restore_prefix(old);
        r
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let std = match self.init {
            Init::Normal(std) => std,
            Init::FanIn(gain) => gain / (shape[1..].iter().product::<usize>().max(1) as f64).sqrt(),
        };
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::c(dist.sample(rng)));
        self.store.add(format!("{}{}", self.prefix, name), t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(format!("{}{}", self.prefix, name), Tensor::zeros(shape))
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

/// Binds a [`ParamStore`] into a [`Graph`] for one pass.
///
/// Trainable sessions record parameters as gradient-tracked leaves; frozen
/// sessions record them as constants so no gradient is computed for them.
pub struct Session<'g, T> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
}

impl<'g, T: Scalar> Session<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, trainable: bool) -> Self {
        Self { graph, store, trainable, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn frozen(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::new(graph, store, false)
    }

    pub fn trainable(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::new(graph, store, true)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone(), self.trainable);
        bound[id.0] = Some(v);
        v
    }

    /// Extracts per-parameter gradients (indexed by [`ParamId`]).
    ///
    /// Parameters that were never used in the pass get a zero gradient.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .map(|(id, p)| {
                bound[id.0]
                    .and_then(|v| grads.take_id(v.id()))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[cout, cin, k, k]),
            bias: bias.then(|| b.zeros("bias", &[cout])),
            stride,
            padding,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (x, pad) = match self.padding {
            Padding::Zero(p) => (x, p),
            Padding::Reflect(0) => (x, 0),
            Padding::Reflect(p) => (x.reflect_pad2d(p), 0),
        };
        x.conv2d(s.param(self.weight), self.bias.map(|b| s.param(b)), self.stride, pad)
    }
}

/// Stride-2 transposed convolution doubling the spatial size (k=3, pad=1, output_pad=1).
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Deconv2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        b.scoped(name, |b| Self {
            weight: b.normal("weight", &[cin, cout, 3, 3]),
            bias: bias.then(|| b.zeros("bias", &[cout])),
        })
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(s.param(self.weight), self.bias.map(|b| s.param(b)), 2, 1, 1)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr: T::c(lr),
            beta1: T::c(beta1),
            beta2: T::c(beta2),
            eps: T::c(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as a parameter-store-shaped blob for checkpoints.
    pub fn to_store(&self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for ((_, p), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            s.add(format!("{}.m", p.name), m.clone());
            s.add(format!("{}.v", p.name), v.clone());
        }
        s
    }

    pub fn load_moments(&mut self, moments: &ParamStore<T>, step: u64) -> Result<()> {
        if moments.len() != 2 * self.m.len() {
            return Err(Error::InvalidInput("optimizer state does not match parameters".into()));
        }
        let vals: Vec<_> = moments.iter().map(|(_, p)| p.value.clone()).collect();
        for (i, pair) in vals.chunks(2).enumerate() {
            if pair[0].shape() != self.m[i].shape() || pair[1].shape() != self.v[i].shape() {
                return Err(Error::InvalidInput("optimizer moment shape mismatch".into()));
            }
            self.m[i] = pair[0].clone();
            self.v[i] = pair[1].clone();
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_byte_identical() {
        let mut store = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut store, 7, 0.02);
        Conv2d::new(&mut b, "c", 3, 4, 3, 1, Padding::Zero(1), true);
        let bytes = store.to_bytes();
        let back = ParamStore::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn blob_rejects_wrong_precision() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]));
        assert!(ParamStore::<f64>::from_bytes(&store.to_bytes()).is_err());
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]));
        let before = store.clone();
        let mut opt = Adam::new(&store, 0.0, 0.9, 0.999);
        opt.update(&mut store, &[Tensor::from_vec(&[3], vec![1.0, 2.0, -3.0])]);
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![0.0, 0.0]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        opt.update(&mut store, &[Tensor::from_vec(&[2], vec![4.0, -0.5])]);
        let w = store.get(id).data();
        assert!((w[0] + 0.1).abs() < 1e-6);
        assert!((w[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        ParamBuilder::new(&mut a, 3, 0.02).normal("w", &[10]);
        ParamBuilder::new(&mut b, 3, 0.02).normal("w", &[10]);
        assert_eq!(a, b);
    }
}
