//! Distribution metrics (FID, KID) over image embeddings and Pareto-front
//! selection of down-sampling scales.

use crate::error::{Error, Result};
use crate::generators::Scale;
use crate::report::Table;
use crate::scalar::Scalar;
use crate::tensor::{adaptive_bin, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 4] = b"WGF1";
/// Eigenvalues below `-EIG_FLOOR * max(1, largest eigenvalue)` signal a non-PSD product.
const EIG_FLOOR: f64 = 1e-8;

/// Embeddings `[n, d]` (row-major) tagged with the extractor that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub extractor: String,
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(extractor: impl Into<String>, n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d || d == 0 {
            return Err(Error::Shape(format!("feature data of length {} is not {} x {}", data.len(), n, d)));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(Self { extractor: extractor.into(), n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.extractor != other.extractor {
            return Err(Error::InvalidInput(format!(
                "feature extractor mismatch: `{}` vs `{}`",
                self.extractor, other.extractor
            )));
        }
        if self.d != other.d {
            return Err(Error::Shape(format!("feature dims differ: {} vs {}", self.d, other.d)));
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mu = DVector::zeros(self.d);
        for i in 0..self.n {
            for (m, &v) in mu.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mu / self.n as f64
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut c = DMatrix::zeros(self.d, self.d);
        for i in 0..self.n {
            let r = DVector::from_iterator(self.d, self.row(i).iter().zip(mu.iter()).map(|(v, m)| v - m));
            c.ger(1.0, &r, &r, 1.0);
        }
        c / (self.n as f64 - 1.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.extractor.len() + self.data.len() * 8);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.extractor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.extractor.as_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            let s = bytes.get(pos..pos + n).ok_or("truncated feature file")?;
            pos += n;
            Ok(s)
        };
        if take(4)? != FEATURE_MAGIC {
            return Err("not a feature file".into());
        }
        let id_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let extractor = String::from_utf8(take(id_len)?.to_vec()).map_err(|e| e.to_string())?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let len = n.checked_mul(d).and_then(|v| v.checked_mul(8)).ok_or("feature size overflow")?;
        let data = take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if pos != bytes.len() {
            return Err("trailing bytes after feature data".into());
        }
        Self::new(extractor, n, d, data).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::parse(path, m))
    }
}

/// Maps image batches `[N, C, H, W]` to embeddings.
pub trait FeatureExtractor<T: Scalar> {
    fn id(&self) -> String;
    fn extract(&self, images: &Tensor<T>) -> Result<FeatureSet>;
}

/// Fixed random features: average-pool to a `grid x grid` thumbnail, then
/// `tanh` of a seeded Gaussian projection. Cheap and deterministic, meant for
/// CPU tests and toy runs rather than comparison with Inception-feature scores.
#[derive(Clone, Debug)]
pub struct RandomProjectionExtractor {
    pub seed: u64,
    pub grid: usize,
    pub channels: usize,
    pub dim: usize,
    weights: Vec<f64>,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64, channels: usize, grid: usize, dim: usize) -> Self {
        let fan_in = channels * grid * grid;
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * fan_in).map(|_| dist.sample(&mut rng)).collect();
        Self { seed, grid, channels, dim, weights }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new(0, 3, 8, 64)
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomProjectionExtractor {
    fn id(&self) -> String {
        format!("random-projection-v1:seed={}:grid={}:dim={}", self.seed, self.grid, self.dim)
    }

    fn extract(&self, images: &Tensor<T>) -> Result<FeatureSet> {
        if images.rank() != 4 || images.shape()[1] != self.channels {
            return Err(Error::Shape(format!("expected [N, {}, H, W] images, got {:?}", self.channels, images.shape())));
        }
        let (n, c, h, w) = images.dims4();
        let g = self.grid;
        let fan_in = c * g * g;
        let mut out = Vec::with_capacity(n * self.dim);
        let mut pooled = vec![0.0; fan_in];
        for plane_set in images.data().chunks(c * h * w) {
            for (ci, plane) in plane_set.chunks(h * w).enumerate() {
                for gy in 0..g {
                    let (y0, y1) = adaptive_bin(gy, h, g);
                    for gx in 0..g {
                        let (x0, x1) = adaptive_bin(gx, w, g);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                s += plane[y * w + x].to_f64c();
                            }
                        }
                        pooled[(ci * g + gy) * g + gx] = s / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            for row in self.weights.chunks(fan_in) {
                out.push(row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>().tanh());
            }
        }
        FeatureSet::new(<Self as FeatureExtractor<T>>::id(self), n, self.dim, out)
    }
}

/// Principal square root of a symmetric PSD matrix.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let vals = clip_eigenvalues(&eig.eigenvalues)?;
    let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn clip_eigenvalues(vals: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = vals.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    if let Some(bad) = vals.iter().find(|&&v| v < -EIG_FLOOR * scale) {
        return Err(Error::module("metrics", format!("covariance product is not PSD (eigenvalue {:e})", bad)));
    }
    Ok(vals.map(|v| v.max(0.0)))
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `Tr((Σa Σb)^{1/2})` is evaluated as `Σ sqrt(λ)` over the eigenvalues of
/// the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    a.same_space(b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::InvalidInput("FID needs at least two samples per set".into()));
    }
    let dmu = a.mean() - b.mean();
    let (ca, cb) = (a.covariance(), b.covariance());
    let sa = sqrtm_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = clip_eigenvalues(&eig.eigenvalues)?.iter().map(|v| v.sqrt()).sum();
    let value = dmu.norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² between row sets with the cubic polynomial kernel.
pub fn mmd2_unbiased(x: &[&[f64]], y: &[&[f64]]) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidInput("MMD needs at least two samples per set".into()));
    }
    let within = |s: &[&[f64]]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(s[i], s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for xi in x {
        for yj in y {
            cross += poly_kernel(xi, yj);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * n) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidConfig {
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self { subset_size: 100, n_subsets: 100, seed: 0 }
    }
}

/// Kernel inception distance: mean and (population) standard deviation of
/// the unbiased MMD² over random subsets drawn without replacement.
pub fn kid(a: &FeatureSet, b: &FeatureSet, cfg: &KidConfig) -> Result<(f64, f64)> {
    a.same_space(b)?;
    if cfg.subset_size < 2 || cfg.n_subsets == 0 {
        return Err(Error::InvalidInput("KID needs subset_size >= 2 and at least one subset".into()));
    }
    if cfg.subset_size > a.n.min(b.n) {
        return Err(Error::InvalidInput(format!(
            "KID subset size {} exceeds set sizes {} / {}",
            cfg.subset_size, a.n, b.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vals = Vec::with_capacity(cfg.n_subsets);
    for _ in 0..cfg.n_subsets {
        let ia = sample(&mut rng, a.n, cfg.subset_size);
        let ib = sample(&mut rng, b.n, cfg.subset_size);
        let xa: Vec<&[f64]> = ia.iter().map(|i| a.row(i)).collect();
        let xb: Vec<&[f64]> = ib.iter().map(|i| b.row(i)).collect();
        vals.push(mmd2_unbiased(&xa, &xb)?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

/// One down-sampling scale with its image-quality and detection scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleCandidate {
    pub scale: Scale,
    pub fid: f64,
    pub map: f64,
}

impl ScaleCandidate {
    pub fn validate(&self) -> Result<()> {
        if !(self.fid >= 0.0) || !self.fid.is_finite() || !(0.0..=1.0).contains(&self.map) {
            return Err(Error::InvalidInput(format!("candidate {} has fid {} / mAP {}", self.scale, self.fid, self.map)));
        }
        Ok(())
    }

    /// Lower FID and higher mAP, at least as good in both and better in one.
    pub fn dominates(&self, other: &Self) -> bool {
        self.fid <= other.fid && self.map >= other.map && (self.fid < other.fid || self.map > other.map)
    }
}

/// Candidates not dominated by any other, ordered by scale (coarsest last).
pub fn pareto_front(candidates: &[ScaleCandidate]) -> Result<Vec<ScaleCandidate>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no scale candidates".into()));
    }
    candidates.iter().try_for_each(ScaleCandidate::validate)?;
    let mut front: Vec<ScaleCandidate> = candidates
        .iter()
        .filter(|c| !candidates.iter().any(|o| o.dominates(c)))
        .copied()
        .collect();
    front.sort_by(|a, b| {
        a.scale
            .denominator()
            .cmp(&b.scale.denominator())
            .then(a.fid.total_cmp(&b.fid))
            .then(b.map.total_cmp(&a.map))
    });
    Ok(front)
}

/// Reads `scale,fid,map` rows (with header).
pub fn read_candidates(path: &Path) -> Result<Vec<ScaleCandidate>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let c: ScaleCandidate = rec?;
        out.push(c);
    }
    Ok(out)
}

/// Candidate table with a Pareto-membership column.
pub fn pareto_table(candidates: &[ScaleCandidate], front: &[ScaleCandidate]) -> Table {
    let mut t = Table::new("Down-sampling scale trade-off", &["scale", "FID", "mAP", "pareto"]);
    for c in candidates {
        let on = front.iter().any(|f| f == c);
        t.push(vec![c.scale.to_string(), format!("{:.1}", c.fid), format!("{:.3}", c.map), if on { "yes" } else { "no" }.into()]);
    }
    t
}

/// One row per (dataset, method): FID and KID mean ± std.
pub fn fid_kid_table(rows: &[(String, String, f64, (f64, f64))]) -> Table {
    let mut t = Table::new("FID / KID between generated and real target-domain images", &["dataset", "method", "FID", "KID", "KID std"]);
    for (dataset, method, f, (k, ks)) in rows {
        t.push(vec![dataset.clone(), method.clone(), format!("{:.4}", f), format!("{:.6}", k), format!("{:.6}", ks)]);
    }
    t
}
