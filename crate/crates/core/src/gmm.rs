//! Diagonal-covariance Gaussian mixtures: density, k-means++ initialization,
//! EM training and mean-only MAP adaptation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::math::{log_sum_exp, NormalSampler, LN_2PI};
use crate::persist::{BinReader, BinWriter, Provenance};

const GMM_MAGIC: &[u8; 4] = b"FVCG";
/// Frames per E-step work unit. Partial sums are merged in chunk order so the
/// result does not depend on the thread count.
pub const CHUNK_FRAMES: usize = 512;
const EMPTY_COUNT: f64 = 1e-6;
const MIN_VARIANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    /// `ln w_g - 0.5 * (M ln 2pi + sum ln var)` per component.
    log_consts: Vec<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means.first().map_or(0, |m| m.len());
        Self::from_flat(
            weights,
            means.concat(),
            variances.concat(),
            dim,
        )
    }

    pub fn from_flat(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let g = weights.len();
        if g == 0 || dim == 0 {
            return Err(Error::InvalidModel("empty mixture".into()));
        }
        if means.len() != g * dim || variances.len() != g * dim {
            return Err(Error::InvalidModel("parameter shapes disagree".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidModel("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!("weights sum to {total}")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidModel("non-positive variance".into()));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidModel("non-finite mean".into()));
        }
        let mut gmm = DiagonalGmm {
            weights,
            means,
            variances,
            dim,
            log_consts: Vec::new(),
        };
        gmm.refresh();
        Ok(gmm)
    }

    fn refresh(&mut self) {
        self.log_consts = (0..self.components())
            .map(|g| {
                let log_det: f64 = self.variance(g).iter().map(|v| v.ln()).sum();
                self.weights[g].ln() - 0.5 * (self.dim as f64 * LN_2PI + log_det)
            })
            .collect();
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, g: usize) -> &[f64] {
        &self.means[g * self.dim..(g + 1) * self.dim]
    }

    pub fn variance(&self, g: usize) -> &[f64] {
        &self.variances[g * self.dim..(g + 1) * self.dim]
    }

    /// Concatenated component means.
    pub fn supervector(&self) -> &[f64] {
        &self.means
    }

    pub fn variances_flat(&self) -> &[f64] {
        &self.variances
    }

    pub fn same_shape(&self, other: &DiagonalGmm) -> bool {
        self.components() == other.components() && self.dim == other.dim
    }

    /// `ln w_g + ln N(x; mu_g, Sigma_g)` for every component, written to `out`.
    pub fn weighted_component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        for (g, o) in out.iter_mut().enumerate() {
            let mean = self.mean(g);
            let var = self.variance(g);
            let mut quad = 0.0;
            for d in 0..self.dim {
                let diff = x[d] - mean[d];
                quad += diff * diff / var[d];
            }
            *o = self.log_consts[g] - 0.5 * quad;
        }
    }

    /// Natural-log mixture density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut buf = vec![0.0; self.components()];
        self.weighted_component_log_densities(x, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    /// Posterior component probabilities for one frame, and the frame's log-density.
    pub fn posteriors(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.weighted_component_log_densities(x, out);
        let total = log_sum_exp(out);
        for v in out.iter_mut() {
            *v = (*v - total).exp();
        }
        total
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let mut w = BinWriter::new(GMM_MAGIC);
        w.u64(self.components() as u64)
            .u64(self.dim as u64)
            .f64s(&self.weights)
            .f64s(&self.means)
            .f64s(&self.variances)
            .provenance(provenance);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let mut r = BinReader::open(path, GMM_MAGIC)?;
        let g = r.dim()?;
        let m = r.dim()?;
        let weights = r.f64s(g)?;
        let means = r.f64s(g * m)?;
        let variances = r.f64s(g * m)?;
        let prov = r.provenance()?;
        r.finish()?;
        let gmm = Self::from_flat(weights, means, variances, m)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok((gmm, prov))
    }
}

/// Per-frame posteriors; rows sum to one.
#[derive(Clone, Debug)]
pub struct Responsibilities {
    gamma: Vec<f64>,
    components: usize,
}

impl Responsibilities {
    pub fn compute(gmm: &DiagonalGmm, data: &FeatureMatrix) -> Result<Self> {
        check_dim(gmm, data)?;
        let g = gmm.components();
        let mut gamma = vec![0.0; data.frames() * g];
        gamma
            .par_chunks_mut(g)
            .zip(data.as_flat().par_chunks(data.dims()))
            .for_each(|(out, x)| {
                gmm.posteriors(x, out);
            });
        Ok(Responsibilities { gamma, components: g })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.components..(i + 1) * self.components]
    }

    pub fn frames(&self) -> usize {
        self.gamma.len() / self.components
    }
}

fn check_dim(gmm: &DiagonalGmm, data: &FeatureMatrix) -> Result<()> {
    if data.dims() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            got: data.dims(),
        });
    }
    Ok(())
}

/// Zeroth, first and (optionally) second order sums of responsibilities.
#[derive(Clone, Debug)]
pub(crate) struct SufficientStats {
    pub counts: Vec<f64>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub log_likelihood: f64,
    pub frame_log_likelihoods: Vec<f64>,
}

impl SufficientStats {
    fn zeros(g: usize, m: usize, second: bool) -> Self {
        SufficientStats {
            counts: vec![0.0; g],
            first: vec![0.0; g * m],
            second: if second { vec![0.0; g * m] } else { Vec::new() },
            log_likelihood: 0.0,
            frame_log_likelihoods: Vec::new(),
        }
    }

    fn merge(&mut self, other: SufficientStats) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            *a += b;
        }
        self.log_likelihood += other.log_likelihood;
        self.frame_log_likelihoods.extend(other.frame_log_likelihoods);
    }
}

pub(crate) fn accumulate(gmm: &DiagonalGmm, data: &FeatureMatrix, second: bool) -> Result<SufficientStats> {
    check_dim(gmm, data)?;
    let (g, m) = (gmm.components(), gmm.dim());
    let partials: Vec<SufficientStats> = data
        .as_flat()
        .par_chunks(CHUNK_FRAMES * m)
        .map(|chunk| {
            let mut acc = SufficientStats::zeros(g, m, second);
            let mut post = vec![0.0; g];
            for x in chunk.chunks_exact(m) {
                let ll = gmm.posteriors(x, &mut post);
                acc.log_likelihood += ll;
                acc.frame_log_likelihoods.push(ll);
                for (c, &p) in post.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    acc.counts[c] += p;
                    let f = &mut acc.first[c * m..(c + 1) * m];
                    for d in 0..m {
                        f[d] += p * x[d];
                    }
                    if second {
                        let s = &mut acc.second[c * m..(c + 1) * m];
                        for d in 0..m {
                            s[d] += p * x[d] * x[d];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = SufficientStats::zeros(g, m, second);
    for p in partials {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub num_components: usize,
    pub max_iterations: usize,
    /// Stop when the mean per-frame log-likelihood improves by less than this.
    pub threshold: f64,
    pub variance_floor_factor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            num_components: 1024,
            max_iterations: 100,
            threshold: 1e-5,
            variance_floor_factor: 1e-3,
            seed: 0,
        }
    }
}

/// Per-dimension population mean and variance.
pub fn global_moments(data: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let m = data.dims();
    let n = data.frames() as f64;
    let mut mean = vec![0.0; m];
    for x in data.rows() {
        for d in 0..m {
            mean[d] += x[d];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m];
    for x in data.rows() {
        for d in 0..m {
            var[d] += (x[d] - mean[d]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn count_distinct(data: &FeatureMatrix) -> usize {
    let mut rows: Vec<Vec<u64>> = data
        .rows()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Returns centroids.
pub fn kmeans(data: &FeatureMatrix, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one cluster".into()));
    }
    let distinct = count_distinct(data);
    if distinct < k {
        return Err(Error::TooFewDistinctPoints {
            needed: k,
            found: distinct,
        });
    }
    let n = data.frames();
    let mut rng = NormalSampler::new(seed);
    let mut centroids = vec![data.frame(rng.index(n)).to_vec()];
    let mut d2: Vec<f64> = data.rows().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if w > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `target` past the final sum; take the last candidate.
        let pick = pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap());
        let c = data.frame(pick).to_vec();
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centroids.push(c);
    }

    let m = data.dims();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let next: Vec<usize> = data
            .as_flat()
            .par_chunks(m)
            .map(|x| nearest(&centroids, x).0)
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; m]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.rows().zip(&assign) {
            counts[a] += 1;
            for d in 0..m {
                sums[a][d] += x[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(centroids)
}

/// Initial mixture: k-means centroids, global variances, equal weights.
pub fn kmeans_init(data: &FeatureMatrix, components: usize, seed: u64) -> Result<DiagonalGmm> {
    let centroids = kmeans(data, components, seed)?;
    let (_, var) = global_moments(data);
    let var: Vec<f64> = var.iter().map(|v| v.max(MIN_VARIANCE)).collect();
    DiagonalGmm::new(
        vec![1.0 / components as f64; components],
        centroids,
        vec![var; components],
    )
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub model: DiagonalGmm,
    /// Mean per-frame log-likelihood of each evaluated model, in order.
    pub trace: Vec<f64>,
    pub converged: bool,
}

pub fn em_fit(data: &FeatureMatrix, config: &EmConfig) -> Result<EmResult> {
    if config.num_components == 0 || !(config.threshold > 0.0) {
        return Err(Error::InvalidConfig("EM needs G >= 1 and a positive threshold".into()));
    }
    if data.frames() < config.num_components {
        return Err(Error::InsufficientData(format!(
            "{} frames for {} components",
            data.frames(),
            config.num_components
        )));
    }
    let init = kmeans_init(data, config.num_components, config.seed)?;
    em_from(data, init, config)
}

/// Runs EM from a given starting model.
pub fn em_from(data: &FeatureMatrix, init: DiagonalGmm, config: &EmConfig) -> Result<EmResult> {
    check_dim(&init, data)?;
    let (g, m) = (init.components(), init.dim());
    let n = data.frames() as f64;
    let (_, global_var) = global_moments(data);
    let floor: Vec<f64> = global_var
        .iter()
        .map(|v| (v * config.variance_floor_factor).max(MIN_VARIANCE))
        .collect();
    let mut model = init;
    let mut trace = Vec::new();
    let mut empty_for = vec![0usize; g];
    let mut converged = false;
    for _ in 0..config.max_iterations.max(1) {
        let stats = accumulate(&model, data, true)?;
        let mean_ll = stats.log_likelihood / n;
        if !mean_ll.is_finite() {
            return Err(Error::Numerical("non-finite EM log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            trace.push(mean_ll);
            if mean_ll - prev < config.threshold {
                converged = true;
                break;
            }
        } else {
            trace.push(mean_ll);
        }

        let mut weights = Vec::with_capacity(g);
        let mut means = Vec::with_capacity(g * m);
        let mut variances = Vec::with_capacity(g * m);
        let mut worst: Vec<usize> = Vec::new();
        for c in 0..g {
            let nc = stats.counts[c];
            weights.push(nc / n);
            if nc < EMPTY_COUNT {
                empty_for[c] += 1;
                if empty_for[c] >= 2 {
                    if worst.is_empty() {
                        worst = (0..stats.frame_log_likelihoods.len()).collect();
                        worst.sort_by(|&a, &b| {
                            stats.frame_log_likelihoods[a]
                                .total_cmp(&stats.frame_log_likelihoods[b])
                                .then(a.cmp(&b))
                        });
                        worst.reverse();
                    }
                    let i = worst.pop().unwrap_or(0);
                    log::debug!("EM: reseeding empty component {c} at frame {i}");
                    means.extend_from_slice(data.frame(i));
                    variances.extend(global_var.iter().zip(&floor).map(|(v, f)| v.max(*f)));
                    empty_for[c] = 0;
                } else {
                    means.extend_from_slice(model.mean(c));
                    variances.extend_from_slice(model.variance(c));
                }
                continue;
            }
            empty_for[c] = 0;
            for d in 0..m {
                let mu = stats.first[c * m + d] / nc;
                let var = stats.second[c * m + d] / nc - mu * mu;
                means.push(mu);
                variances.push(var.max(floor[d]));
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        model = DiagonalGmm::from_flat(weights, means, variances, m)?;
    }
    Ok(EmResult {
        model,
        trace,
        converged,
    })
}

/// Adapted means together with the per-component adaptation coefficients.
#[derive(Clone, Debug)]
pub struct MapResult {
    pub model: DiagonalGmm,
    pub counts: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Data-dependent means `sum(gamma x) / n_g`; UBM mean where `n_g = 0`.
    pub em_means: Vec<f64>,
}

/// One pass of mean-only MAP adaptation; weights and variances are copied from the UBM.
pub fn map_adapt(ubm: &DiagonalGmm, data: &FeatureMatrix, tau: f64) -> Result<MapResult> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no adaptation frames".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig("relevance factor must be >= 0".into()));
    }
    let stats = accumulate(ubm, data, false)?;
    let (g, m) = (ubm.components(), ubm.dim());
    let mut means = Vec::with_capacity(g * m);
    let mut em_means = Vec::with_capacity(g * m);
    let mut alphas = Vec::with_capacity(g);
    for c in 0..g {
        let nc = stats.counts[c];
        let alpha = if nc > 0.0 { nc / (nc + tau) } else { 0.0 };
        alphas.push(alpha);
        for d in 0..m {
            let prior = ubm.mean(c)[d];
            let em = if nc > 0.0 { stats.first[c * m + d] / nc } else { prior };
            em_means.push(em);
            means.push(alpha * em + (1.0 - alpha) * prior);
        }
    }
    let model = DiagonalGmm::from_flat(ubm.weights.clone(), means, ubm.variances.clone(), m)?;
    Ok(MapResult {
        model,
        counts: stats.counts,
        alphas,
        em_means,
    })
}

pub fn map_adapt_means(ubm: &DiagonalGmm, data: &FeatureMatrix, tau: f64) -> Result<DiagonalGmm> {
    map_adapt(ubm, data, tau).map(|r| r.model)
}
