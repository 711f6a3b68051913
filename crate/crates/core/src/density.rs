//! Densities over latent codes (or flattened curve parameters) and
//! likelihood-threshold rejection sampling.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EM_TOLERANCE: f64 = 1e-8;
pub const EM_MAX_ITERATIONS: usize = 500;
pub const GMM_RIDGE: f64 = 1e-6;
pub const KDE_RIDGE: f64 = 1e-9;
const KMEANS_ITERATIONS: usize = 10;
const KMEANS_RESTARTS: usize = 10;

/// Common interface for fitted densities.
pub trait LatentDensity {
    fn dim(&self) -> usize;
    fn logpdf(&self, z: &DVector<f64>) -> f64;
    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;
}

/// Gaussian with a cached Cholesky factor.
#[derive(Debug, Clone)]
struct Gaussian {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Option<Self> {
        let chol = cov.clone().cholesky()?;
        let logdet: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let m = mean.len() as f64;
        Some(Gaussian {
            mean,
            chol,
            log_norm: -0.5 * (m * (2.0 * PI).ln() + logdet),
        })
    }

    fn logpdf(&self, z: &DVector<f64>) -> f64 {
        let d = z - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }

    fn sample_with(&self, factor: &DMatrix<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let eps = DVector::from_fn(factor.ncols(), |_, _| StandardNormal.sample(&mut *rng));
        &self.mean + factor * eps
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric square root `V diag(√max(λ, 0)) Vᵀ` of a PSD matrix.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn validate_points(points: &[DVector<f64>]) -> Result<usize> {
    let m = points.first().ok_or(Error::EmptyBatch)?.len();
    if m == 0 {
        return Err(Error::invalid("points", "zero-dimensional"));
    }
    for p in points {
        if p.len() != m {
            return Err(Error::shape("density points", m, p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("points", "non-finite coordinate"));
        }
    }
    Ok(m)
}

/// Gaussian mixture model.
///
/// Densities use the ridge-regularized covariances. Samples are drawn from
/// the unregularized component scatter, so directions with no data spread
/// receive no sampling noise.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    covariances: Vec<DMatrix<f64>>,
    sampling_factors: Vec<DMatrix<f64>>,
    history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    sampling_covariances: Vec<Vec<f64>>,
}

impl Serialize for GmmModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        GmmRepr {
            weights: self.weights.clone(),
            means: self
                .components
                .iter()
                .map(|c| c.mean.as_slice().to_vec())
                .collect(),
            covariances: self.covariances.iter().map(row_major).collect(),
            sampling_covariances: self
                .sampling_factors
                .iter()
                .map(|f| row_major(&(f * f.transpose())))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GmmModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = GmmRepr::deserialize(d)?;
        let k = r.weights.len();
        if k == 0
            || r.means.len() != k
            || r.covariances.len() != k
            || r.sampling_covariances.len() != k
        {
            return Err(serde::de::Error::custom(
                "gmm arrays disagree on component count",
            ));
        }
        let m = r.means[0].len();
        let square = |v: &Vec<f64>| -> std::result::Result<DMatrix<f64>, D::Error> {
            if v.len() != m * m {
                return Err(serde::de::Error::custom(format!("expected {m}x{m} matrix")));
            }
            Ok(DMatrix::from_row_slice(m, m, v))
        };
        let means = r
            .means
            .iter()
            .map(|v| {
                if v.len() == m {
                    Ok(DVector::from_column_slice(v))
                } else {
                    Err(serde::de::Error::custom("gmm means differ in dimension"))
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let covs = r
            .covariances
            .iter()
            .map(square)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let sampling = r
            .sampling_covariances
            .iter()
            .map(square)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        GmmModel::from_parts(r.weights, means, covs, sampling).map_err(serde::de::Error::custom)
    }
}

impl GmmModel {
    /// Builds a mixture from explicit parameters. `sampling_covariances`
    /// are PSD matrices used for drawing; pass the covariances themselves
    /// when no distinction is needed.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        sampling_covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k || sampling_covariances.len() != k {
            return Err(Error::invalid("gmm", "component arrays disagree in length"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(
                "gmm",
                "weights must be nonnegative and sum to 1",
            ));
        }
        let m = means[0].len();
        let mut components = Vec::with_capacity(k);
        for (mu, cov) in means.into_iter().zip(&covariances) {
            if mu.len() != m
                || cov.shape() != (m, m)
                || sampling_covariances.iter().any(|s| s.shape() != (m, m))
            {
                return Err(Error::invalid("gmm", "component dimensions differ"));
            }
            if (cov - cov.transpose()).amax() > 1e-10 * cov.amax().max(1.0) {
                return Err(Error::invalid("gmm", "covariance is not symmetric"));
            }
            components.push(
                Gaussian::new(mu, cov)
                    .ok_or_else(|| Error::invalid("gmm", "covariance is not positive definite"))?,
            );
        }
        Ok(GmmModel {
            weights,
            components,
            covariances,
            sampling_factors: sampling_covariances.iter().map(psd_sqrt).collect(),
            history: Vec::new(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.covariances[k]
    }

    /// Penalized log-likelihood after each EM iteration (empty when not fitted).
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    fn log_joint(&self, z: &DVector<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.logpdf(z))
            .collect()
    }

    pub fn responsibilities(&self, z: &DVector<f64>) -> DVector<f64> {
        let lj = self.log_joint(z);
        let total = log_sum_exp(&lj);
        DVector::from_iterator(lj.len(), lj.iter().map(|v| (v - total).exp()))
    }

    /// Weighted mean of the component means.
    pub fn mixture_mean(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            out += &c.mean * *w;
        }
        out
    }
}

impl LatentDensity for GmmModel {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn logpdf(&self, z: &DVector<f64>) -> f64 {
        log_sum_exp(&self.log_joint(z))
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].sample_with(&self.sampling_factors[pick], rng)
    }
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

fn kmeans_once(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|d| {
                    acc += d;
                    u < acc
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    for _ in 0..KMEANS_ITERATIONS {
        let mut sums = vec![DVector::zeros(points[0].len()); k];
        let mut counts = vec![0usize; k];
        for p in points {
            let nearest = nearest_center(&centers, p);
            sums[nearest] += p;
            counts[nearest] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
    }
    centers
}

fn inertia(points: &[DVector<f64>], centers: &[DVector<f64>]) -> f64 {
    points
        .iter()
        .map(|p| sq_dist(p, &centers[nearest_center(centers, p)]))
        .sum()
}

/// Best of several seeded k-means runs by within-cluster squared distance.
fn kmeans_pp(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let mut best = kmeans_once(points, k, rng);
    let mut best_inertia = inertia(points, &best);
    for _ in 1..KMEANS_RESTARTS {
        let c = kmeans_once(points, k, rng);
        let e = inertia(points, &c);
        if e < best_inertia {
            best = c;
            best_inertia = e;
        }
    }
    best
}

fn nearest_center(centers: &[DVector<f64>], p: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// EM fit of a `k`-component mixture.
///
/// The covariance ridge is a fixed penalty `−(λ/2)·tr Σ_k⁻¹` on each
/// component with `λ = 1e−6·N/K`, so the M-step covariance is
/// `(S_k + λI)/N_k` and the penalized log-likelihood never decreases.
/// For a single component this gives the sample covariance plus `1e−6·I`.
pub fn gmm_fit(points: &[DVector<f64>], k: usize, seed: u64) -> Result<GmmModel> {
    let m = validate_points(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::TooFewPoints {
            components: k,
            points: n,
        });
    }
    let lambda = GMM_RIDGE * n as f64 / k as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(points, k, &mut rng);

    let global_mean = points.iter().fold(DVector::zeros(m), |acc, p| acc + p) / n as f64;
    let mut global_cov = DMatrix::zeros(m, m);
    for p in points {
        let d = p - &global_mean;
        global_cov += &d * d.transpose();
    }
    global_cov = global_cov / n as f64 + DMatrix::identity(m, m) * GMM_RIDGE;
    // hard k-means labels seed the first M-step; an empty cluster keeps its
    // center with the global covariance
    let labels: Vec<usize> = points.iter().map(|p| nearest_center(&centers, p)).collect();
    let mut counts = vec![1.0; k];
    let mut means = centers;
    let mut covs = vec![global_cov; k];
    let mut scatters = vec![DMatrix::zeros(m, m); k];
    for c in 0..k {
        let members: Vec<&DVector<f64>> = points
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == c)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let nc = members.len() as f64;
        counts[c] += nc;
        let mu = members.iter().fold(DVector::zeros(m), |acc, p| acc + *p) / nc;
        let mut s = DMatrix::zeros(m, m);
        for p in &members {
            let d = *p - &mu;
            s += &d * d.transpose();
        }
        covs[c] = (&s + DMatrix::identity(m, m) * lambda) / nc;
        scatters[c] = s / nc;
        means[c] = mu;
    }
    let count_total: f64 = counts.iter().sum();
    let mut weights: Vec<f64> = counts.iter().map(|c| c / count_total).collect();

    let mut history = Vec::new();
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..EM_MAX_ITERATIONS {
        let comps: Vec<Gaussian> = means
            .iter()
            .zip(&covs)
            .map(|(mu, c)| {
                Gaussian::new(mu.clone(), c).ok_or(Error::Singular {
                    smallest_singular_value: 0.0,
                    condition: f64::INFINITY,
                })
            })
            .collect::<Result<_>>()?;
        // E-step and objective at the current parameters
        let mut loglik = 0.0;
        for (i, p) in points.iter().enumerate() {
            let lj: Vec<f64> = (0..k)
                .map(|c| weights[c].ln() + comps[c].logpdf(p))
                .collect();
            let total = log_sum_exp(&lj);
            loglik += total;
            for c in 0..k {
                resp[(i, c)] = (lj[c] - total).exp();
            }
        }
        let penalty: f64 = covs
            .iter()
            .map(|c| c.clone().try_inverse().map_or(0.0, |inv| inv.trace()))
            .sum::<f64>()
            * 0.5
            * lambda;
        let objective = loglik - penalty;
        if !objective.is_finite() {
            return Err(Error::invalid("gmm fit", "non-finite log-likelihood"));
        }
        let converged = history
            .last()
            .is_some_and(|prev: &f64| objective - prev < EM_TOLERANCE);
        history.push(objective);
        if converged {
            break;
        }
        // M-step
        for c in 0..k {
            let nk: f64 = resp.column(c).sum();
            weights[c] = nk / n as f64;
            if nk <= 0.0 {
                continue;
            }
            let mut mu = DVector::zeros(m);
            for (i, p) in points.iter().enumerate() {
                mu += p * resp[(i, c)];
            }
            mu /= nk;
            let mut s = DMatrix::zeros(m, m);
            for (i, p) in points.iter().enumerate() {
                let d = p - &mu;
                s += &d * d.transpose() * resp[(i, c)];
            }
            s = (&s + s.transpose()) * 0.5;
            covs[c] = (&s + DMatrix::identity(m, m) * lambda) / nk;
            scatters[c] = s / nk;
            means[c] = mu;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
    }
    let mut model = GmmModel::from_parts(weights, means, covs, scatters)?;
    model.history = history;
    Ok(model)
}

/// Locally adaptive kernel density estimate with per-point bandwidths.
#[derive(Debug, Clone)]
pub struct KdeModel {
    kernel_width: f64,
    components: Vec<Gaussian>,
    bandwidths: Vec<DMatrix<f64>>,
    factors: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KdeRepr {
    kernel_width: f64,
    support: Vec<Vec<f64>>,
    bandwidths: Vec<Vec<f64>>,
}

impl Serialize for KdeModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KdeRepr {
            kernel_width: self.kernel_width,
            support: self
                .components
                .iter()
                .map(|c| c.mean.as_slice().to_vec())
                .collect(),
            bandwidths: self
                .bandwidths
                .iter()
                .map(|h| h.transpose().as_slice().to_vec())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KdeModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = KdeRepr::deserialize(d)?;
        let m = r.support.first().map_or(0, Vec::len);
        if r.bandwidths.len() != r.support.len() || r.bandwidths.iter().any(|h| h.len() != m * m) {
            return Err(serde::de::Error::custom(
                "kde bandwidths do not match support",
            ));
        }
        let support: Vec<DVector<f64>> = r
            .support
            .iter()
            .map(|v| DVector::from_column_slice(v))
            .collect();
        let bw = r
            .bandwidths
            .iter()
            .map(|h| DMatrix::from_row_slice(m, m, h))
            .collect();
        KdeModel::from_parts(support, bw, r.kernel_width).map_err(serde::de::Error::custom)
    }
}

/// Median squared pairwise distance.
pub fn median_squared_distance(points: &[DVector<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

/// Kernel-weighted scatter `Σ_i = Σ_k K_ik (z_i−z_k)(z_i−z_k)ᵀ / Σ_k K_ik`
/// with `K_ik = exp(−‖z_i−z_k‖²/h)`.
pub fn local_scatter(points: &[DVector<f64>], i: usize, h: f64) -> DMatrix<f64> {
    let m = points[i].len();
    let mut num = DMatrix::zeros(m, m);
    let mut den = 0.0;
    for p in points {
        let d = &points[i] - p;
        let kern = (-d.norm_squared() / h).exp();
        num += &d * d.transpose() * kern;
        den += kern;
    }
    num / den
}

impl KdeModel {
    /// Builds `H_i = Σ_i² + 1e−9·I` at every support point. `kernel_width`
    /// defaults to the median squared pairwise distance.
    pub fn build(points: &[DVector<f64>], kernel_width: Option<f64>) -> Result<Self> {
        let m = validate_points(points)?;
        if points.len() < 2 {
            return Err(Error::TooFewPoints {
                components: 2,
                points: points.len(),
            });
        }
        let diameter_sq = points
            .iter()
            .flat_map(|a| points.iter().map(move |b| sq_dist(a, b)))
            .fold(0.0, f64::max);
        if diameter_sq == 0.0 {
            return Err(Error::DegenerateSupport(
                "all support points are identical".into(),
            ));
        }
        let h = match kernel_width {
            Some(h) if h > 0.0 && h.is_finite() => h,
            Some(h) => {
                return Err(Error::invalid(
                    "kernel width",
                    format!("{h} is not positive"),
                ))
            }
            None => {
                let med = median_squared_distance(points);
                if med > 0.0 {
                    med
                } else {
                    diameter_sq
                }
            }
        };
        let bandwidths: Vec<DMatrix<f64>> = (0..points.len())
            .map(|i| {
                let s = local_scatter(points, i, h);
                let h2 = &s * &s;
                (&h2 + h2.transpose()) * 0.5 + DMatrix::identity(m, m) * KDE_RIDGE
            })
            .collect();
        KdeModel::from_parts(points.to_vec(), bandwidths, h)
    }

    /// Mixture of `N ≥ 1` Gaussians with explicit bandwidth matrices.
    pub fn from_parts(
        support: Vec<DVector<f64>>,
        bandwidths: Vec<DMatrix<f64>>,
        kernel_width: f64,
    ) -> Result<Self> {
        let m = validate_points(&support)?;
        if bandwidths.len() != support.len() {
            return Err(Error::shape(
                "kde bandwidths",
                support.len(),
                bandwidths.len(),
            ));
        }
        let mut components = Vec::with_capacity(support.len());
        let mut factors = Vec::with_capacity(support.len());
        for (z, h) in support.into_iter().zip(&bandwidths) {
            if h.shape() != (m, m) {
                return Err(Error::shape(
                    "kde bandwidth",
                    format!("{m}x{m}"),
                    format!("{}x{}", h.nrows(), h.ncols()),
                ));
            }
            let g = Gaussian::new(z, h)
                .ok_or_else(|| Error::invalid("kde bandwidth", "not positive definite"))?;
            factors.push(g.chol.l());
            components.push(g);
        }
        Ok(KdeModel {
            kernel_width,
            components,
            bandwidths,
            factors,
        })
    }

    pub fn kernel_width(&self) -> f64 {
        self.kernel_width
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn bandwidth(&self, i: usize) -> &DMatrix<f64> {
        &self.bandwidths[i]
    }

    pub fn support_point(&self, i: usize) -> &DVector<f64> {
        &self.components[i].mean
    }
}

impl LatentDensity for KdeModel {
    fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    fn logpdf(&self, z: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self.components.iter().map(|c| c.logpdf(z)).collect();
        log_sum_exp(&terms) - (self.components.len() as f64).ln()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let i = rng.random_range(0..self.components.len());
        self.components[i].sample_with(&self.factors[i], rng)
    }
}

/// Serialized density checkpoint, tagged by family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Density {
    Gmm(GmmModel),
    Kde(KdeModel),
}

/// Density family selector for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityFamily {
    Gmm,
    Kde,
}

impl Density {
    pub fn fit(
        family: DensityFamily,
        points: &[DVector<f64>],
        components: usize,
        seed: u64,
    ) -> Result<Self> {
        match family {
            DensityFamily::Gmm => Ok(Density::Gmm(gmm_fit(points, components, seed)?)),
            DensityFamily::Kde => Ok(Density::Kde(KdeModel::build(points, None)?)),
        }
    }

    fn inner(&self) -> &dyn LatentDensity {
        match self {
            Density::Gmm(g) => g,
            Density::Kde(k) => k,
        }
    }
}

impl LatentDensity for Density {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn logpdf(&self, z: &DVector<f64>) -> f64 {
        self.inner().logpdf(z)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.inner().sample(rng)
    }
}

/// Likelihood threshold for rejection sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleFilter {
    pub threshold: f64,
    pub max_attempts: usize,
}

impl SampleFilter {
    pub fn new(threshold: f64, max_attempts: usize) -> Result<Self> {
        if max_attempts == 0 {
            return Err(Error::invalid(
                "sample filter",
                "max attempts must be at least 1",
            ));
        }
        if threshold.is_nan() {
            return Err(Error::invalid("sample filter", "threshold is NaN"));
        }
        Ok(SampleFilter {
            threshold,
            max_attempts,
        })
    }

    /// Threshold at the smallest training-point log-likelihood.
    pub fn from_training(
        density: &dyn LatentDensity,
        training: &[DVector<f64>],
        max_attempts: usize,
    ) -> Result<Self> {
        if training.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let threshold = training
            .iter()
            .map(|z| density.logpdf(z))
            .fold(f64::INFINITY, f64::min);
        SampleFilter::new(threshold, max_attempts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionOutcome {
    pub samples: Vec<DVector<f64>>,
    pub attempts: usize,
    pub acceptance_rate: f64,
}

/// Draws until `count` samples clear the threshold or attempts run out.
pub fn rejection_sample(
    density: &dyn LatentDensity,
    filter: &SampleFilter,
    rng: &mut dyn RngCore,
    count: usize,
) -> Result<RejectionOutcome> {
    let mut samples = Vec::with_capacity(count);
    let mut attempts = 0;
    while samples.len() < count {
        if attempts >= filter.max_attempts {
            return Err(Error::SamplingStarved {
                requested: count,
                accepted: samples.len(),
                attempts,
                rate: samples.len() as f64 / attempts as f64,
            });
        }
        attempts += 1;
        let z = density.sample(rng);
        if density.logpdf(&z) >= filter.threshold {
            samples.push(z);
        }
    }
    Ok(RejectionOutcome {
        acceptance_rate: if attempts == 0 {
            1.0
        } else {
            count as f64 / attempts as f64
        },
        samples,
        attempts,
    })
}
