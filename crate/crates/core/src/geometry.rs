//! Riemannian metrics on curve-parameter space and their latent pullbacks.
//!
//! A decoder maps latent `z ∈ ℝᵐ` to flattened parameters `w ∈ ℝ^{nB}`
//! (row-major, entry `(i, j)` at `i·B + j`). The CurveGeom metric `M` on
//! parameter space pulls back to `H̄(z) = Jᵀ M J`, and the relaxed
//! distortion `E[Tr H̄²] / E[Tr H̄]²` measures how far the decoder is from a
//! scaled isometry.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{trapezoid_rule, BasisSet, CurveModel, CurveParams, QUADRATURE_POINTS};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamGradient};

const SYMMETRY_TOL: f64 = 1e-10;
const MIN_MEAN_TRACE: f64 = 1e-12;

type MetricFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Configuration-space metric `G(q)`.
#[derive(Clone)]
pub struct ConfigMetric {
    dim: usize,
    euclidean: bool,
    evaluator: Arc<MetricFn>,
}

impl fmt::Debug for ConfigMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConfigMetric")
            .field("dim", &self.dim)
            .field("euclidean", &self.euclidean)
            .finish_non_exhaustive()
    }
}

impl ConfigMetric {
    pub fn identity(dim: usize) -> Self {
        ConfigMetric {
            dim,
            euclidean: true,
            evaluator: Arc::new(move |_| DMatrix::identity(dim, dim)),
        }
    }

    pub fn new(
        dim: usize,
        f: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        ConfigMetric {
            dim,
            euclidean: false,
            evaluator: Arc::new(f),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_euclidean(&self) -> bool {
        self.euclidean
    }

    /// Evaluates `G(q)`, rejecting wrong shapes and asymmetric output.
    pub fn eval(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        if q.len() != self.dim {
            return Err(Error::shape("metric argument", self.dim, q.len()));
        }
        let g = (self.evaluator)(q);
        if g.shape() != (self.dim, self.dim) {
            return Err(Error::shape(
                "metric value",
                format!("{0}x{0}", self.dim),
                format!("{}x{}", g.nrows(), g.ncols()),
            ));
        }
        let asym = (&g - g.transpose()).amax();
        if !(asym <= SYMMETRY_TOL) {
            return Err(Error::invalid(
                "configuration metric",
                format!("asymmetry {asym:e}"),
            ));
        }
        Ok(g)
    }
}

/// Metric on flattened curve parameters, as an `(nB)×(nB)` quadratic form.
#[derive(Debug, Clone, PartialEq)]
pub enum CurveGeomMetric {
    /// `h_ijkl = δ_ik Φ_jl`: the same `B×B` Gram matrix on every coordinate.
    Euclidean { gram: DMatrix<f64>, dim: usize },
    /// Full tensor with `h_ijkl` stored at `(i·B + j, k·B + l)`.
    General {
        tensor: DMatrix<f64>,
        dim: usize,
        bases: usize,
    },
}

pub fn curvegeom_euclidean(basis: &BasisSet, dim: usize) -> CurveGeomMetric {
    CurveGeomMetric::Euclidean {
        gram: basis.gram(),
        dim,
    }
}

pub fn curvegeom_general(
    model: &CurveModel,
    w: &CurveParams,
    g: &ConfigMetric,
) -> Result<CurveGeomMetric> {
    curvegeom_general_with(model, w, g, QUADRATURE_POINTS)
}

/// [`curvegeom_general`] with an explicit number of trapezoid nodes.
pub fn curvegeom_general_with(
    model: &CurveModel,
    w: &CurveParams,
    g: &ConfigMetric,
    points: usize,
) -> Result<CurveGeomMetric> {
    let (n, b) = (model.dim(), model.num_bases());
    if g.dim() != n {
        return Err(Error::shape("configuration metric", n, g.dim()));
    }
    if w.shape() != (n, b) {
        return Err(Error::shape(
            "curve parameters",
            format!("{n}x{b}"),
            format!("{}x{}", w.shape().0, w.shape().1),
        ));
    }
    let (nodes, weights) = trapezoid_rule(points);
    let mut tensor = DMatrix::zeros(n * b, n * b);
    for (&tau, &omega) in nodes.iter().zip(&weights) {
        let q = model.eval(w, tau)?;
        let gq = g.eval(&q)?;
        if gq.clone().cholesky().is_none() {
            return Err(Error::MetricNotPositiveDefinite { tau });
        }
        let phi = model.basis().eval(tau)?;
        let outer = &phi * phi.transpose() * omega;
        for i in 0..n {
            for k in 0..n {
                let gik = gq[(i, k)];
                if gik == 0.0 {
                    continue;
                }
                let mut block = tensor.view_mut((i * b, k * b), (b, b));
                block += &outer * gik;
            }
        }
    }
    let tensor = (&tensor + tensor.transpose()) * 0.5;
    Ok(CurveGeomMetric::General {
        tensor,
        dim: n,
        bases: b,
    })
}

impl CurveGeomMetric {
    /// Euclidean metric over an arbitrary symmetric positive-definite Gram matrix.
    pub fn from_gram(gram: DMatrix<f64>, dim: usize) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::invalid("gram matrix", "not square"));
        }
        if (&gram - gram.transpose()).amax() > SYMMETRY_TOL || gram.clone().cholesky().is_none() {
            return Err(Error::invalid(
                "gram matrix",
                "not symmetric positive definite",
            ));
        }
        Ok(CurveGeomMetric::Euclidean { gram, dim })
    }

    pub fn dim(&self) -> usize {
        match self {
            CurveGeomMetric::Euclidean { dim, .. } | CurveGeomMetric::General { dim, .. } => *dim,
        }
    }

    pub fn num_bases(&self) -> usize {
        match self {
            CurveGeomMetric::Euclidean { gram, .. } => gram.nrows(),
            CurveGeomMetric::General { bases, .. } => *bases,
        }
    }

    pub fn size(&self) -> usize {
        self.dim() * self.num_bases()
    }

    pub fn h(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        match self {
            CurveGeomMetric::Euclidean { gram, .. } => {
                if i == k {
                    gram[(j, l)]
                } else {
                    0.0
                }
            }
            CurveGeomMetric::General { tensor, bases, .. } => {
                tensor[(i * bases + j, k * bases + l)]
            }
        }
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        match self {
            CurveGeomMetric::Euclidean { gram, dim } => {
                DMatrix::<f64>::identity(*dim, *dim).kronecker(gram)
            }
            CurveGeomMetric::General { tensor, .. } => tensor.clone(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            CurveGeomMetric::Euclidean { gram, dim } => CurveGeomMetric::Euclidean {
                gram: gram * c,
                dim: *dim,
            },
            CurveGeomMetric::General { tensor, dim, bases } => CurveGeomMetric::General {
                tensor: tensor * c,
                dim: *dim,
                bases: *bases,
            },
        }
    }

    /// `M Y` for a matrix of flattened parameter-space columns.
    pub fn apply(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.size() {
            return Err(Error::shape("metric operand", self.size(), y.nrows()));
        }
        Ok(match self {
            CurveGeomMetric::Euclidean { gram, dim } => {
                let b = gram.nrows();
                let mut out = DMatrix::zeros(y.nrows(), y.ncols());
                for i in 0..*dim {
                    let block = gram * y.rows(i * b, b);
                    out.rows_mut(i * b, b).copy_from(&block);
                }
                out
            }
            CurveGeomMetric::General { tensor, .. } => tensor * y,
        })
    }

    /// `Σ h_ijkl dw_ij dw_kl`.
    pub fn squared_length(&self, dw: &CurveParams) -> Result<f64> {
        let (n, b) = dw.shape();
        if (n, b) != (self.dim(), self.num_bases()) {
            return Err(Error::shape(
                "parameter displacement",
                format!("{}x{}", self.dim(), self.num_bases()),
                format!("{n}x{b}"),
            ));
        }
        let v = DMatrix::from_row_slice(n * b, 1, dw.matrix().transpose().as_slice());
        let mv = self.apply(&v)?;
        Ok(v.dot(&mv))
    }
}

/// Latent pullback `H̄(z) = Jᵀ M J`.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackMetric {
    matrix: DMatrix<f64>,
}

impl PullbackMetric {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `Tr H̄²`, which equals the squared Frobenius norm for symmetric `H̄`.
    pub fn trace_of_square(&self) -> f64 {
        self.matrix.norm_squared()
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self
            .matrix
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `λ_max / λ_min`; infinite when the smallest eigenvalue is not positive.
    pub fn condition_number(&self) -> f64 {
        let ev = self.eigenvalues();
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

fn gram_of(y: &DMatrix<f64>, my: &DMatrix<f64>) -> DMatrix<f64> {
    let g = y.tr_mul(my);
    (&g + g.transpose()) * 0.5
}

fn check_decoder(decoder: &Mlp, metric: &CurveGeomMetric) -> Result<()> {
    if decoder.output_dim() != metric.size() {
        return Err(Error::shape(
            "decoder output",
            metric.size(),
            decoder.output_dim(),
        ));
    }
    Ok(())
}

fn column_matrix(zs: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let first = zs.first().ok_or(Error::EmptyBatch)?;
    let m = first.len();
    if let Some(bad) = zs.iter().find(|z| z.len() != m) {
        return Err(Error::shape("latent batch", m, bad.len()));
    }
    Ok(DMatrix::from_fn(m, zs.len(), |r, c| zs[c][r]))
}

pub fn pullback_metric(
    decoder: &Mlp,
    z: &DVector<f64>,
    metric: &CurveGeomMetric,
) -> Result<PullbackMetric> {
    Ok(pullback_metrics(decoder, std::slice::from_ref(z), metric)?.remove(0))
}

/// [`pullback_metric`] at many points sharing one batched JVP pass.
pub fn pullback_metrics(
    decoder: &Mlp,
    zs: &[DVector<f64>],
    metric: &CurveGeomMetric,
) -> Result<Vec<PullbackMetric>> {
    check_decoder(decoder, metric)?;
    let x = column_matrix(zs)?;
    let m = x.nrows();
    let tangents = identity_probes(m, zs.len());
    let (_, y) = decoder.jvp_batch(&x, &tangents, m)?;
    let my = metric.apply(&y)?;
    Ok((0..zs.len())
        .map(|p| PullbackMetric {
            matrix: gram_of(
                &y.columns(p * m, m).into_owned(),
                &my.columns(p * m, m).into_owned(),
            ),
        })
        .collect())
}

/// How `Tr H̄` and `Tr H̄²` are obtained per latent point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceMode {
    /// Full `H̄` from `m` coordinate JVPs.
    #[default]
    Exact,
    /// `probes` standard-normal probes per point. `Tr H̄` is the mean of
    /// `vᵀH̄v`; `Tr H̄²` is the mean of `(v_pᵀ H̄ v_q)²` over distinct probe
    /// pairs, which is unbiased and needs JVPs only.
    Hutchinson { probes: usize, seed: u64 },
}

fn identity_probes(m: usize, points: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m * points, |r, c| if r == c % m { 1.0 } else { 0.0 })
}

fn probes(mode: TraceMode, m: usize, points: usize) -> Result<(DMatrix<f64>, usize)> {
    match mode {
        TraceMode::Exact => Ok((identity_probes(m, points), m)),
        TraceMode::Hutchinson { probes, seed } => {
            if probes < 2 {
                return Err(Error::invalid(
                    "trace mode",
                    "hutchinson estimation needs at least 2 probes",
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = DMatrix::from_fn(m, probes * points, |_, _| StandardNormal.sample(&mut rng));
            Ok((v, probes))
        }
    }
}

/// Distortion value together with its decoder-parameter gradient.
#[derive(Debug, Clone)]
pub struct DistortionEval {
    pub value: f64,
    pub mean_trace: f64,
    pub mean_trace_of_square: f64,
    pub gradient: Option<ParamGradient>,
}

fn trace_estimates(g: &DMatrix<f64>, mode: TraceMode) -> (f64, f64) {
    match mode {
        TraceMode::Exact => (g.trace(), g.norm_squared()),
        TraceMode::Hutchinson { .. } => {
            let k = g.nrows() as f64;
            let diag_sq: f64 = g.diagonal().norm_squared();
            (
                g.trace() / k,
                (g.norm_squared() - diag_sq) / (k * (k - 1.0)),
            )
        }
    }
}

pub fn evaluate_distortion(
    decoder: &Mlp,
    zs: &[DVector<f64>],
    metric: &CurveGeomMetric,
    mode: TraceMode,
    with_gradient: bool,
) -> Result<DistortionEval> {
    check_decoder(decoder, metric)?;
    let x = column_matrix(zs)?;
    let (m, n_pts) = (x.nrows(), x.ncols());
    let (v, k) = probes(mode, m, n_pts)?;
    let (_, y) = decoder.jvp_batch(&x, &v, k)?;
    let my = metric.apply(&y)?;
    let grams: Vec<DMatrix<f64>> = (0..n_pts)
        .map(|p| {
            gram_of(
                &y.columns(p * k, k).into_owned(),
                &my.columns(p * k, k).into_owned(),
            )
        })
        .collect();
    let (mut t1, mut t2) = (0.0, 0.0);
    for g in &grams {
        let (a, b) = trace_estimates(g, mode);
        t1 += a;
        t2 += b;
    }
    let count = n_pts as f64;
    let (mean1, mean2) = (t1 / count, t2 / count);
    if !(mean1 >= MIN_MEAN_TRACE) {
        return Err(Error::DistortionUndefined { mean_trace: mean1 });
    }
    let value = mean2 / (mean1 * mean1);
    let gradient = if with_gradient {
        // ∂R/∂Y_p = 2 M Y_p S_p with symmetric S_p collecting both trace terms.
        let a = 1.0 / (mean1 * mean1 * count);
        let b = -2.0 * mean2 / (mean1 * mean1 * mean1 * count);
        let mut cot = DMatrix::zeros(y.nrows(), y.ncols());
        for (p, g) in grams.iter().enumerate() {
            let s = match mode {
                TraceMode::Exact => g * (2.0 * a) + DMatrix::identity(k, k) * b,
                TraceMode::Hutchinson { .. } => {
                    let kf = k as f64;
                    let mut off = g.clone();
                    off.fill_diagonal(0.0);
                    off * (2.0 * a / (kf * (kf - 1.0))) + DMatrix::identity(k, k) * (b / kf)
                }
            };
            let block = my.columns(p * k, k) * s * 2.0;
            cot.columns_mut(p * k, k).copy_from(&block);
        }
        Some(decoder.jvp_param_gradient(&x, &v, k, &cot)?)
    } else {
        None
    };
    Ok(DistortionEval {
        value,
        mean_trace: mean1,
        mean_trace_of_square: mean2,
        gradient,
    })
}

pub fn relaxed_distortion(
    decoder: &Mlp,
    zs: &[DVector<f64>],
    metric: &CurveGeomMetric,
    mode: TraceMode,
) -> Result<f64> {
    Ok(evaluate_distortion(decoder, zs, metric, mode, false)?.value)
}

/// Gradient of [`relaxed_distortion`] with respect to decoder parameters.
pub fn grad_of_distortion(
    decoder: &Mlp,
    zs: &[DVector<f64>],
    metric: &CurveGeomMetric,
    mode: TraceMode,
) -> Result<ParamGradient> {
    let eval = evaluate_distortion(decoder, zs, metric, mode, true)?;
    Ok(eval.gradient.expect("gradient requested"))
}
