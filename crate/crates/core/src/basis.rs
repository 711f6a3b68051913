//! Gaussian basis families, affine and via-point curve models, closed-form
//! fitting, and temporal modulation.
//!
//! A curve is `q(τ; w) = ψ(τ) + w φ(τ)` with `w` an `n × B` coefficient
//! matrix. In via-point mode every basis carries a `τ(1 − τ)` factor, so the
//! elementary part alone fixes `q(0)` and `q(1)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of nodes of the shared trapezoid rule used for every `∫₀¹` integral.
pub const QUADRATURE_POINTS: usize = 201;

/// Condition estimate above which the fitting normal matrix counts as singular.
pub const FIT_CONDITION_LIMIT: f64 = 1e12;

/// Composite trapezoid nodes and weights for `∫₀¹` on a uniform grid.
pub fn trapezoid_rule(points: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(points >= 2, "trapezoid rule needs at least two nodes");
    let step = 1.0 / (points - 1) as f64;
    let nodes = (0..points).map(|k| k as f64 * step).collect();
    let weights = (0..points)
        .map(|k| {
            if k == 0 || k == points - 1 {
                0.5 * step
            } else {
                step
            }
        })
        .collect();
    (nodes, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// `φ_i = b_i / Σ_j b_j`
    Free,
    /// `φ_i = τ(1 − τ) b_i / Σ_j b_j`
    ViaPoint,
}

#[derive(Serialize, Deserialize)]
struct BasisSetRepr {
    centers: Vec<f64>,
    width: f64,
    mode: BasisMode,
}

/// Normalized Gaussian basis family `b_i(τ) = exp(−(τ − c_i)² / 2h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisSetRepr", into = "BasisSetRepr")]
pub struct BasisSet {
    centers: Vec<f64>,
    width: f64,
    mode: BasisMode,
}

impl TryFrom<BasisSetRepr> for BasisSet {
    type Error = Error;

    fn try_from(r: BasisSetRepr) -> Result<Self> {
        BasisSet::new(r.centers, r.width, r.mode)
    }
}

impl From<BasisSet> for BasisSetRepr {
    fn from(b: BasisSet) -> Self {
        BasisSetRepr {
            centers: b.centers,
            width: b.width,
            mode: b.mode,
        }
    }
}

impl BasisSet {
    pub fn new(centers: Vec<f64>, width: f64, mode: BasisMode) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::invalid("basis", "at least two bases are required"));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::invalid(
                "basis",
                format!("width must be positive, got {width}"),
            ));
        }
        if let Some(c) = centers.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(
                "basis",
                format!("center {c} outside [0, 1]"),
            ));
        }
        let mut sorted = centers.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::invalid("basis", "centers must be mutually distinct"));
        }
        Ok(BasisSet {
            centers,
            width,
            mode,
        })
    }

    /// `count` centers spread uniformly over `[0, 1]` (endpoints included),
    /// width equal to the squared spacing.
    pub fn uniform(count: usize, mode: BasisMode) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid("basis", "at least two bases are required"));
        }
        let spacing = 1.0 / (count - 1) as f64;
        let centers = (0..count).map(|i| i as f64 * spacing).collect();
        BasisSet::new(centers, spacing * spacing, mode)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    /// `(b_i, b_i')` rescaled by a common positive factor so the largest term
    /// is 1; the normalized basis is unaffected by the rescaling.
    fn raw(&self, tau: f64) -> (Vec<f64>, Vec<f64>) {
        let nearest = self
            .centers
            .iter()
            .map(|c| (tau - c) * (tau - c))
            .fold(f64::INFINITY, f64::min);
        let values: Vec<f64> = self
            .centers
            .iter()
            .map(|c| (-((tau - c) * (tau - c) - nearest) / (2.0 * self.width)).exp())
            .collect();
        let slopes = self
            .centers
            .iter()
            .zip(&values)
            .map(|(c, b)| -(tau - c) / self.width * b)
            .collect();
        (values, slopes)
    }

    fn check_phase(tau: f64) -> Result<()> {
        if (0.0..=1.0).contains(&tau) {
            Ok(())
        } else {
            Err(Error::PhaseDomain { tau })
        }
    }

    /// `φ(τ)`.
    pub fn eval(&self, tau: f64) -> Result<DVector<f64>> {
        Ok(self.eval_with_derivative(tau)?.0)
    }

    /// `(φ(τ), dφ/dτ)`.
    pub fn eval_with_derivative(&self, tau: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        Self::check_phase(tau)?;
        let (b, db) = self.raw(tau);
        let sum: f64 = b.iter().sum();
        let dsum: f64 = db.iter().sum();
        let normalized = DVector::from_iterator(b.len(), b.iter().map(|v| v / sum));
        let dnormalized = DVector::from_iterator(
            b.len(),
            b.iter()
                .zip(&db)
                .map(|(v, dv)| (dv * sum - v * dsum) / (sum * sum)),
        );
        Ok(match self.mode {
            BasisMode::Free => (normalized, dnormalized),
            BasisMode::ViaPoint => {
                let gate = tau * (1.0 - tau);
                let dgate = 1.0 - 2.0 * tau;
                let d = &normalized * dgate + &dnormalized * gate;
                (normalized * gate, d)
            }
        })
    }

    /// Basis matrix with one column `φ(τ_k)` per phase.
    pub fn design_matrix(&self, taus: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.len(), taus.len());
        for (k, &tau) in taus.iter().enumerate() {
            out.set_column(k, &self.eval(tau)?);
        }
        Ok(out)
    }

    /// Gram matrix `Φ_jl = ∫₀¹ φ_j φ_l dτ` on the default quadrature grid.
    pub fn gram(&self) -> DMatrix<f64> {
        self.gram_with(QUADRATURE_POINTS)
    }

    pub fn gram_with(&self, points: usize) -> DMatrix<f64> {
        let (nodes, weights) = trapezoid_rule(points);
        let mut gram = DMatrix::zeros(self.len(), self.len());
        for (tau, wt) in nodes.into_iter().zip(weights) {
            let phi = self.eval(tau).expect("quadrature nodes lie in [0, 1]");
            gram.ger(wt, &phi, &phi, 1.0);
        }
        // exact symmetry; the rank-one updates only agree to rounding
        let t = gram.transpose();
        (gram + t) * 0.5
    }

    /// Kernel matrix `K(c_i, c_j)` of the unnormalized Gaussians.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let b = self.len();
        DMatrix::from_fn(b, b, |i, j| {
            let d = self.centers[i] - self.centers[j];
            (-(d * d) / (2.0 * self.width)).exp()
        })
    }
}

/// Elementary trajectory `ψ` of an affine model, with its phase derivative.
#[derive(Clone)]
pub struct Elementary {
    dim: usize,
    zero: bool,
    func: Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync>,
}

impl Elementary {
    pub fn zero(dim: usize) -> Self {
        Elementary {
            dim,
            zero: true,
            func: Arc::new(move |_| (DVector::zeros(dim), DVector::zeros(dim))),
        }
    }

    /// `func` returns `(ψ(τ), dψ/dτ)`.
    pub fn new(
        dim: usize,
        func: impl Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    ) -> Self {
        Elementary {
            dim,
            zero: false,
            func: Arc::new(func),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl fmt::Debug for Elementary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Elementary")
            .field("dim", &self.dim)
            .field("zero", &self.zero)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum CurveKind {
    Affine(Elementary),
    ViaPoint {
        start: DVector<f64>,
        goal: DVector<f64>,
    },
}

/// Affine curve model `q(τ; w) = ψ(τ) + w φ(τ)`.
#[derive(Debug, Clone)]
pub struct CurveModel {
    kind: CurveKind,
    basis: BasisSet,
}

/// Serializable description of a [`CurveModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveModelSpec {
    Free {
        dim: usize,
        basis: BasisSet,
    },
    ViaPoint {
        start: Vec<f64>,
        goal: Vec<f64>,
        basis: BasisSet,
    },
}

impl CurveModel {
    pub fn via_point(start: DVector<f64>, goal: DVector<f64>, basis: BasisSet) -> Result<Self> {
        if basis.mode() != BasisMode::ViaPoint {
            return Err(Error::invalid(
                "curve model",
                "via-point curves need a via-point basis",
            ));
        }
        if start.len() != goal.len() || start.is_empty() {
            return Err(Error::shape("via-point endpoints", start.len(), goal.len()));
        }
        if start.iter().chain(goal.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("curve model", "endpoints must be finite"));
        }
        Ok(CurveModel {
            kind: CurveKind::ViaPoint { start, goal },
            basis,
        })
    }

    pub fn affine(elementary: Elementary, basis: BasisSet) -> Result<Self> {
        if elementary.dim() == 0 {
            return Err(Error::invalid(
                "curve model",
                "configuration dimension must be positive",
            ));
        }
        Ok(CurveModel {
            kind: CurveKind::Affine(elementary),
            basis,
        })
    }

    /// Affine model with `ψ = 0`.
    pub fn free(dim: usize, basis: BasisSet) -> Result<Self> {
        Self::affine(Elementary::zero(dim), basis)
    }

    pub fn from_spec(spec: &CurveModelSpec) -> Result<Self> {
        match spec {
            CurveModelSpec::Free { dim, basis } => Self::free(*dim, basis.clone()),
            CurveModelSpec::ViaPoint { start, goal, basis } => Self::via_point(
                DVector::from_column_slice(start),
                DVector::from_column_slice(goal),
                basis.clone(),
            ),
        }
    }

    /// Fails for affine models with a custom elementary trajectory.
    pub fn to_spec(&self) -> Result<CurveModelSpec> {
        match &self.kind {
            CurveKind::ViaPoint { start, goal } => Ok(CurveModelSpec::ViaPoint {
                start: start.as_slice().to_vec(),
                goal: goal.as_slice().to_vec(),
                basis: self.basis.clone(),
            }),
            CurveKind::Affine(e) if e.zero => Ok(CurveModelSpec::Free {
                dim: e.dim,
                basis: self.basis.clone(),
            }),
            CurveKind::Affine(_) => Err(Error::invalid(
                "curve model",
                "custom elementary trajectories cannot be serialized",
            )),
        }
    }

    pub fn kind(&self) -> &CurveKind {
        &self.kind
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            CurveKind::Affine(e) => e.dim,
            CurveKind::ViaPoint { start, .. } => start.len(),
        }
    }

    pub fn num_bases(&self) -> usize {
        self.basis.len()
    }

    /// Same model with different via-points (modulation of start and goal).
    pub fn with_endpoints(&self, start: DVector<f64>, goal: DVector<f64>) -> Result<Self> {
        Self::via_point(start, goal, self.basis.clone())
    }

    pub fn zero_params(&self) -> CurveParams {
        CurveParams::zeros(self.dim(), self.num_bases())
    }

    /// `(ψ(τ), dψ/dτ)`.
    pub fn elementary(&self, tau: f64) -> (DVector<f64>, DVector<f64>) {
        match &self.kind {
            CurveKind::Affine(e) => (e.func)(tau),
            CurveKind::ViaPoint { start, goal } => (start * (1.0 - tau) + goal * tau, goal - start),
        }
    }

    fn check_params(&self, w: &CurveParams) -> Result<()> {
        let (r, c) = w.shape();
        if r != self.dim() || c != self.num_bases() {
            return Err(Error::shape(
                "curve parameters",
                format!("{}x{}", self.dim(), self.num_bases()),
                format!("{r}x{c}"),
            ));
        }
        Ok(())
    }

    /// `q(τ; w)`.
    pub fn eval(&self, w: &CurveParams, tau: f64) -> Result<DVector<f64>> {
        self.check_params(w)?;
        let phi = self.basis.eval(tau)?;
        Ok(self.elementary(tau).0 + w.matrix() * phi)
    }

    /// `∂q/∂τ` at `τ`.
    pub fn eval_phase_derivative(&self, w: &CurveParams, tau: f64) -> Result<DVector<f64>> {
        self.check_params(w)?;
        let (_, dphi) = self.basis.eval_with_derivative(tau)?;
        Ok(self.elementary(tau).1 + w.matrix() * dphi)
    }

    /// `dq/dt = τ̇(t) ∂q/∂τ` under a temporal modulation.
    pub fn velocity(
        &self,
        w: &CurveParams,
        profile: &PhaseProfile,
        t: f64,
    ) -> Result<DVector<f64>> {
        let tau = profile.phase(t)?;
        let rate = profile.rate(t)?;
        Ok(self.eval_phase_derivative(w, tau)? * rate)
    }

    /// Configurations on a uniform phase grid of `points` nodes.
    pub fn sample(&self, w: &CurveParams, points: usize) -> Result<Vec<DVector<f64>>> {
        let step = 1.0 / (points.max(2) - 1) as f64;
        (0..points.max(2))
            .map(|k| self.eval(w, (k as f64 * step).min(1.0)))
            .collect()
    }

    fn fit_system(&self, traj: &TimedTrajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if traj.dim() != self.dim() {
            return Err(Error::shape("trajectory dimension", self.dim(), traj.dim()));
        }
        let taus = traj.linear_phases();
        let phi = self.basis.design_matrix(&taus)?;
        let mut delta = DMatrix::zeros(self.dim(), traj.len());
        for (k, (tau, q)) in taus.iter().zip(traj.configs()).enumerate() {
            delta.set_column(k, &(q - self.elementary(*tau).0));
        }
        Ok((phi, delta))
    }

    /// Closed-form least squares fit `w* = ΔΦᵀ(ΦΦᵀ)⁻¹` with `τ = t / t_L`
    /// after shifting the first sample to `t = 0`.
    pub fn fit(&self, traj: &TimedTrajectory) -> Result<CurveParams> {
        if traj.len() <= self.num_bases() {
            return Err(Error::invalid(
                "trajectory",
                format!(
                    "fitting {} bases needs more than {} samples, got {}",
                    self.num_bases(),
                    self.num_bases(),
                    traj.len()
                ),
            ));
        }
        let (phi, delta) = self.fit_system(traj)?;
        CurveParams::new(solve_basis_least_squares(&phi, &delta)?)
    }

    /// `Σ_i ‖Δ_i − w φ(τ_i)‖²`, the objective minimized by [`CurveModel::fit`].
    pub fn fit_objective(&self, traj: &TimedTrajectory, w: &CurveParams) -> Result<f64> {
        self.check_params(w)?;
        let (phi, delta) = self.fit_system(traj)?;
        Ok((delta - w.matrix() * phi).norm_squared())
    }
}

/// `ΔΦᵀ(ΦΦᵀ)⁻¹` for a `B×L` design matrix `Φ` and `n×L` residuals `Δ`.
pub(crate) fn solve_basis_least_squares(
    phi: &DMatrix<f64>,
    delta: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let normal = phi * phi.transpose();
    let eig = normal.clone().symmetric_eigenvalues();
    let lmin = eig.min();
    let lmax = eig.max();
    let condition = if lmin > 0.0 {
        lmax / lmin
    } else {
        f64::INFINITY
    };
    let singular = Error::Singular {
        smallest_singular_value: lmin.max(0.0).sqrt(),
        condition,
    };
    if condition > FIT_CONDITION_LIMIT {
        return Err(singular);
    }
    let chol = normal.cholesky().ok_or(singular)?;
    let rhs = phi * delta.transpose();
    Ok(chol.solve(&rhs).transpose())
}

/// Curve coefficient matrix `w ∈ ℝ^{n×B}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveParams(DMatrix<f64>);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    /// row-major
    data: Vec<f64>,
}

impl Serialize for CurveParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (rows, cols) = self.shape();
        MatrixRepr {
            rows,
            cols,
            data: self.0.transpose().as_slice().to_vec(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CurveParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, shape header says {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        CurveParams::new(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
            .map_err(serde::de::Error::custom)
    }
}

impl CurveParams {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("curve parameters", "entries must be finite"));
        }
        Ok(CurveParams(w))
    }

    pub fn zeros(dim: usize, bases: usize) -> Self {
        CurveParams(DMatrix::zeros(dim, bases))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Demonstration samples `(t_k, q_k)` with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedTrajectory {
    times: Vec<f64>,
    configs: Vec<DVector<f64>>,
}

impl TimedTrajectory {
    pub fn new(times: Vec<f64>, configs: Vec<DVector<f64>>) -> Result<Self> {
        if times.len() != configs.len() {
            return Err(Error::shape(
                "trajectory samples",
                times.len(),
                configs.len(),
            ));
        }
        if times.len() < 2 {
            return Err(Error::invalid(
                "trajectory",
                "at least two samples are required",
            ));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("trajectory", "times must be finite"));
        }
        if let Some(k) = times.windows(2).position(|p| p[1] <= p[0]) {
            return Err(Error::invalid(
                "trajectory",
                format!("times must be strictly increasing (sample {})", k + 1),
            ));
        }
        let dim = configs[0].len();
        if dim == 0 {
            return Err(Error::invalid(
                "trajectory",
                "configuration dimension must be positive",
            ));
        }
        if let Some(q) = configs.iter().find(|q| q.len() != dim) {
            return Err(Error::shape("trajectory configuration", dim, q.len()));
        }
        if configs.iter().any(|q| q.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(
                "trajectory",
                "configurations must be finite",
            ));
        }
        Ok(TimedTrajectory { times, configs })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.configs[0].len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn configs(&self) -> &[DVector<f64>] {
        &self.configs
    }

    pub fn duration(&self) -> f64 {
        self.times[self.len() - 1] - self.times[0]
    }

    /// `τ_k = (t_k − t_1) / (t_L − t_1)`.
    pub fn linear_phases(&self) -> Vec<f64> {
        let t0 = self.times[0];
        let span = self.duration();
        self.times
            .iter()
            .map(|t| ((t - t0) / span).clamp(0.0, 1.0))
            .collect()
    }
}

/// Temporal modulation `t ↦ τ(t)` over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseProfile {
    Linear {
        total: f64,
    },
    /// Slow start and stop: `τ = 3s² − 2s³` with `s = t / T`.
    Smoothstep {
        total: f64,
    },
    /// Piecewise-linear through `(t, τ)` knots from `(0, 0)` to `(T, 1)`.
    Piecewise {
        knots: Vec<(f64, f64)>,
    },
}

impl PhaseProfile {
    pub fn linear(total: f64) -> Result<Self> {
        Self::checked(PhaseProfile::Linear { total })
    }

    pub fn smoothstep(total: f64) -> Result<Self> {
        Self::checked(PhaseProfile::Smoothstep { total })
    }

    pub fn piecewise(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::invalid("phase profile", "need at least two knots"));
        }
        if knots[0] != (0.0, 0.0) || knots[knots.len() - 1].1 != 1.0 {
            return Err(Error::invalid(
                "phase profile",
                "knots must run from (0, 0) to (T, 1)",
            ));
        }
        if knots.windows(2).any(|p| p[1].0 <= p[0].0) {
            return Err(Error::invalid(
                "phase profile",
                "knot times must be strictly increasing",
            ));
        }
        Self::checked(PhaseProfile::Piecewise { knots })
    }

    fn checked(profile: Self) -> Result<Self> {
        let total = profile.total();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid(
                "phase profile",
                format!("total time must be positive, got {total}"),
            ));
        }
        let grid = 1001;
        let mut prev = 0.0;
        for k in 0..grid {
            let t = total * k as f64 / (grid - 1) as f64;
            let tau = profile.phase_unchecked(t);
            if tau < prev || !(0.0..=1.0).contains(&tau) {
                return Err(Error::invalid(
                    "phase profile",
                    format!("not monotone in [0, 1] at t = {t}"),
                ));
            }
            prev = tau;
        }
        Ok(profile)
    }

    pub fn total(&self) -> f64 {
        match self {
            PhaseProfile::Linear { total } | PhaseProfile::Smoothstep { total } => *total,
            PhaseProfile::Piecewise { knots } => knots[knots.len() - 1].0,
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let total = self.total();
        if (0.0..=total).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimeDomain { t, total })
        }
    }

    fn segment(knots: &[(f64, f64)], t: f64) -> usize {
        knots
            .windows(2)
            .position(|p| t < p[1].0)
            .unwrap_or(knots.len() - 2)
    }

    fn phase_unchecked(&self, t: f64) -> f64 {
        match self {
            PhaseProfile::Linear { total } => t / total,
            PhaseProfile::Smoothstep { total } => {
                let s = t / total;
                s * s * (3.0 - 2.0 * s)
            }
            PhaseProfile::Piecewise { knots } => {
                let k = Self::segment(knots, t);
                let (t0, p0) = knots[k];
                let (t1, p1) = knots[k + 1];
                p0 + (p1 - p0) * (t - t0) / (t1 - t0)
            }
        }
    }

    /// `τ(t)`.
    pub fn phase(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.phase_unchecked(t).clamp(0.0, 1.0))
    }

    /// `τ̇(t)`; one-sided from the right at knots, from the left at `T`.
    pub fn rate(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(match self {
            PhaseProfile::Linear { total } => 1.0 / total,
            PhaseProfile::Smoothstep { total } => {
                let s = t / total;
                6.0 * s * (1.0 - s) / total
            }
            PhaseProfile::Piecewise { knots } => {
                let k = Self::segment(knots, t);
                (knots[k + 1].1 - knots[k].1) / (knots[k + 1].0 - knots[k].0)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn via_model(n: usize, b: usize) -> CurveModel {
        let start = DVector::from_fn(n, |i, _| i as f64 * 0.3 - 0.2);
        let goal = DVector::from_fn(n, |i, _| 1.0 + i as f64 * 0.1);
        CurveModel::via_point(
            start,
            goal,
            BasisSet::uniform(b, BasisMode::ViaPoint).unwrap(),
        )
        .unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize, b: usize) -> CurveParams {
        CurveParams::new(DMatrix::from_fn(n, b, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn via_point_basis_vanishes_at_endpoints() {
        let basis = BasisSet::uniform(20, BasisMode::ViaPoint).unwrap();
        assert_eq!(basis.eval(0.0).unwrap().amax(), 0.0);
        assert_eq!(basis.eval(1.0).unwrap().amax(), 0.0);
    }

    #[test]
    fn free_basis_partitions_unity() {
        let basis = BasisSet::uniform(7, BasisMode::Free).unwrap();
        for k in 0..=50 {
            let s = basis.eval(k as f64 / 50.0).unwrap().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn basis_matches_scalar_formula() {
        let basis = BasisSet::uniform(20, BasisMode::ViaPoint).unwrap();
        let h = (1.0f64 / 19.0).powi(2);
        assert!((basis.width() - h).abs() < 1e-18);
        let tau = 0.5;
        let raw: Vec<f64> = (0..20)
            .map(|i| {
                let c = i as f64 / 19.0;
                (-(tau - c) * (tau - c) / (2.0 * h)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        let phi = basis.eval(tau).unwrap();
        for i in 0..20 {
            let expected = tau * (1.0 - tau) * raw[i] / sum;
            assert!((phi[i] - expected).abs() < 1e-15, "basis {i}");
        }
    }

    #[test]
    fn phase_outside_unit_interval_is_rejected() {
        let basis = BasisSet::uniform(5, BasisMode::Free).unwrap();
        assert!(matches!(basis.eval(-1e-9), Err(Error::PhaseDomain { .. })));
        assert!(matches!(basis.eval(1.5), Err(Error::PhaseDomain { .. })));
    }

    #[test]
    fn basis_construction_errors() {
        assert!(BasisSet::new(vec![0.1, 0.1, 0.5], 0.1, BasisMode::Free).is_err());
        assert!(BasisSet::new(vec![0.1, 0.5], 0.0, BasisMode::Free).is_err());
        assert!(BasisSet::new(vec![0.5], 0.1, BasisMode::Free).is_err());
        assert!(BasisSet::new(vec![0.1, 1.5], 0.1, BasisMode::Free).is_err());
        let start = DVector::zeros(2);
        let free = BasisSet::uniform(4, BasisMode::Free).unwrap();
        assert!(CurveModel::via_point(start.clone(), start, free).is_err());
    }

    #[test]
    fn basis_derivative_matches_central_difference() {
        for mode in [BasisMode::Free, BasisMode::ViaPoint] {
            let basis = BasisSet::uniform(12, mode).unwrap();
            for &tau in &[0.05, 0.31, 0.5, 0.77, 0.93] {
                let (_, d) = basis.eval_with_derivative(tau).unwrap();
                let eps = 1e-6;
                let fd =
                    (basis.eval(tau + eps).unwrap() - basis.eval(tau - eps).unwrap()) / (2.0 * eps);
                assert!((d - &fd).norm() <= 1e-5 * fd.norm().max(1e-3));
            }
        }
    }

    #[test]
    fn straight_line_when_params_vanish() {
        let model = via_model(2, 10);
        let q = model.eval(&model.zero_params(), 0.3).unwrap();
        let CurveKind::ViaPoint { start, goal } = model.kind() else {
            unreachable!()
        };
        assert!((q - (start * 0.7 + goal * 0.3)).norm() < 1e-15);
    }

    #[test]
    fn eval_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = via_model(3, 15);
        let w = random_params(&mut rng, 3, 15);
        let tau = 0.42;
        let q = model.eval(&w, tau).unwrap();
        let CurveKind::ViaPoint { start, goal } = model.kind() else {
            unreachable!()
        };
        let h = model.basis().width();
        let raw: Vec<f64> = model
            .basis()
            .centers()
            .iter()
            .map(|c| (-(tau - c) * (tau - c) / (2.0 * h)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        for i in 0..3 {
            let mut acc = (1.0 - tau) * start[i] + tau * goal[i];
            for j in 0..15 {
                acc += w.matrix()[(i, j)] * tau * (1.0 - tau) * raw[j] / sum;
            }
            assert!((q[i] - acc).abs() < 1e-13);
        }
    }

    #[test]
    fn params_shape_is_checked() {
        let model = via_model(2, 10);
        assert!(matches!(
            model.eval(&CurveParams::zeros(3, 10), 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn velocity_of_straight_line_is_constant() {
        let model = via_model(2, 10);
        let profile = PhaseProfile::linear(4.0).unwrap();
        let CurveKind::ViaPoint { start, goal } = model.kind() else {
            unreachable!()
        };
        let expected = (goal - start) / 4.0;
        for &t in &[0.0, 1.3, 4.0] {
            let v = model.velocity(&model.zero_params(), &profile, t).unwrap();
            assert!((v - &expected).norm() < 1e-14);
        }
        assert!(matches!(
            model.velocity(&model.zero_params(), &profile, 4.1),
            Err(Error::TimeDomain { .. })
        ));
    }

    #[test]
    fn velocity_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = via_model(2, 20);
        let w = random_params(&mut rng, 2, 20);
        for profile in [
            PhaseProfile::linear(3.0).unwrap(),
            PhaseProfile::smoothstep(3.0).unwrap(),
        ] {
            for &t in &[0.4, 1.1, 2.2] {
                let v = model.velocity(&w, &profile, t).unwrap();
                let eps = 1e-6;
                let ahead = model.eval(&w, profile.phase(t + eps).unwrap()).unwrap();
                let behind = model.eval(&w, profile.phase(t - eps).unwrap()).unwrap();
                let fd = (ahead - behind) / (2.0 * eps);
                assert!((&v - &fd).norm() / fd.norm() < 1e-5, "t = {t}");
            }
        }
    }

    #[test]
    fn plateau_freezes_motion() {
        let profile =
            PhaseProfile::piecewise(vec![(0.0, 0.0), (1.0, 0.4), (2.0, 0.4), (3.0, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = via_model(2, 8);
        let w = random_params(&mut rng, 2, 8);
        let v = model.velocity(&w, &profile, 1.5).unwrap();
        assert_eq!(v.norm(), 0.0);
        assert!(
            PhaseProfile::piecewise(vec![(0.0, 0.0), (1.0, 0.6), (2.0, 0.5), (3.0, 1.0)]).is_err()
        );
    }

    fn synthetic_trajectory(
        model: &CurveModel,
        w: &CurveParams,
        samples: usize,
        t0: f64,
    ) -> TimedTrajectory {
        let times: Vec<f64> = (0..samples)
            .map(|k| t0 + 2.0 * k as f64 / (samples - 1) as f64)
            .collect();
        let configs = (0..samples)
            .map(|k| model.eval(w, k as f64 / (samples - 1) as f64).unwrap())
            .collect();
        TimedTrajectory::new(times, configs).unwrap()
    }

    #[test]
    fn fit_recovers_generating_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = via_model(2, 20);
        let w0 = random_params(&mut rng, 2, 20);
        // non-zero start time is shifted away
        let traj = synthetic_trajectory(&model, &w0, 120, 0.7);
        let w = model.fit(&traj).unwrap();
        let rel = (w.matrix() - w0.matrix()).norm() / w0.matrix().norm();
        assert!(rel < 1e-8, "relative error {rel}");
    }

    #[test]
    fn fit_of_straight_line_is_zero() {
        let model = via_model(2, 20);
        let traj = synthetic_trajectory(&model, &model.zero_params(), 80, 0.0);
        assert!(model.fit(&traj).unwrap().matrix().amax() < 1e-10);
    }

    #[test]
    fn fit_is_optimal_against_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = via_model(2, 20);
        let w0 = random_params(&mut rng, 2, 20);
        let clean = synthetic_trajectory(&model, &w0, 100, 0.0);
        let noisy = TimedTrajectory::new(
            clean.times().to_vec(),
            clean
                .configs()
                .iter()
                .map(|q| q.map(|v| v + rng.random_range(-0.02..0.02)))
                .collect(),
        )
        .unwrap();
        let w = model.fit(&noisy).unwrap();
        let best = model.fit_objective(&noisy, &w).unwrap();
        for _ in 0..100 {
            let eps = DMatrix::from_fn(2, 20, |_, _| rng.random_range(-1e-3..1e-3));
            let other = CurveParams::new(w.matrix() + eps).unwrap();
            assert!(model.fit_objective(&noisy, &other).unwrap() >= best);
        }
    }

    #[test]
    fn fit_requires_more_samples_than_bases() {
        let model = via_model(2, 20);
        let traj = synthetic_trajectory(&model, &model.zero_params(), 20, 0.0);
        assert!(matches!(model.fit(&traj), Err(Error::Invalid { .. })));
    }

    #[test]
    fn fit_reports_singular_design() {
        // samples clustered at one phase cannot determine every coefficient
        let model = via_model(1, 10);
        let mut times: Vec<f64> = (0..30).map(|k| 0.5 + 1e-9 * k as f64).collect();
        times.insert(0, 0.0);
        times.push(1.0);
        let configs = times
            .iter()
            .map(|_| DVector::from_element(1, 0.1))
            .collect();
        let traj = TimedTrajectory::new(times, configs).unwrap();
        match model.fit(&traj) {
            Err(Error::Singular {
                smallest_singular_value,
                condition,
            }) => {
                assert!(condition > FIT_CONDITION_LIMIT);
                assert!(smallest_singular_value >= 0.0);
            }
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn gram_is_symmetric_positive_definite() {
        for mode in [BasisMode::Free, BasisMode::ViaPoint] {
            let gram = BasisSet::uniform(20, mode).unwrap().gram();
            assert!((&gram - gram.transpose()).amax() < 1e-12);
            assert!(gram.clone().symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn gram_matches_refined_quadrature() {
        let basis = BasisSet::uniform(20, BasisMode::ViaPoint).unwrap();
        let coarse = basis.gram();
        let fine = basis.gram_with(10 * (QUADRATURE_POINTS - 1) + 1);
        assert!((coarse - fine).amax() < 1e-8);
    }

    #[test]
    fn kernel_matrix_is_positive_definite() {
        let basis = BasisSet::uniform(20, BasisMode::ViaPoint).unwrap();
        assert!(basis.kernel_matrix().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn gram_follows_center_permutation() {
        let centers = vec![0.0, 0.2, 0.45, 0.7, 1.0];
        let perm = [3usize, 0, 4, 1, 2];
        let a = BasisSet::new(centers.clone(), 0.02, BasisMode::ViaPoint)
            .unwrap()
            .gram();
        let permuted: Vec<f64> = perm.iter().map(|&i| centers[i]).collect();
        let b = BasisSet::new(permuted, 0.02, BasisMode::ViaPoint)
            .unwrap()
            .gram();
        for i in 0..5 {
            for j in 0..5 {
                assert!((b[(i, j)] - a[(perm[i], perm[j])]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn curve_params_json_is_row_major() {
        let w = CurveParams::new(DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        ))
        .unwrap();
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(
            json,
            r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#
        );
        let back: CurveParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
        assert!(
            serde_json::from_str::<CurveParams>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err()
        );
    }

    #[test]
    fn curve_model_spec_round_trip() {
        let model = via_model(2, 6);
        let spec = model.to_spec().unwrap();
        let again = CurveModel::from_spec(
            &serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(again.to_spec().unwrap(), spec);
        let custom = CurveModel::affine(
            Elementary::new(1, |t| {
                (DVector::from_element(1, t), DVector::from_element(1, 1.0))
            }),
            BasisSet::uniform(4, BasisMode::Free).unwrap(),
        )
        .unwrap();
        assert!(custom.to_spec().is_err());
    }
}
