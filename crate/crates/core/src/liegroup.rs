//! SO(3) and SE(3) tools: exponential/logarithm maps, right Jacobians,
//! via-point orientation curves, and the blended pose reconstruction loss.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{solve_basis_least_squares, BasisSet, CurveModel, CurveParams, TimedTrajectory};
use crate::error::{Error, Result};

pub const ORTHONORMAL_TOL: f64 = 1e-9;
pub const SKEW_TOL: f64 = 1e-9;
/// `log_so3` rejects angles at or above `π − BRANCH_MARGIN`.
pub const BRANCH_MARGIN: f64 = 1e-6;
const SMALL_ANGLE: f64 = 1e-6;
const SERIES_ANGLE: f64 = 1e-4;

/// Rotation matrix with `RᵀR = I` and `det R = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotRotation {
                reason: "non-finite entry".into(),
            });
        }
        let drift = (m.transpose() * m - Matrix3::identity()).amax();
        if drift > ORTHONORMAL_TOL {
            return Err(Error::NotRotation {
                reason: format!("|RᵀR − I| = {drift:e}"),
            });
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::NotRotation {
                reason: format!("det R = {det}"),
            });
        }
        Ok(Rotation(m))
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::shape("rotation entries", 9, v.len()));
        }
        Rotation::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn to_row_vec(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    /// Largest entry of `|RᵀR − I|` plus `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
            + (self.0.determinant() - 1.0).abs()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Rotation::from_row_slice(&v).map_err(serde::de::Error::custom)
    }
}

/// Position and orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Rotation,
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let asymmetry = (s + s.transpose()).norm();
    if !(asymmetry < SKEW_TOL) {
        return Err(Error::NotSkew { asymmetry });
    }
    Ok(Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)]))
}

fn vee_unchecked(s: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)])
}

/// Rodrigues formula.
pub fn exp_so3(v: &Vector3<f64>) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SERIES_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm as a rotation vector.
pub fn log_so3(r: &Rotation) -> Result<Vector3<f64>> {
    let m = r.matrix();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta >= PI - BRANCH_MARGIN {
        return Err(Error::Branch { angle: theta });
    }
    let skew = vee_unchecked(&(m - m.transpose()));
    if theta < SMALL_ANGLE {
        return Ok(skew * (0.5 + theta * theta / 12.0));
    }
    Ok(skew * (theta / (2.0 * theta.sin())))
}

/// Right Jacobian: `exp(v + δ) ≈ exp(v) exp(J_r(v) δ)`.
pub fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SERIES_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = hat(v);
    Matrix3::identity() - k * a + k * k * b
}

pub fn right_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let k = hat(v);
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Via-point pose curve parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Se3CurveParams {
    pub w_p: CurveParams,
    pub w_r: CurveParams,
    pub p_i: Vector3<f64>,
    pub p_f: Vector3<f64>,
    pub r_i: Rotation,
    pub r_f: Rotation,
}

impl Se3CurveParams {
    pub fn geodesic(start: Pose, goal: Pose, bases: usize) -> Self {
        Se3CurveParams {
            w_p: CurveParams::zeros(3, bases),
            w_r: CurveParams::zeros(3, bases),
            p_i: start.p,
            p_f: goal.p,
            r_i: start.r,
            r_f: goal.r,
        }
    }

    pub fn num_bases(&self) -> usize {
        self.w_p.shape().1
    }

    fn check(&self, basis: &BasisSet) -> Result<()> {
        let b = basis.len();
        for (name, w) in [
            ("position parameters", &self.w_p),
            ("orientation parameters", &self.w_r),
        ] {
            if w.shape() != (3, b) {
                return Err(Error::Shape {
                    context: name,
                    expected: format!("3x{b}"),
                    got: format!("{}x{}", w.shape().0, w.shape().1),
                });
            }
        }
        Ok(())
    }
}

fn to_vec3(v: DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

pub fn eval_position_curve(
    params: &Se3CurveParams,
    basis: &BasisSet,
    tau: f64,
) -> Result<Vector3<f64>> {
    params.check(basis)?;
    let phi = basis.eval(tau)?;
    Ok(params.p_i * (1.0 - tau) + params.p_f * tau + to_vec3(params.w_p.matrix() * phi))
}

/// `R(τ) = R_i exp(τ log(R_iᵀR_f)) exp([w_R φ(τ)])`.
pub fn eval_rotation_curve(
    params: &Se3CurveParams,
    basis: &BasisSet,
    tau: f64,
) -> Result<Rotation> {
    params.check(basis)?;
    let phi = basis.eval(tau)?;
    let u = log_so3(&(params.r_i.transpose() * params.r_f))?;
    let xi = to_vec3(params.w_r.matrix() * phi);
    Ok(params.r_i * exp_so3(&(u * tau)) * exp_so3(&xi))
}

/// Sampled pose trajectory with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Se3Trajectory {
    times: Vec<f64>,
    positions: Vec<Vector3<f64>>,
    rotations: Vec<Rotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Se3TrajectoryRepr {
    t: Vec<f64>,
    p: Vec<[f64; 3]>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
}

impl Serialize for Se3Trajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        Se3TrajectoryRepr {
            t: self.times.clone(),
            p: self.positions.iter().map(|p| [p[0], p[1], p[2]]).collect(),
            r: self.rotations.iter().map(Rotation::to_row_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Se3Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = Se3TrajectoryRepr::deserialize(d)?;
        let rotations =
            r.r.iter()
                .enumerate()
                .map(|(k, v)| {
                    Rotation::from_row_slice(v)
                        .map_err(|e| serde::de::Error::custom(format!("sample {k}: {e}")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
        let positions = r.p.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        Se3Trajectory::new(r.t, positions, rotations).map_err(serde::de::Error::custom)
    }
}

impl Se3Trajectory {
    /// Validates sample counts, time ordering and that the start-to-goal
    /// rotation lies inside the principal branch of `log`.
    pub fn new(
        times: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        rotations: Vec<Rotation>,
    ) -> Result<Self> {
        if positions.len() != times.len() || rotations.len() != times.len() {
            return Err(Error::invalid(
                "pose trajectory",
                format!(
                    "{} times, {} positions, {} rotations",
                    times.len(),
                    positions.len(),
                    rotations.len()
                ),
            ));
        }
        if positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("pose trajectory", "non-finite position"));
        }
        // reuse the scalar trajectory checks for time ordering
        TimedTrajectory::new(
            times.clone(),
            positions
                .iter()
                .map(|p| DVector::from_column_slice(p.as_slice()))
                .collect(),
        )?;
        log_so3(&(rotations[0].transpose() * rotations[rotations.len() - 1]))?;
        Ok(Se3Trajectory {
            times,
            positions,
            rotations,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn rotations(&self) -> &[Rotation] {
        &self.rotations
    }

    pub fn start(&self) -> Pose {
        Pose {
            p: self.positions[0],
            r: self.rotations[0],
        }
    }

    pub fn goal(&self) -> Pose {
        Pose {
            p: self.positions[self.len() - 1],
            r: self.rotations[self.len() - 1],
        }
    }

    pub fn phases(&self) -> Vec<f64> {
        let t0 = self.times[0];
        let span = self.times[self.len() - 1] - t0;
        self.times
            .iter()
            .map(|t| ((t - t0) / span).clamp(0.0, 1.0))
            .collect()
    }
}

/// Least-squares orientation shape parameters in log coordinates:
/// residuals `r_k = log(exp(−τ_k u) R_iᵀ R_k)` with `u = log(R_iᵀR_f)`, then
/// `w_R = rΦᵀ(ΦΦᵀ)⁻¹`.
pub fn fit_rotation_curve(
    basis: &BasisSet,
    taus: &[f64],
    rotations: &[Rotation],
    r_i: &Rotation,
    r_f: &Rotation,
) -> Result<CurveParams> {
    if taus.len() != rotations.len() {
        return Err(Error::shape(
            "rotation samples",
            taus.len(),
            rotations.len(),
        ));
    }
    if taus.len() <= basis.len() {
        return Err(Error::invalid(
            "pose trajectory",
            format!(
                "fitting {} bases needs more than {} samples",
                basis.len(),
                basis.len()
            ),
        ));
    }
    let u = log_so3(&(r_i.transpose() * *r_f))?;
    let mut resid = DMatrix::zeros(3, taus.len());
    for (k, (tau, r)) in taus.iter().zip(rotations).enumerate() {
        let base_inv = exp_so3(&(u * -tau));
        let v = log_so3(&(base_inv * r_i.transpose() * *r))?;
        resid.set_column(k, &DVector::from_column_slice(v.as_slice()));
    }
    let phi = basis.design_matrix(taus)?;
    CurveParams::new(solve_basis_least_squares(&phi, &resid)?)
}

/// Fits position and orientation parameters with the trajectory's own
/// first and last poses as endpoints.
pub fn fit_se3_curve(basis: &BasisSet, traj: &Se3Trajectory) -> Result<Se3CurveParams> {
    let start = traj.start();
    let goal = traj.goal();
    let pos_model = CurveModel::via_point(
        DVector::from_column_slice(start.p.as_slice()),
        DVector::from_column_slice(goal.p.as_slice()),
        basis.clone(),
    )?;
    let pos_traj = TimedTrajectory::new(
        traj.times.clone(),
        traj.positions
            .iter()
            .map(|p| DVector::from_column_slice(p.as_slice()))
            .collect(),
    )?;
    let w_p = pos_model.fit(&pos_traj)?;
    let w_r = fit_rotation_curve(basis, &traj.phases(), &traj.rotations, &start.r, &goal.r)?;
    Ok(Se3CurveParams {
        w_p,
        w_r,
        p_i: start.p,
        p_f: goal.p,
        r_i: start.r,
        r_f: goal.r,
    })
}

/// `mean_k ‖p_k − p̂(τ_k)‖² + β‖log(R_kᵀ R̂(τ_k))‖²_F` over one trajectory's samples.
fn single_recon_loss(
    traj: &Se3Trajectory,
    params: &Se3CurveParams,
    basis: &BasisSet,
    beta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for ((tau, p), r) in traj
        .phases()
        .iter()
        .zip(&traj.positions)
        .zip(&traj.rotations)
    {
        let dp = p - eval_position_curve(params, basis, *tau)?;
        let e = log_so3(&(r.transpose() * eval_rotation_curve(params, basis, *tau)?))?;
        total += dp.norm_squared() + beta * hat(&e).norm_squared();
    }
    Ok(total / traj.len() as f64)
}

/// Discrete-sum pose reconstruction loss averaged over trajectories.
pub fn se3_recon_loss(
    dataset: &[Se3Trajectory],
    reconstructed: &[Se3CurveParams],
    basis: &BasisSet,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta", format!("{beta} must be positive")));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if dataset.len() != reconstructed.len() {
        return Err(Error::shape(
            "reconstructions",
            dataset.len(),
            reconstructed.len(),
        ));
    }
    let mut total = 0.0;
    for (traj, params) in dataset.iter().zip(reconstructed) {
        total += single_recon_loss(traj, params, basis, beta)?;
    }
    Ok(total / dataset.len() as f64)
}

/// Flat vector layouts used by the pose autoencoder.
///
/// Encoder input: `[w_p (row-major, 3B), w_R (3B), p_f (3), R_f (row-major, 9)]`.
/// Decoder output: `[w_p (3B), w_R (3B), p_f (3), w_f (3)]` with `R_f = exp([w_f])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Se3Layout {
    pub bases: usize,
}

fn row_major(w: &CurveParams) -> impl Iterator<Item = f64> + '_ {
    let (r, c) = w.shape();
    (0..r * c).map(move |k| w.matrix()[(k / c, k % c)])
}

impl Se3Layout {
    pub fn encoder_dim(&self) -> usize {
        6 * self.bases + 12
    }

    pub fn decoder_dim(&self) -> usize {
        6 * self.bases + 6
    }

    pub fn encode_input(&self, params: &Se3CurveParams) -> Result<DVector<f64>> {
        if params.num_bases() != self.bases || params.w_r.shape() != (3, self.bases) {
            return Err(Error::shape(
                "pose parameters",
                self.bases,
                params.num_bases(),
            ));
        }
        let values: Vec<f64> = row_major(&params.w_p)
            .chain(row_major(&params.w_r))
            .chain(params.p_f.iter().copied())
            .chain(params.r_f.to_row_vec())
            .collect();
        Ok(DVector::from_vec(values))
    }

    /// Decoder output vector that reproduces `params` exactly.
    pub fn decoder_target(&self, params: &Se3CurveParams) -> Result<DVector<f64>> {
        let input = self.encode_input(params)?;
        let w_f = log_so3(&params.r_f)?;
        let head = 6 * self.bases + 3;
        Ok(DVector::from_iterator(
            self.decoder_dim(),
            input.iter().take(head).copied().chain(w_f.iter().copied()),
        ))
    }

    pub fn decode_output(&self, y: &DVector<f64>, start: &Pose) -> Result<Se3CurveParams> {
        if y.len() != self.decoder_dim() {
            return Err(Error::shape(
                "pose decoder output",
                self.decoder_dim(),
                y.len(),
            ));
        }
        let b = self.bases;
        let w_p = DMatrix::from_row_slice(3, b, &y.as_slice()[0..3 * b]);
        let w_r = DMatrix::from_row_slice(3, b, &y.as_slice()[3 * b..6 * b]);
        let p_f = Vector3::new(y[6 * b], y[6 * b + 1], y[6 * b + 2]);
        let w_f = Vector3::new(y[6 * b + 3], y[6 * b + 4], y[6 * b + 5]);
        Ok(Se3CurveParams {
            w_p: CurveParams::new(w_p)?,
            w_r: CurveParams::new(w_r)?,
            p_i: start.p,
            p_f,
            r_i: start.r,
            r_f: exp_so3(&w_f),
        })
    }

    /// Loss of one decoded output against a trajectory and its gradient
    /// with respect to the decoder output vector.
    pub fn loss_and_gradient(
        &self,
        traj: &Se3Trajectory,
        y: &DVector<f64>,
        basis: &BasisSet,
        beta: f64,
    ) -> Result<(f64, DVector<f64>)> {
        if basis.len() != self.bases {
            return Err(Error::shape("basis size", self.bases, basis.len()));
        }
        let start = traj.start();
        let params = self.decode_output(y, &start)?;
        let b = self.bases;
        let w_f = Vector3::new(y[6 * b + 3], y[6 * b + 4], y[6 * b + 5]);
        let u = log_so3(&(start.r.transpose() * params.r_f))?;
        // d u / d w_f, shared by all samples
        let du_dwf = right_jacobian_inv(&u) * right_jacobian(&w_f);
        let mut grad = DVector::zeros(self.decoder_dim());
        let mut loss = 0.0;
        let scale = 1.0 / traj.len() as f64;
        for ((tau, p), r) in traj
            .phases()
            .iter()
            .zip(&traj.positions)
            .zip(&traj.rotations)
        {
            let tau = *tau;
            let phi = basis.eval(tau)?;
            let p_hat =
                start.p * (1.0 - tau) + params.p_f * tau + to_vec3(params.w_p.matrix() * &phi);
            let xi = to_vec3(params.w_r.matrix() * &phi);
            let exp_xi = exp_so3(&xi);
            let r_hat = start.r * exp_so3(&(u * tau)) * exp_xi;
            let e = log_so3(&(r.transpose() * r_hat))?;
            let dp = p_hat - p;
            loss += scale * (dp.norm_squared() + 2.0 * beta * e.norm_squared());

            let g_p = dp * (2.0 * scale);
            let g_e = e * (4.0 * beta * scale);
            let jinv_e = right_jacobian_inv(&e);
            let g_xi = (jinv_e * right_jacobian(&xi)).transpose() * g_e;
            let d_wf =
                jinv_e * exp_xi.matrix().transpose() * right_jacobian(&(u * tau)) * du_dwf * tau;
            let g_wf = d_wf.transpose() * g_e;
            for i in 0..3 {
                for j in 0..b {
                    grad[i * b + j] += g_p[i] * phi[j];
                    grad[3 * b + i * b + j] += g_xi[i] * phi[j];
                }
                grad[6 * b + i] += g_p[i] * tau;
                grad[6 * b + 3 + i] += g_wf[i];
            }
        }
        Ok((loss, grad))
    }
}

/// Display name of the synthetic pose dataset family.
pub const POURING_DATASET: &str = "synthetic-pouring";

/// Pouring-like pose demonstrations: one shared start pose, final cup
/// positions spread left to right, a lift through the middle, and a tilt
/// that grows toward the goal.
pub fn synthetic_pouring_demos(
    count: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Se3Trajectory>> {
    if count == 0 || samples < 3 {
        return Err(Error::invalid(
            "pouring demos",
            "need at least one demo and three samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = 5.0;
    let p_i = Vector3::new(0.0, 0.0, 0.3);
    (0..count)
        .map(|d| {
            let s = if count == 1 {
                0.0
            } else {
                -1.0 + 2.0 * d as f64 / (count - 1) as f64
            };
            let s = s + rng.random_range(-0.05..0.05);
            let p_f = Vector3::new(0.35 * s, 0.45, 0.32 + rng.random_range(-0.01..0.01));
            let lift = 0.18 + rng.random_range(-0.02..0.02);
            let tilt = 1.6 + 0.2 * s.abs();
            let yaw = 0.5 * s;
            let mut times = Vec::with_capacity(samples);
            let mut positions = Vec::with_capacity(samples);
            let mut rotations = Vec::with_capacity(samples);
            for k in 0..samples {
                let tau = k as f64 / (samples - 1) as f64;
                let sigma = tau * tau * (3.0 - 2.0 * tau);
                let bump = (PI * tau).sin();
                let p = p_i * (1.0 - sigma)
                    + p_f * sigma
                    + Vector3::new(0.06 * s * (2.0 * PI * tau).sin(), 0.0, lift * bump);
                let r = exp_so3(&Vector3::new(0.0, 0.0, yaw * sigma))
                    * exp_so3(&Vector3::new(0.15 * bump, tilt * sigma * sigma, 0.0));
                times.push(duration * tau);
                positions.push(p);
                rotations.push(r);
            }
            Se3Trajectory::new(times, positions, rotations)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisMode;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec3(r: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            r.random_range(-scale..scale),
            r.random_range(-scale..scale),
            r.random_range(-scale..scale),
        )
    }

    fn random_rotation(r: &mut ChaCha8Rng, max_angle: f64) -> Rotation {
        loop {
            let v = random_vec3(r, max_angle);
            if v.norm() < max_angle {
                return exp_so3(&v);
            }
        }
    }

    fn basis(b: usize) -> BasisSet {
        BasisSet::uniform(b, BasisMode::ViaPoint).unwrap()
    }

    fn random_params(r: &mut ChaCha8Rng, b: usize, scale: f64) -> Se3CurveParams {
        let mut entry = |_, _| {
            if scale > 0.0 {
                r.random_range(-scale..scale)
            } else {
                0.0
            }
        };
        Se3CurveParams {
            w_p: CurveParams::new(DMatrix::from_fn(3, b, &mut entry)).unwrap(),
            w_r: CurveParams::new(DMatrix::from_fn(3, b, &mut entry)).unwrap(),
            p_i: random_vec3(r, 1.0),
            p_f: random_vec3(r, 1.0),
            r_i: random_rotation(r, 2.0),
            r_f: random_rotation(r, 2.0),
        }
    }

    #[test]
    fn hat_vee_basics() {
        let v = Vector3::new(0.3, -1.2, 2.5);
        assert_eq!(vee(&hat(&v)).unwrap(), v);
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(hat(&Vector3::x()) * Vector3::y(), Vector3::z());
        assert!(matches!(
            vee(&Matrix3::identity()),
            Err(Error::NotSkew { .. })
        ));
    }

    #[test]
    fn exp_log_identities() {
        assert_eq!(*exp_so3(&Vector3::zeros()).matrix(), Matrix3::identity());
        assert_eq!(log_so3(&Rotation::identity()).unwrap(), Vector3::zeros());
        let quarter = exp_so3(&(Vector3::z() * (PI / 2.0)));
        assert!((quarter * Vector3::x() - Vector3::y()).amax() < 1e-15);
    }

    #[test]
    fn log_inverts_exp() {
        let mut r = rng(1);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let v = loop {
                let v = random_vec3(&mut r, PI);
                if v.norm() < PI - 0.1 {
                    break v;
                }
            };
            worst = worst.max((log_so3(&exp_so3(&v)).unwrap() - v).amax());
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn small_angles_round_trip() {
        for scale in [1e-3, 1e-5, 1e-7, 1e-9] {
            let v = Vector3::new(0.3, -0.5, 0.8) * scale;
            let back = log_so3(&exp_so3(&v)).unwrap();
            assert!((back - v).amax() < 1e-15 + 1e-9 * scale);
        }
    }

    #[test]
    fn half_turn_is_a_branch_error() {
        let r = exp_so3(&(Vector3::x() * PI));
        assert!(matches!(log_so3(&r), Err(Error::Branch { .. })));
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation::new(Matrix3::identity() * 2.0).is_err());
        assert!(Rotation::new(-Matrix3::identity()).is_err());
        assert!(Rotation::new(*exp_so3(&Vector3::new(0.1, 0.2, 0.3)).matrix()).is_ok());
    }

    #[test]
    fn right_jacobians_match_finite_differences() {
        let mut r = rng(2);
        for _ in 0..20 {
            let v = random_vec3(&mut r, 1.5);
            let jr = right_jacobian(&v);
            let eps = 1e-6;
            for a in 0..3 {
                let mut d = Vector3::zeros();
                d[a] = eps;
                // exp(v)ᵀ exp(v + d) ≈ exp(J_r d)
                let plus = log_so3(&(exp_so3(&v).transpose() * exp_so3(&(v + d)))).unwrap();
                let minus = log_so3(&(exp_so3(&v).transpose() * exp_so3(&(v - d)))).unwrap();
                let fd = (plus - minus) / (2.0 * eps);
                assert!((fd - jr.column(a)).amax() < 1e-8);
            }
            assert!((right_jacobian_inv(&v) * jr - Matrix3::identity()).amax() < 1e-12);
        }
        let tiny = Vector3::new(1e-6, -2e-6, 3e-7);
        assert!(
            (right_jacobian_inv(&tiny) * right_jacobian(&tiny) - Matrix3::identity()).amax()
                < 1e-14
        );
    }

    #[test]
    fn rotation_curve_endpoints_and_geodesic() {
        let mut r = rng(3);
        let bs = basis(10);
        for _ in 0..100 {
            let params = random_params(&mut r, 10, 0.5);
            let start = eval_rotation_curve(&params, &bs, 0.0).unwrap();
            let end = eval_rotation_curve(&params, &bs, 1.0).unwrap();
            assert!((start.matrix() - params.r_i.matrix()).amax() < 1e-9);
            assert!((end.matrix() - params.r_f.matrix()).amax() < 1e-9);
        }
        let mut params = random_params(&mut r, 10, 0.5);
        params.w_r = CurveParams::zeros(3, 10);
        let u = log_so3(&(params.r_i.transpose() * params.r_f)).unwrap();
        for tau in [0.1, 0.4, 0.75] {
            let got = eval_rotation_curve(&params, &bs, tau).unwrap();
            let want = params.r_i * exp_so3(&(u * tau));
            assert!((got.matrix() - want.matrix()).amax() < 1e-14);
        }
    }

    #[test]
    fn rotation_curve_stays_orthonormal() {
        let mut r = rng(4);
        let bs = basis(20);
        for _ in 0..20 {
            let params = random_params(&mut r, 20, 1.0);
            for k in 0..=100 {
                let rot = eval_rotation_curve(&params, &bs, k as f64 / 100.0).unwrap();
                assert!(rot.orthonormality_error() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_curve_is_left_equivariant() {
        let mut r = rng(5);
        let bs = basis(8);
        let mut params = random_params(&mut r, 8, 0.0);
        params.w_r = CurveParams::zeros(3, 8);
        let q = random_rotation(&mut r, 2.5);
        let mut moved = params.clone();
        moved.r_i = q * params.r_i;
        moved.r_f = q * params.r_f;
        for tau in [0.0, 0.3, 0.9] {
            let a = q * eval_rotation_curve(&params, &bs, tau).unwrap();
            let b = eval_rotation_curve(&moved, &bs, tau).unwrap();
            assert!((a.matrix() - b.matrix()).amax() < 1e-12);
        }
    }

    fn synthesize(params: &Se3CurveParams, bs: &BasisSet, samples: usize) -> Se3Trajectory {
        let taus: Vec<f64> = (0..samples)
            .map(|k| k as f64 / (samples - 1) as f64)
            .collect();
        Se3Trajectory::new(
            taus.iter().map(|t| 2.0 * t).collect(),
            taus.iter()
                .map(|t| eval_position_curve(params, bs, *t).unwrap())
                .collect(),
            taus.iter()
                .map(|t| eval_rotation_curve(params, bs, *t).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fit_recovers_known_orientation_parameters() {
        let mut r = rng(6);
        let bs = basis(12);
        let params = random_params(&mut r, 12, 0.2);
        let traj = synthesize(&params, &bs, 80);
        let fitted = fit_se3_curve(&bs, &traj).unwrap();
        assert!((fitted.w_r.matrix() - params.w_r.matrix()).amax() < 1e-6);
        assert!((fitted.w_p.matrix() - params.w_p.matrix()).amax() < 1e-6);
    }

    #[test]
    fn geodesic_trajectory_fits_to_zero() {
        let mut r = rng(7);
        let bs = basis(10);
        let mut params = random_params(&mut r, 10, 0.0);
        params.w_r = CurveParams::zeros(3, 10);
        let traj = synthesize(&params, &bs, 60);
        let fitted = fit_se3_curve(&bs, &traj).unwrap();
        assert!(fitted.w_r.matrix().amax() < 1e-10);
    }

    #[test]
    fn orientation_error_decreases_with_more_bases() {
        let traj = synthetic_pouring_demos(1, 150, 3).unwrap().remove(0);
        let mut prev = f64::INFINITY;
        for b in [3, 5, 8, 12, 20] {
            let bs = basis(b);
            let fitted = fit_se3_curve(&bs, &traj).unwrap();
            let mut err = 0.0;
            for (tau, rot) in traj.phases().iter().zip(traj.rotations()) {
                let e =
                    log_so3(&(rot.transpose() * eval_rotation_curve(&fitted, &bs, *tau).unwrap()))
                        .unwrap();
                err += e.norm_squared();
            }
            assert!(err < prev, "B={b}: {err} !< {prev}");
            prev = err;
        }
    }

    #[test]
    fn recon_loss_properties() {
        let bs = basis(10);
        let demos = synthetic_pouring_demos(3, 60, 1).unwrap();
        let fits: Vec<Se3CurveParams> = demos
            .iter()
            .map(|d| fit_se3_curve(&bs, d).unwrap())
            .collect();
        let exact: Vec<Se3CurveParams> = fits.clone();
        let base = se3_recon_loss(&demos, &exact, &bs, 1.0).unwrap();
        // fit residual only; a curve drawn from its own params has zero loss
        let synthetic: Vec<Se3Trajectory> = fits.iter().map(|p| synthesize(p, &bs, 60)).collect();
        assert!(se3_recon_loss(&synthetic, &fits, &bs, 1.0).unwrap() < 1e-20);
        assert!(base >= 0.0);

        // position-only offset
        let e = Vector3::new(0.1, -0.2, 0.05);
        let shifted: Vec<Se3Trajectory> = synthetic
            .iter()
            .map(|t| {
                Se3Trajectory::new(
                    t.times().to_vec(),
                    t.positions().iter().map(|p| p + e).collect(),
                    t.rotations().to_vec(),
                )
                .unwrap()
            })
            .collect();
        for beta in [0.5, 1.0, 7.0] {
            let l = se3_recon_loss(&shifted, &fits, &bs, beta).unwrap();
            assert!((l - e.norm_squared()).abs() < 1e-12);
        }

        let rot_only = |beta| {
            se3_recon_loss(&demos, &fits, &bs, beta).unwrap()
                - se3_recon_loss(&demos, &fits, &bs, 1e-300).unwrap()
        };
        assert!((rot_only(2.0) - 2.0 * rot_only(1.0)).abs() < 1e-12 * rot_only(1.0).max(1e-300));
        assert!(se3_recon_loss(&demos, &fits, &bs, 0.0).is_err());
    }

    #[test]
    fn decoder_target_round_trips() {
        let bs = basis(6);
        let demo = synthetic_pouring_demos(1, 40, 2).unwrap().remove(0);
        let fit = fit_se3_curve(&bs, &demo).unwrap();
        let layout = Se3Layout { bases: 6 };
        let y = layout.decoder_target(&fit).unwrap();
        assert_eq!(y.len(), layout.decoder_dim());
        assert_eq!(
            layout.encode_input(&fit).unwrap().len(),
            layout.encoder_dim()
        );
        let back = layout.decode_output(&y, &demo.start()).unwrap();
        assert_eq!(back.w_p, fit.w_p);
        assert_eq!(back.w_r, fit.w_r);
        assert!((back.r_f.matrix() - fit.r_f.matrix()).amax() < 1e-12);
    }

    #[test]
    fn analytic_loss_gradient_matches_finite_differences() {
        let bs = basis(6);
        let layout = Se3Layout { bases: 6 };
        let demo = synthetic_pouring_demos(2, 30, 9).unwrap().remove(1);
        let mut r = rng(8);
        let y = DVector::from_fn(layout.decoder_dim(), |_, _| r.random_range(-0.3..0.3));
        let (loss, grad) = layout.loss_and_gradient(&demo, &y, &bs, 1.3).unwrap();
        let direct = single_recon_loss(
            &demo,
            &layout.decode_output(&y, &demo.start()).unwrap(),
            &bs,
            1.3,
        )
        .unwrap();
        assert!((loss - direct).abs() < 1e-12);
        let eps = 1e-6;
        for k in 0..y.len() {
            let mut yp = y.clone();
            yp[k] += eps;
            let mut ym = y.clone();
            ym[k] -= eps;
            let fd = (layout.loss_and_gradient(&demo, &yp, &bs, 1.3).unwrap().0
                - layout.loss_and_gradient(&demo, &ym, &bs, 1.3).unwrap().0)
                / (2.0 * eps);
            assert!(
                (grad[k] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "entry {k}: {} vs {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn trajectory_json_round_trip_and_validation() {
        let demo = synthetic_pouring_demos(1, 10, 4).unwrap().remove(0);
        let json = serde_json::to_string(&demo).unwrap();
        assert!(json.contains("\"R\""));
        let back: Se3Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, demo);
        let bad =
            r#"{"t":[0,1],"p":[[0,0,0],[1,0,0]],"R":[[1,0,0,0,1,0,0,0,1],[2,0,0,0,1,0,0,0,1]]}"#;
        assert!(serde_json::from_str::<Se3Trajectory>(bad).is_err());
        let flipped =
            r#"{"t":[0,1],"p":[[0,0,0],[1,0,0]],"R":[[1,0,0,0,1,0,0,0,1],[1,0,0,0,-1,0,0,0,-1]]}"#;
        assert!(serde_json::from_str::<Se3Trajectory>(flipped).is_err());
    }
}
