//! Dual-rate online replanning of latent coordinates and phase against
//! time-varying constraints, simulated on a virtual clock.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{CurveModel, CurveParams};
use crate::density::{rejection_sample, LatentDensity, SampleFilter};
use crate::env::{collision_check, env_layout, EnvId, Obstacle, PlanarEnv, Waypoint};
use crate::error::{Error, Result};
use crate::trainer::ManifoldModel;

/// Decoder from latent codes to curve parameters of a fixed curve model.
pub trait LatentCurve {
    fn latent_dim(&self) -> usize;
    fn curve(&self) -> &CurveModel;
    fn decode_params(&self, z: &DVector<f64>) -> Result<CurveParams>;
}

impl LatentCurve for ManifoldModel {
    fn latent_dim(&self) -> usize {
        ManifoldModel::latent_dim(self)
    }

    fn curve(&self) -> &CurveModel {
        self.curve_model()
            .expect("replanning needs a planar curve model")
    }

    fn decode_params(&self, z: &DVector<f64>) -> Result<CurveParams> {
        self.decode(z)
    }
}

/// `C(q, t) ≤ 0` is feasible.
pub trait Constraint {
    fn value(&self, q: &DVector<f64>, t: f64) -> f64;
}

impl Constraint for PlanarEnv {
    fn value(&self, q: &DVector<f64>, t: f64) -> f64 {
        collision_check(q, self, t)
    }
}

pub struct FnConstraint<F>(pub F);

impl<F: Fn(&DVector<f64>, f64) -> f64> Constraint for FnConstraint<F> {
    fn value(&self, q: &DVector<f64>, t: f64) -> f64 {
        (self.0)(q, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplanConfig {
    /// Look-ahead window `t_w` in seconds.
    pub window: f64,
    /// Nominal duration `T` in seconds.
    pub total_time: f64,
    pub gain: f64,
    pub control_hz: f64,
    pub replan_hz: f64,
    pub alpha_time: f64,
    pub delta_back: f64,
    /// Defaults to the smallest training log-likelihood when unset.
    pub log_density_threshold: Option<f64>,
    pub window_points: usize,
    pub eta_points: usize,
    /// Time samples for holding the new state over one replan period.
    pub hold_points: usize,
    pub tau_points: usize,
    pub budget: usize,
    /// Perturbation scales relative to the spread of density samples.
    pub perturbation_scales: Vec<f64>,
    /// The episode stops at `time_cap_factor · T` if unfinished.
    pub time_cap_factor: f64,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        ReplanConfig {
            window: 1.0,
            total_time: 5.0,
            gain: 0.05,
            control_hz: 1000.0,
            replan_hz: 10.0,
            alpha_time: 100.0,
            delta_back: 0.05,
            log_density_threshold: None,
            window_points: 51,
            eta_points: 11,
            hold_points: 5,
            tau_points: 6,
            budget: 512,
            perturbation_scales: vec![0.05, 0.2, 0.5],
            time_cap_factor: 3.0,
        }
    }
}

impl ReplanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("replan config", reason));
        if !(self.window > 0.0) {
            return bad(format!("window must be positive, got {}", self.window));
        }
        if !(self.total_time > 0.0) {
            return bad(format!(
                "total_time must be positive, got {}",
                self.total_time
            ));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad(format!("gain must lie in (0, 1], got {}", self.gain));
        }
        if !(self.replan_hz > 0.0 && self.replan_hz < self.control_hz) {
            return bad(format!(
                "replan_hz must be positive and below control_hz ({} vs {})",
                self.replan_hz, self.control_hz
            ));
        }
        let ratio = self.control_hz / self.replan_hz;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!(
                "control_hz / replan_hz must be an integer, got {ratio}"
            ));
        }
        if !(self.delta_back >= 0.0) {
            return bad(format!("delta_back must be >= 0, got {}", self.delta_back));
        }
        if !(self.alpha_time >= 0.0) {
            return bad(format!("alpha_time must be >= 0, got {}", self.alpha_time));
        }
        if self.window_points < 2
            || self.eta_points < 2
            || self.hold_points < 1
            || self.tau_points < 1
        {
            return bad(
                "window_points and eta_points must be >= 2, hold_points and tau_points >= 1".into(),
            );
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        if self.perturbation_scales.iter().any(|s| !(*s > 0.0)) {
            return bad("perturbation scales must be positive".into());
        }
        if !(self.time_cap_factor >= 1.0) {
            return bad(format!(
                "time_cap_factor must be >= 1, got {}",
                self.time_cap_factor
            ));
        }
        if self.log_density_threshold.is_some_and(f64::is_nan) {
            return bad("log_density_threshold is NaN".into());
        }
        Ok(())
    }

    fn ticks_per_replan(&self) -> usize {
        (self.control_hz / self.replan_hz).round() as usize
    }

    fn threshold(&self) -> Result<f64> {
        self.log_density_threshold.ok_or_else(|| {
            Error::invalid(
                "replan config",
                "log_density_threshold must be set before replanning",
            )
        })
    }
}

/// Smallest log-likelihood of the training codes.
pub fn training_threshold(density: &dyn LatentDensity, codes: &[DVector<f64>]) -> Result<f64> {
    Ok(SampleFilter::from_training(density, codes, 1)?.threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanState {
    pub z: DVector<f64>,
    pub tau: f64,
    pub goal_z: DVector<f64>,
    pub goal_tau: f64,
    pub violation: bool,
}

impl ReplanState {
    pub fn new(z: DVector<f64>) -> Self {
        ReplanState {
            goal_z: z.clone(),
            z,
            tau: 0.0,
            goal_tau: 0.0,
            violation: false,
        }
    }
}

fn grid(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |j| {
        if n == 1 {
            a
        } else {
            a + (b - a) * j as f64 / (n - 1) as f64
        }
    })
}

/// Whether the curve violates the constraint anywhere on the phase window
/// `[τ, min(τ + t_w/T, 1)]` when executed from `t_start` at nominal speed.
fn window_violated(
    curve: &CurveModel,
    w: &CurveParams,
    tau: f64,
    t_start: f64,
    constraint: &dyn Constraint,
    cfg: &ReplanConfig,
) -> Result<bool> {
    let end = (tau + cfg.window / cfg.total_time).min(1.0);
    for tb in grid(tau, end, cfg.window_points) {
        let q = curve.eval(w, tb)?;
        if constraint.value(&q, t_start + (tb - tau) * cfg.total_time) > 0.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Violation prediction over the look-ahead window of the current state.
pub fn predict_violation(
    model: &dyn LatentCurve,
    constraint: &dyn Constraint,
    z: &DVector<f64>,
    tau: f64,
    t_now: f64,
    cfg: &ReplanConfig,
) -> Result<bool> {
    let w = model.decode_params(z)?;
    window_violated(model.curve(), &w, tau, t_now, constraint, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplanSolution {
    pub z: DVector<f64>,
    pub tau: f64,
    pub objective: f64,
    /// Candidates checked before one passed.
    pub evaluated: usize,
}

/// Wall time at which the exponential approach `1 − (1−k)^n` reaches
/// the point `η z + (1−η) z'`, capped at one replan period.
fn eta_time(eta: f64, t_now: f64, cfg: &ReplanConfig) -> f64 {
    let period = 1.0 / cfg.replan_hz;
    if eta <= 0.0 {
        return t_now + period;
    }
    if cfg.gain >= 1.0 {
        return t_now;
    }
    let ticks = eta.ln() / (1.0 - cfg.gain).ln();
    t_now + (ticks / cfg.control_hz).clamp(0.0, period)
}

#[allow(clippy::too_many_arguments)]
fn candidate_feasible(
    model: &dyn LatentCurve,
    density: &dyn LatentDensity,
    constraint: &dyn Constraint,
    z: &DVector<f64>,
    tau: f64,
    zc: &DVector<f64>,
    wc: &CurveParams,
    tc: f64,
    t_now: f64,
    eps: f64,
    cfg: &ReplanConfig,
) -> Result<bool> {
    let curve = model.curve();
    let period = 1.0 / cfg.replan_hz;
    // hold at the new state until the next replan tick, then the window
    let q_hold = curve.eval(wc, tc)?;
    for t in grid(t_now, t_now + period, cfg.hold_points) {
        if constraint.value(&q_hold, t) > 0.0 {
            return Ok(false);
        }
    }
    if window_violated(curve, wc, tc, t_now + period, constraint, cfg)? {
        return Ok(false);
    }
    // straight segment between current and candidate state
    for eta in grid(0.0, 1.0, cfg.eta_points).skip(1) {
        let ze = z * eta + zc * (1.0 - eta);
        if density.logpdf(&ze) < eps {
            return Ok(false);
        }
        if eta >= 1.0 {
            continue;
        }
        let te = eta * tau + (1.0 - eta) * tc;
        let q = curve.eval(&model.decode_params(&ze)?, te)?;
        if constraint.value(&q, eta_time(eta, t_now, cfg)) > 0.0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Sampling-based solve of the replanning problem. Candidates are the
/// current code, density samples and Gaussian perturbations of the current
/// code, crossed with a phase grid over `[τ−δ, τ]`; they are checked in
/// order of increasing objective (ties by index) and the first feasible one
/// is returned.
#[allow(clippy::too_many_arguments)]
pub fn solve_replan(
    model: &dyn LatentCurve,
    density: &dyn LatentDensity,
    constraint: &dyn Constraint,
    z: &DVector<f64>,
    tau: f64,
    t_now: f64,
    cfg: &ReplanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ReplanSolution> {
    cfg.validate()?;
    let eps = cfg.threshold()?;
    let m = z.len();
    let n_z = (cfg.budget / cfg.tau_points).max(1);
    let rest = n_z - 1;
    let n_density = if cfg.perturbation_scales.is_empty() {
        rest
    } else {
        rest / 2
    };
    let mut codes = Vec::with_capacity(n_z);
    codes.push(z.clone());
    let samples: Vec<DVector<f64>> = (0..n_density).map(|_| density.sample(rng)).collect();
    let spread = if samples.len() > 1 {
        let mean = samples.iter().fold(DVector::zeros(m), |a, s| a + s) / samples.len() as f64;
        (samples
            .iter()
            .map(|s| (s - &mean).norm_squared())
            .sum::<f64>()
            / samples.len() as f64)
            .sqrt()
    } else {
        1.0
    };
    let spread = if spread > 0.0 { spread } else { 1.0 };
    codes.extend(samples);
    let scales = &cfg.perturbation_scales;
    for j in 0..rest - n_density {
        let s = scales[j % scales.len()] * spread;
        let noise = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        codes.push(z + noise * s);
    }
    let lowest = (tau - cfg.delta_back).max(0.0);
    let taus: Vec<f64> = if lowest < tau {
        grid(tau, lowest, cfg.tau_points).collect()
    } else {
        vec![tau]
    };

    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(codes.len() * taus.len());
    for (i, zc) in codes.iter().enumerate() {
        let dz = (z - zc).norm_squared();
        for (j, tc) in taus.iter().enumerate() {
            candidates.push((dz + cfg.alpha_time * (tau - tc).powi(2), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut decoded: Vec<Option<CurveParams>> = vec![None; codes.len()];
    let mut in_dist: Vec<Option<bool>> = vec![None; codes.len()];
    for (evaluated, &(objective, i, j)) in candidates.iter().take(cfg.budget).enumerate() {
        let zc = &codes[i];
        let ok = *in_dist[i].get_or_insert_with(|| density.logpdf(zc) >= eps);
        if !ok {
            continue;
        }
        if decoded[i].is_none() {
            decoded[i] = Some(model.decode_params(zc)?);
        }
        let wc = decoded[i].as_ref().expect("decoded above");
        if candidate_feasible(
            model, density, constraint, z, tau, zc, wc, taus[j], t_now, eps, cfg,
        )? {
            return Ok(ReplanSolution {
                z: zc.clone(),
                tau: taus[j],
                objective,
                evaluated: evaluated + 1,
            });
        }
    }
    Err(Error::ReplanInfeasible {
        evaluated: candidates.len().min(cfg.budget),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplanEvent {
    None,
    Accepted,
    Infeasible,
}

impl ReplanEvent {
    fn code(self) -> u8 {
        match self {
            ReplanEvent::None => 0,
            ReplanEvent::Accepted => 1,
            ReplanEvent::Infeasible => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub tau: f64,
    pub z: DVector<f64>,
    pub q: DVector<f64>,
    pub constraint: f64,
    pub violation: bool,
    pub event: ReplanEvent,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub threshold: f64,
    pub ticks: Vec<TickRecord>,
    /// `τ` reached 1 with no pending violation before the time cap.
    pub completed: bool,
}

impl EpisodeTrace {
    pub fn replans(&self) -> usize {
        self.ticks
            .iter()
            .filter(|t| t.event == ReplanEvent::Accepted)
            .count()
    }

    pub fn failures(&self) -> usize {
        self.ticks
            .iter()
            .filter(|t| t.event == ReplanEvent::Infeasible)
            .count()
    }

    pub fn max_constraint(&self) -> f64 {
        self.ticks
            .iter()
            .map(|t| t.constraint)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn violations(&self) -> usize {
        self.ticks.iter().filter(|t| t.constraint > 0.0).count()
    }

    pub fn duration(&self) -> f64 {
        self.ticks.last().map_or(0.0, |t| t.t)
    }

    /// Index of the first tick after the first accepted replan has been
    /// executed for one replan period.
    pub fn first_replan(&self) -> Option<usize> {
        self.ticks
            .iter()
            .position(|t| t.event == ReplanEvent::Accepted)
    }

    pub fn to_csv(&self) -> String {
        let (m, n) = self
            .ticks
            .first()
            .map_or((0, 0), |t| (t.z.len(), t.q.len()));
        let mut out = String::from("t,tau");
        for i in 0..m {
            let _ = write!(out, ",z{i}");
        }
        for i in 0..n {
            let _ = write!(out, ",q{i}");
        }
        out.push_str(",constraint,c_v,replan,log_density\n");
        for r in &self.ticks {
            let _ = write!(out, "{},{}", r.t, r.tau);
            for v in r.z.iter().chain(r.q.iter()) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                r.constraint,
                u8::from(r.violation),
                r.event.code(),
                r.log_density
            );
        }
        out
    }
}

const INITIAL_DRAW_ATTEMPTS: usize = 100_000;
const PHASE_SNAP: f64 = 1e-9;

/// Runs the replanning loop on a virtual clock at `f_c` with replanning
/// checks every `f_c/f_p` ticks. An infeasible replan holds the current
/// state and is retried on the next check.
pub fn run_episode(
    model: &dyn LatentCurve,
    density: &dyn LatentDensity,
    constraint: &dyn Constraint,
    cfg: &ReplanConfig,
    seed: u64,
) -> Result<EpisodeTrace> {
    cfg.validate()?;
    let eps = cfg.threshold()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filter = SampleFilter::new(eps, INITIAL_DRAW_ATTEMPTS)?;
    let z0 = rejection_sample(density, &filter, &mut rng, 1)?
        .samples
        .remove(0);
    let mut state = ReplanState::new(z0);
    let every = cfg.ticks_per_replan();
    let max_ticks = (cfg.time_cap_factor * cfg.total_time * cfg.control_hz).ceil() as usize;
    let step = 1.0 / (cfg.control_hz * cfg.total_time);
    let curve = model.curve();
    let mut w = model.decode_params(&state.z)?;
    let mut ticks = Vec::new();
    let mut completed = false;
    for n in 0..=max_ticks {
        let t = n as f64 / cfg.control_hz;
        let mut event = ReplanEvent::None;
        if n % every == 0 {
            if window_violated(curve, &w, state.tau, t, constraint, cfg)? {
                match solve_replan(
                    model, density, constraint, &state.z, state.tau, t, cfg, &mut rng,
                ) {
                    Ok(sol) => {
                        state.goal_z = sol.z;
                        state.goal_tau = sol.tau;
                        event = ReplanEvent::Accepted;
                    }
                    Err(Error::ReplanInfeasible { .. }) => {
                        state.goal_z = state.z.clone();
                        state.goal_tau = state.tau;
                        event = ReplanEvent::Infeasible;
                    }
                    Err(e) => return Err(e),
                }
                state.violation = true;
            } else {
                state.violation = false;
            }
        }
        let q = curve.eval(&w, state.tau)?;
        ticks.push(TickRecord {
            t,
            tau: state.tau,
            z: state.z.clone(),
            constraint: constraint.value(&q, t),
            q,
            violation: state.violation,
            event,
            log_density: density.logpdf(&state.z),
        });
        if state.tau >= 1.0 && !state.violation {
            completed = true;
            break;
        }
        if state.violation {
            state.z += (&state.goal_z - &state.z) * cfg.gain;
            state.tau = (state.tau + cfg.gain * (state.goal_tau - state.tau)).clamp(0.0, 1.0);
            w = model.decode_params(&state.z)?;
        } else {
            state.tau += step;
            if state.tau > 1.0 - PHASE_SNAP {
                state.tau = 1.0;
            }
        }
    }
    Ok(EpisodeTrace {
        seed,
        threshold: eps,
        ticks,
        completed,
    })
}

/// Env1 layout plus a disc that sweeps down across the workspace during
/// the nominal motion.
pub fn moving_obstacle_scenario() -> PlanarEnv {
    let (mut env, _) = env_layout(EnvId::Env1);
    env.name = "moving-obstacle".into();
    env.obstacles.push(Obstacle {
        radius: 0.08,
        waypoints: vec![
            Waypoint {
                t: 0.0,
                center: [0.75, 0.6],
            },
            Waypoint {
                t: 5.0,
                center: [0.75, -0.6],
            },
        ],
    });
    env
}

/// Obstacle script file: a JSON list of obstacles.
pub fn load_obstacle_script(path: &std::path::Path) -> Result<Vec<Obstacle>> {
    let obstacles: Vec<Obstacle> = crate::io::read_json(path)?;
    let probe = PlanarEnv {
        name: "script".into(),
        start: [f64::MAX, f64::MAX],
        goal: [f64::MAX, f64::MAX],
        bounds: [[0.0, 0.0], [1.0, 1.0]],
        obstacles: obstacles.clone(),
    };
    probe.validate()?;
    Ok(obstacles)
}
