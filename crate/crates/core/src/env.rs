//! Planar obstacle environments, demonstration synthesis and the
//! success-rate protocol shared by every generator kind.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisMode, BasisSet, CurveModel, CurveParams, TimedTrajectory};
use crate::density::{
    rejection_sample, Density, DensityFamily, LatentDensity, RejectionOutcome, SampleFilter,
};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::trainer::{flatten, unflatten, ManifoldModel};

pub const COLLISION_SAMPLES: usize = 500;
pub const DEMO_SAMPLES: usize = 100;
pub const DEMO_RETRIES: usize = 100;
pub const PLANAR_BASES: usize = 20;
/// Minimum obstacle clearance of a synthesized demo.
pub const DEMO_CLEARANCE: f64 = 0.02;
pub const DEFAULT_SAMPLES: usize = 500;
pub const DEFAULT_SEEDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub center: [f64; 2],
}

/// Disc obstacle; the center is piecewise linear in time through the
/// waypoints and held constant outside their time span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub radius: f64,
    pub waypoints: Vec<Waypoint>,
}

impl Obstacle {
    pub fn fixed(center: [f64; 2], radius: f64) -> Self {
        Obstacle {
            radius,
            waypoints: vec![Waypoint { t: 0.0, center }],
        }
    }

    pub fn is_static(&self) -> bool {
        self.waypoints.len() == 1
    }

    pub fn center(&self, t: f64) -> [f64; 2] {
        let w = &self.waypoints;
        if t <= w[0].t {
            return w[0].center;
        }
        for seg in w.windows(2) {
            if t <= seg[1].t {
                let s = (t - seg[0].t) / (seg[1].t - seg[0].t);
                return [
                    seg[0].center[0] + s * (seg[1].center[0] - seg[0].center[0]),
                    seg[0].center[1] + s * (seg[1].center[1] - seg[0].center[1]),
                ];
            }
        }
        w[w.len() - 1].center
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::invalid(
                "obstacle",
                format!("radius must be positive, got {}", self.radius),
            ));
        }
        if self.waypoints.is_empty() {
            return Err(Error::invalid(
                "obstacle",
                "at least one waypoint is required",
            ));
        }
        if self.waypoints.windows(2).any(|p| p[1].t <= p[0].t) {
            return Err(Error::invalid(
                "obstacle",
                "waypoint times must be strictly increasing",
            ));
        }
        if self
            .waypoints
            .iter()
            .any(|w| !w.t.is_finite() || w.center.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid("obstacle", "waypoints must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarEnv {
    pub name: String,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// `[[x_min, y_min], [x_max, y_max]]`.
    pub bounds: [[f64; 2]; 2],
    pub obstacles: Vec<Obstacle>,
}

impl PlanarEnv {
    pub fn validate(&self) -> Result<()> {
        for o in &self.obstacles {
            o.validate()?;
        }
        let [lo, hi] = self.bounds;
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(Error::invalid(
                "environment",
                "bounds must have positive extent",
            ));
        }
        for (what, p) in [("start", self.start), ("goal", self.goal)] {
            if collision_check(&DVector::from_row_slice(&p), self, 0.0) > 0.0 {
                return Err(Error::invalid(
                    "environment",
                    format!("{what} configuration is inside an obstacle"),
                ));
            }
        }
        Ok(())
    }

    pub fn start_vec(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.start)
    }

    pub fn goal_vec(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.goal)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let env: PlanarEnv = read_json(path)?;
        env.validate()?;
        Ok(env)
    }

    /// Via-point model between the environment endpoints with `B=20` bases.
    pub fn curve_model(&self) -> Result<CurveModel> {
        CurveModel::via_point(
            self.start_vec(),
            self.goal_vec(),
            BasisSet::uniform(PLANAR_BASES, BasisMode::ViaPoint)?,
        )
    }
}

/// `max_o (r_o − ‖q − c_o(t)‖)`; positive means collision.
pub fn collision_check(q: &DVector<f64>, env: &PlanarEnv, t: f64) -> f64 {
    env.obstacles
        .iter()
        .map(|o| {
            let c = o.center(t);
            o.radius - ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2)).sqrt()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Env1,
    Env2,
    Env3,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::Env1, EnvId::Env2, EnvId::Env3];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::Env1 => "env1",
            EnvId::Env2 => "env2",
            EnvId::Env3 => "env3",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "env1" => Ok(EnvId::Env1),
            "env2" => Ok(EnvId::Env2),
            "env3" => Ok(EnvId::Env3),
            _ => Err(Error::invalid(
                "environment id",
                format!("unknown environment {s:?} (expected env1, env2 or env3)"),
            )),
        }
    }
}

/// Demo synthesis recipe: one homotopy class per gate height at `x = 0.5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSpec {
    pub per_class: Vec<usize>,
    pub gates: Vec<f64>,
    pub noise: f64,
    pub samples: usize,
    pub duration: f64,
}

impl DemoSpec {
    pub fn classes(&self) -> usize {
        self.gates.len()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class.len() != self.gates.len() {
            return Err(Error::shape(
                "demo classes",
                self.gates.len(),
                self.per_class.len(),
            ));
        }
        if self.per_class.contains(&0) {
            return Err(Error::invalid(
                "demo spec",
                "every class needs at least one demo",
            ));
        }
        if !(self.noise >= 0.0) || !(self.duration > 0.0) || self.samples < 2 {
            return Err(Error::invalid(
                "demo spec",
                "noise must be >= 0, duration > 0 and samples >= 2",
            ));
        }
        Ok(())
    }
}

const BOUNDS: [[f64; 2]; 2] = [[-0.2, -0.75], [1.2, 0.75]];

/// Synthetic obstacle layout and demo recipe for each environment.
pub fn env_layout(id: EnvId) -> (PlanarEnv, DemoSpec) {
    let (obstacles, gates, per_class, noise) = match id {
        EnvId::Env1 => (
            vec![Obstacle::fixed([0.5, 0.0], 0.15)],
            vec![-0.3, 0.3],
            vec![5, 5],
            0.03,
        ),
        EnvId::Env2 => (
            vec![
                Obstacle::fixed([0.5, -0.15], 0.1),
                Obstacle::fixed([0.5, 0.15], 0.1),
            ],
            vec![-0.35, 0.0, 0.35],
            vec![5, 5, 5],
            0.02,
        ),
        EnvId::Env3 => (
            vec![
                Obstacle::fixed([0.5, -0.3], 0.1),
                Obstacle::fixed([0.5, 0.0], 0.1),
                Obstacle::fixed([0.5, 0.3], 0.1),
            ],
            vec![-0.45, -0.15, 0.15, 0.45],
            vec![5, 5, 5, 5],
            0.015,
        ),
    };
    (
        PlanarEnv {
            name: id.name().into(),
            start: [0.0, 0.0],
            goal: [1.0, 0.0],
            bounds: BOUNDS,
            obstacles,
        },
        DemoSpec {
            per_class,
            gates,
            noise,
            samples: DEMO_SAMPLES,
            duration: 1.0,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub class: usize,
    pub trajectory: TimedTrajectory,
}

fn catmull_rom(p: &[[f64; 2]], u: f64) -> [f64; 2] {
    let segs = p.len() - 1;
    let s = (u * segs as f64).min(segs as f64 - 1e-12).max(0.0);
    let i = s.floor() as usize;
    let t = s - i as f64;
    let get = |k: isize| -> [f64; 2] {
        if k < 0 {
            [2.0 * p[0][0] - p[1][0], 2.0 * p[0][1] - p[1][1]]
        } else if k as usize > segs {
            [
                2.0 * p[segs][0] - p[segs - 1][0],
                2.0 * p[segs][1] - p[segs - 1][1],
            ]
        } else {
            p[k as usize]
        }
    };
    let (p0, p1, p2, p3) = (
        get(i as isize - 1),
        get(i as isize),
        get(i as isize + 1),
        get(i as isize + 2),
    );
    let (t2, t3) = (t * t, t * t * t);
    let mut out = [0.0; 2];
    for d in 0..2 {
        out[d] = 0.5
            * (2.0 * p1[d]
                + (p2[d] - p0[d]) * t
                + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                + (3.0 * p1[d] - p0[d] - 3.0 * p2[d] + p3[d]) * t3);
    }
    out
}

fn template(env: &PlanarEnv, gate: f64) -> Vec<[f64; 2]> {
    let [x0, y0] = env.start;
    let [x1, y1] = env.goal;
    let lerp = |s: f64, dy: f64| [x0 + s * (x1 - x0), y0 + s * (y1 - y0) + dy];
    vec![
        env.start,
        lerp(0.2, 0.7 * gate),
        lerp(0.5, gate),
        lerp(0.8, 0.7 * gate),
        env.goal,
    ]
}

/// Synthesizes jittered spline demos for each class of `spec`.
pub fn generate_demos(env: &PlanarEnv, spec: &DemoSpec, seed: u64) -> Result<Vec<Demo>> {
    env.validate()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        Normal::new(0.0, spec.noise).map_err(|e| Error::invalid("demo spec", e.to_string()))?;
    let mut demos = Vec::with_capacity(spec.total());
    for (class, (&gate, &count)) in spec.gates.iter().zip(&spec.per_class).enumerate() {
        let base = template(env, gate);
        for k in 0..count {
            let mut accepted = None;
            for _ in 0..DEMO_RETRIES {
                let mut pts = base.clone();
                for p in pts.iter_mut().take(base.len() - 1).skip(1) {
                    p[0] += noise.sample(&mut rng);
                    p[1] += noise.sample(&mut rng);
                }
                let clear = (0..COLLISION_SAMPLES).all(|j| {
                    let q = catmull_rom(&pts, j as f64 / (COLLISION_SAMPLES - 1) as f64);
                    collision_check(&DVector::from_row_slice(&q), env, 0.0) <= -DEMO_CLEARANCE
                });
                if clear {
                    accepted = Some(pts);
                    break;
                }
            }
            let pts = accepted.ok_or_else(|| {
                Error::Generation(format!(
                    "{}: demo {k} of class {class} still collides after {DEMO_RETRIES} retries",
                    env.name
                ))
            })?;
            let l = spec.samples;
            let times: Vec<f64> = (0..l)
                .map(|i| spec.duration * i as f64 / (l - 1) as f64)
                .collect();
            let configs: Vec<DVector<f64>> = (0..l)
                .map(|i| DVector::from_row_slice(&catmull_rom(&pts, i as f64 / (l - 1) as f64)))
                .collect();
            demos.push(Demo {
                class,
                trajectory: TimedTrajectory::new(times, configs)?,
            });
        }
    }
    Ok(demos)
}

pub fn generate_env(id: EnvId, seed: u64) -> Result<(PlanarEnv, Vec<Demo>)> {
    let (env, spec) = env_layout(id);
    let demos = generate_demos(&env, &spec, seed)?;
    Ok((env, demos))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    class: usize,
    t: Vec<f64>,
    q: Vec<[f64; 2]>,
}

/// Demonstration file: environment, seed and samples of every demo.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSet {
    pub env: PlanarEnv,
    pub seed: u64,
    demos: Vec<DemoRecord>,
}

impl DemoSet {
    pub fn new(env: PlanarEnv, seed: u64, demos: &[Demo]) -> Self {
        DemoSet {
            env,
            seed,
            demos: demos
                .iter()
                .map(|d| DemoRecord {
                    class: d.class,
                    t: d.trajectory.times().to_vec(),
                    q: d.trajectory
                        .configs()
                        .iter()
                        .map(|q| [q[0], q[1]])
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn demos(&self) -> Result<Vec<Demo>> {
        self.demos
            .iter()
            .map(|r| {
                Ok(Demo {
                    class: r.class,
                    trajectory: TimedTrajectory::new(
                        r.t.clone(),
                        r.q.iter().map(|q| DVector::from_row_slice(q)).collect(),
                    )?,
                })
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        self.demos.iter().map(|d| d.class + 1).max().unwrap_or(0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: DemoSet = read_json(path)?;
        set.env.validate()?;
        set.demos()?;
        Ok(set)
    }
}

/// True when the curve touches an obstacle at any of 500 uniform phases.
pub fn trajectory_collides(model: &CurveModel, w: &CurveParams, env: &PlanarEnv) -> Result<bool> {
    for j in 0..COLLISION_SAMPLES {
        let q = model.eval(w, j as f64 / (COLLISION_SAMPLES - 1) as f64)?;
        if collision_check(&q, env, 0.0) > 0.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "vmp-gauss")]
    VmpGauss,
    #[serde(rename = "vmp-gmm")]
    VmpGmm,
    #[serde(rename = "mmp++")]
    Mmp,
    #[serde(rename = "immp++")]
    Immp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::VmpGauss,
        ModelKind::VmpGmm,
        ModelKind::Mmp,
        ModelKind::Immp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::VmpGauss => "vmp-gauss",
            ModelKind::VmpGmm => "vmp-gmm",
            ModelKind::Mmp => "mmp++",
            ModelKind::Immp => "immp++",
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, ModelKind::Mmp | ModelKind::Immp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vmp-gauss" => Ok(ModelKind::VmpGauss),
            "vmp-gmm" => Ok(ModelKind::VmpGmm),
            "mmp++" | "mmp" => Ok(ModelKind::Mmp),
            "immp++" | "immp" => Ok(ModelKind::Immp),
            _ => Err(Error::invalid(
                "model kind",
                format!("unknown model {s:?} (expected vmp-gauss, vmp-gmm, mmp++ or immp++)"),
            )),
        }
    }
}

/// Attempts allowed per requested sample during rejection sampling.
pub const ATTEMPTS_PER_SAMPLE: usize = 200;

/// Density plus decode step; the only part that differs between kinds.
#[derive(Debug, Clone)]
pub struct Generator {
    pub kind: ModelKind,
    pub curve: CurveModel,
    pub density: Density,
    pub filter: SampleFilter,
    pub autoencoder: Option<ManifoldModel>,
}

impl Generator {
    /// Baseline density over flattened curve parameters: one Gaussian for
    /// `VmpGauss`, `components` for `VmpGmm`.
    pub fn vmp(
        kind: ModelKind,
        curve: CurveModel,
        params: &[CurveParams],
        components: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = match kind {
            ModelKind::VmpGauss => 1,
            ModelKind::VmpGmm => components,
            _ => {
                return Err(Error::invalid(
                    "model kind",
                    format!("{kind} is not a curve-space baseline"),
                ))
            }
        };
        let points: Vec<DVector<f64>> = params.iter().map(flatten).collect();
        let density = Density::fit(DensityFamily::Gmm, &points, k, seed)?;
        let filter = SampleFilter::from_training(&density, &points, usize::MAX)?;
        Ok(Generator {
            kind,
            curve,
            density,
            filter,
            autoencoder: None,
        })
    }

    /// Latent density over the encoded training parameters.
    pub fn latent(
        kind: ModelKind,
        autoencoder: ManifoldModel,
        params: &[CurveParams],
        family: DensityFamily,
        components: usize,
        seed: u64,
    ) -> Result<Self> {
        if !kind.is_latent() {
            return Err(Error::invalid(
                "model kind",
                format!("{kind} is not a latent model"),
            ));
        }
        let codes: Vec<DVector<f64>> = params
            .iter()
            .map(|w| autoencoder.encode(w))
            .collect::<Result<_>>()?;
        let density = Density::fit(family, &codes, components, seed)?;
        let filter = SampleFilter::from_training(&density, &codes, usize::MAX)?;
        Ok(Generator {
            kind,
            curve: autoencoder.curve_model()?.clone(),
            density,
            filter,
            autoencoder: Some(autoencoder),
        })
    }

    pub fn decode(&self, s: &DVector<f64>) -> Result<CurveParams> {
        match &self.autoencoder {
            Some(ae) => ae.decode(s),
            None => unflatten(s, self.curve.dim(), self.curve.num_bases()),
        }
    }

    /// Rejection-samples `count` density draws and decodes them.
    pub fn draw(
        &self,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<CurveParams>, RejectionOutcome)> {
        let filter = SampleFilter {
            max_attempts: count.saturating_mul(ATTEMPTS_PER_SAMPLE).max(1),
            ..self.filter
        };
        let outcome = rejection_sample(&self.density, &filter, rng, count)?;
        let params = outcome
            .samples
            .iter()
            .map(|s| self.decode(s))
            .collect::<Result<_>>()?;
        Ok((params, outcome))
    }

    pub fn density(&self) -> &dyn LatentDensity {
        &self.density
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: ModelKind,
    pub env: String,
    pub num_samples: usize,
    pub seeds: Vec<u64>,
    /// Percent of collision-free samples per seed.
    pub success_rates: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    /// Collision flag of every sample, per seed.
    pub collisions: Vec<Vec<bool>>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        self.success_rates.iter().sum::<f64>() / self.success_rates.len() as f64
    }

    /// Population standard deviation over seeds.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self
            .success_rates
            .iter()
            .map(|r| (r - m).powi(2))
            .sum::<f64>()
            / self.success_rates.len() as f64)
            .sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,env,seed,num_samples,success_rate,acceptance_rate\n");
        for k in 0..self.seeds.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.model,
                self.env,
                self.seeds[k],
                self.num_samples,
                self.success_rates[k],
                self.acceptance_rates[k]
            );
        }
        let _ = writeln!(
            out,
            "{},{},mean,{},{},",
            self.model,
            self.env,
            self.num_samples,
            self.mean()
        );
        let _ = writeln!(
            out,
            "{},{},std,{},{},",
            self.model,
            self.env,
            self.num_samples,
            self.std()
        );
        out
    }

    pub fn flags_csv(&self) -> String {
        let mut out = String::from("seed,sample,collision\n");
        for (seed, flags) in self.seeds.iter().zip(&self.collisions) {
            for (i, c) in flags.iter().enumerate() {
                let _ = writeln!(out, "{seed},{i},{}", u8::from(*c));
            }
        }
        out
    }
}

/// Success-rate protocol: per seed, `num_samples` rejection samples are
/// decoded and collision-checked on the 500-point phase grid.
pub fn evaluate_success(
    generator: &Generator,
    env: &PlanarEnv,
    num_samples: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if num_samples == 0 || seeds.is_empty() {
        return Err(Error::invalid(
            "evaluation",
            "need at least one sample and one seed",
        ));
    }
    let mut report = EvalReport {
        model: generator.kind,
        env: env.name.clone(),
        num_samples,
        seeds: seeds.to_vec(),
        success_rates: Vec::new(),
        acceptance_rates: Vec::new(),
        collisions: Vec::new(),
    };
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, outcome) = generator.draw(num_samples, &mut rng)?;
        let flags: Vec<bool> = params
            .iter()
            .map(|w| trajectory_collides(&generator.curve, w, env))
            .collect::<Result<_>>()?;
        let free = flags.iter().filter(|c| !**c).count();
        report
            .success_rates
            .push(100.0 * free as f64 / num_samples as f64);
        report.acceptance_rates.push(outcome.acceptance_rate);
        report.collisions.push(flags);
    }
    Ok(report)
}

/// Fits every demo with the environment's via-point model.
pub fn fit_demos(model: &CurveModel, demos: &[Demo]) -> Result<Vec<CurveParams>> {
    demos.iter().map(|d| model.fit(&d.trajectory)).collect()
}
