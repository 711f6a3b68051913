use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mmpp::basis::{BasisMode, BasisSet, CurveModel, CurveModelSpec, CurveParams};
use mmpp::density::{rejection_sample, Density, DensityFamily, SampleFilter};
use mmpp::env::{
    evaluate_success, fit_demos, generate_env, DemoSet, EnvId, Generator, ModelKind, PlanarEnv,
    ATTEMPTS_PER_SAMPLE,
};
use mmpp::geometry::TraceMode;
use mmpp::io;
use mmpp::liegroup::{
    eval_position_curve, eval_rotation_curve, fit_se3_curve, synthetic_pouring_demos,
    Se3CurveParams, Se3Trajectory, POURING_DATASET,
};
use mmpp::plot;
use mmpp::replan::{
    load_obstacle_script, moving_obstacle_scenario, run_episode, training_threshold,
};
use mmpp::trainer::{train, train_se3, ManifoldModel, ModelTarget, TrainConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, Command, Common};

pub const POSE_BASES: usize = 10;
const POSE_SAMPLES: usize = 100;
const MOVING_OBSTACLE: &str = "moving-obstacle";

type Res<T> = Result<T, CliError>;

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Output directory bookkeeping: every written file is listed in
/// `manifest.json`; the wall-clock timestamp goes only to `run.log`.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    files: &'a [String],
}

impl Outputs {
    fn new(dir: PathBuf) -> Res<Self> {
        io::create_dir(&dir)?;
        Ok(Outputs {
            dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Res<()> {
        let p = self.path(name);
        Ok(io::write_text(&p, text)?)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Res<()> {
        let p = self.path(name);
        Ok(io::write_json(&p, value)?)
    }

    fn finish(self, command: &str, seed: u64) -> Res<()> {
        io::write_json(
            &self.dir.join("manifest.json"),
            &Manifest {
                command,
                seed,
                files: &self.files,
            },
        )?;
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let log = self.dir.join("run.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| config_error(format!("cannot open {}: {e}", log.display())))?;
        writeln!(f, "{stamp} {command} seed={seed}")
            .map_err(|e| config_error(format!("cannot write {}: {e}", log.display())))?;
        Ok(())
    }
}

/// Pose demonstration file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDemoSet {
    dataset: String,
    seed: u64,
    trajectories: Vec<Se3Trajectory>,
}

enum Demos {
    Planar(DemoSet),
    Pose(PoseDemoSet),
}

impl Demos {
    fn load(path: &Path) -> Res<Self> {
        let text = io::read_text(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("demo file {}: {e}", path.display())))?;
        if value.get("trajectories").is_some() {
            let set: PoseDemoSet = serde_json::from_value(value)
                .map_err(|e| config_error(format!("demo file {}: {e}", path.display())))?;
            if set.trajectories.is_empty() {
                return Err(config_error(format!(
                    "demo file {} has no trajectories",
                    path.display()
                )));
            }
            Ok(Demos::Pose(set))
        } else {
            Ok(Demos::Planar(DemoSet::load(path)?))
        }
    }

    fn planar(self, path: &Path) -> Res<DemoSet> {
        match self {
            Demos::Planar(d) => Ok(d),
            Demos::Pose(_) => Err(config_error(format!(
                "{} holds pose demos; a planar demo set is required",
                path.display()
            ))),
        }
    }
}

/// Output of `fit`.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ParamFile {
    Planar {
        seed: u64,
        model: CurveModelSpec,
        classes: Vec<usize>,
        params: Vec<CurveParams>,
        residuals: Vec<f64>,
    },
    Pose {
        seed: u64,
        basis: BasisSet,
        params: Vec<Se3CurveParams>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn require(
        &self,
        flag: Option<PathBuf>,
        from_cfg: &Option<PathBuf>,
        name: &str,
    ) -> Res<PathBuf> {
        flag.or_else(|| from_cfg.clone()).ok_or_else(|| {
            config_error(format!(
                "--{name} is required (or set \"{name}\" in the config)"
            ))
        })
    }

    fn family(&self, flag: Option<String>) -> Res<DensityFamily> {
        match flag.as_deref() {
            None => Ok(self.cfg.density.family),
            Some("gmm") => Ok(DensityFamily::Gmm),
            Some("kde") => Ok(DensityFamily::Kde),
            Some(other) => Err(config_error(format!(
                "--density: unknown family {other:?} (expected gmm or kde)"
            ))),
        }
    }

    fn components(&self, flag: Option<usize>, classes: usize) -> usize {
        flag.or(self.cfg.density.components)
            .unwrap_or(classes.max(1))
    }
}

pub fn run(command: Command, common: Common) -> Res<()> {
    let cfg = ExperimentConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx { cfg, seed, out };
    match command {
        Command::SynthDemos { env, count } => synth_demos(&ctx, env, count),
        Command::Fit { demos, bases } => fit(&ctx, demos, bases),
        Command::Train {
            demos,
            alpha,
            epochs,
            latent_dim,
            learning_rate,
            hidden,
            trace_mode,
            bases,
        } => {
            let mut tc = ctx.cfg.train.clone();
            tc.seed = ctx.seed;
            if let Some(a) = alpha {
                tc.alpha = a;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(m) = latent_dim {
                tc.latent_dim = m;
            }
            if let Some(lr) = learning_rate {
                tc.learning_rate = lr;
            }
            if let Some(h) = hidden {
                tc.hidden = parse_widths(&h)?;
            }
            if let Some(t) = trace_mode {
                tc.trace_mode = parse_trace_mode(&t, ctx.seed)?;
            }
            tc.validate()?;
            train_cmd(&ctx, demos, tc, bases)
        }
        Command::Sample {
            model,
            demos,
            from_params,
            index,
            count,
            points,
            density,
            components,
        } => match from_params {
            Some(p) => sample_params(&ctx, &p, index, points),
            None => sample_model(&ctx, model, demos, count, points, density, components),
        },
        Command::Eval {
            demos,
            model,
            kind,
            samples,
            seeds,
            density,
            components,
        } => eval(
            &ctx, demos, model, kind, samples, seeds, density, components,
        ),
        Command::Replan {
            env,
            model,
            demos,
            obstacles,
            density,
            components,
        } => replan(&ctx, env, model, demos, obstacles, density, components),
        Command::ExportPlot {
            model,
            demos,
            count,
            density,
            components,
        } => export_plot(&ctx, model, demos, count, density, components),
    }
}

fn parse_widths(s: &str) -> Res<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| config_error(format!("--hidden: {w:?} is not a positive integer")))
        })
        .collect()
}

fn parse_trace_mode(s: &str, seed: u64) -> Res<TraceMode> {
    if s == "exact" {
        return Ok(TraceMode::Exact);
    }
    if let Some(k) = s.strip_prefix("hutchinson:") {
        let probes = k
            .parse::<usize>()
            .map_err(|_| config_error(format!("--trace-mode: bad probe count {k:?}")))?;
        return Ok(TraceMode::Hutchinson { probes, seed });
    }
    Err(config_error(format!(
        "--trace-mode: expected exact or hutchinson:<probes>, got {s:?}"
    )))
}

fn phases(points: usize) -> Res<Vec<f64>> {
    if points < 2 {
        return Err(config_error("--points must be at least 2"));
    }
    Ok((0..points)
        .map(|k| k as f64 / (points - 1) as f64)
        .collect())
}

fn curve_points(model: &CurveModel, w: &CurveParams, points: usize) -> Res<Vec<DVector<f64>>> {
    phases(points)?
        .into_iter()
        .map(|t| Ok(model.eval(w, t)?))
        .collect()
}

fn synth_demos(ctx: &Ctx, env: Option<String>, count: usize) -> Res<()> {
    let name = env
        .or_else(|| ctx.cfg.env.clone())
        .unwrap_or_else(|| "env1".into());
    let mut out = Outputs::new(ctx.out.clone())?;
    if name == "pouring" {
        let trajectories = synthetic_pouring_demos(count, POSE_SAMPLES, ctx.seed)?;
        out.json(
            "pose_demos.json",
            &PoseDemoSet {
                dataset: POURING_DATASET.into(),
                seed: ctx.seed,
                trajectories,
            },
        )?;
        println!("wrote {count} pose demos to {}", ctx.out.display());
    } else {
        let id: EnvId = name.parse()?;
        let (env, demos) = generate_env(id, ctx.seed)?;
        let set = DemoSet::new(env.clone(), ctx.seed, &demos);
        let p = out.path("demos.json");
        set.save(&p)?;
        let p = out.path("env.json");
        env.save(&p)?;
        let drawn: Vec<(Vec<DVector<f64>>, usize)> = demos
            .iter()
            .map(|d| (d.trajectory.configs().to_vec(), d.class))
            .collect();
        out.text("scene.svg", &plot::scene_svg(&env, &drawn, 0.0))?;
        println!(
            "wrote {} demos for {id} to {}",
            demos.len(),
            ctx.out.display()
        );
    }
    out.finish("synth-demos", ctx.seed)
}

fn fit(ctx: &Ctx, demos: Option<PathBuf>, bases: usize) -> Res<()> {
    let path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
    let mut out = Outputs::new(ctx.out.clone())?;
    match Demos::load(&path)? {
        Demos::Planar(set) => {
            let model = set.env.curve_model()?;
            let demos = set.demos()?;
            let params = fit_demos(&model, &demos)?;
            let residuals = demos
                .iter()
                .zip(&params)
                .map(|(d, w)| model.fit_objective(&d.trajectory, w))
                .collect::<mmpp::Result<Vec<f64>>>()?;
            let worst = residuals.iter().copied().fold(0.0, f64::max);
            out.json(
                "params.json",
                &ParamFile::Planar {
                    seed: ctx.seed,
                    model: model.to_spec()?,
                    classes: demos.iter().map(|d| d.class).collect(),
                    params,
                    residuals,
                },
            )?;
            println!(
                "fitted {} demos (largest residual {worst:.3e})",
                demos.len()
            );
        }
        Demos::Pose(set) => {
            let basis = BasisSet::uniform(bases, BasisMode::ViaPoint)?;
            let params = set
                .trajectories
                .iter()
                .map(|t| fit_se3_curve(&basis, t))
                .collect::<mmpp::Result<Vec<_>>>()?;
            println!("fitted {} pose demos", params.len());
            out.json(
                "params.json",
                &ParamFile::Pose {
                    seed: ctx.seed,
                    basis,
                    params,
                },
            )?;
        }
    }
    out.finish("fit", ctx.seed)
}

fn train_cmd(ctx: &Ctx, demos: Option<PathBuf>, tc: TrainConfig, bases: usize) -> Res<()> {
    let path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
    let model = match Demos::load(&path)? {
        Demos::Planar(set) => {
            let curve = set.env.curve_model()?;
            let params = fit_demos(&curve, &set.demos()?)?;
            train(&params, &curve, &tc)?
        }
        Demos::Pose(set) => {
            let basis = BasisSet::uniform(bases, BasisMode::ViaPoint)?;
            train_se3(&set.trajectories, &basis, &tc)?
        }
    };
    let mut out = Outputs::new(ctx.out.clone())?;
    model.save(&ctx.out)?;
    for f in [
        mmpp::trainer::AUTOENCODER_FILE,
        mmpp::trainer::CURVE_MODEL_FILE,
        mmpp::trainer::TRAIN_CONFIG_FILE,
        mmpp::trainer::LOSS_HISTORY_FILE,
    ] {
        out.files.push(f.into());
    }
    let h = model.history();
    println!(
        "trained {} epochs (alpha {}): reconstruction {:.3e} -> {:.3e}",
        h.total.len(),
        tc.alpha,
        h.reconstruction[0],
        h.reconstruction.last().copied().unwrap_or(f64::NAN)
    );
    out.finish("train", ctx.seed)
}

fn pose_row(
    out: &mut String,
    prefix: &str,
    params: &Se3CurveParams,
    basis: &BasisSet,
    tau: f64,
) -> Res<()> {
    let p = eval_position_curve(params, basis, tau)?;
    let r = eval_rotation_curve(params, basis, tau)?;
    let _ = write!(out, "{prefix}{tau},{},{},{}", p[0], p[1], p[2]);
    for v in r.to_row_vec() {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
    Ok(())
}

const POSE_HEADER: &str = "tau,px,py,pz,r00,r01,r02,r10,r11,r12,r20,r21,r22";

fn sample_params(ctx: &Ctx, path: &Path, index: usize, points: usize) -> Res<()> {
    let file: ParamFile = io::read_json(path)?;
    let mut out = Outputs::new(ctx.out.clone())?;
    let mut csv = String::new();
    let seed = match file {
        ParamFile::Planar {
            model,
            params,
            seed,
            ..
        } => {
            let model = CurveModel::from_spec(&model)?;
            let w = params.get(index).ok_or_else(|| {
                config_error(format!(
                    "--index {index} out of range ({} parameter sets)",
                    params.len()
                ))
            })?;
            csv.push_str("tau");
            for i in 0..model.dim() {
                let _ = write!(csv, ",q{i}");
            }
            csv.push('\n');
            for (tau, q) in phases(points)?
                .into_iter()
                .zip(curve_points(&model, w, points)?)
            {
                let _ = write!(csv, "{tau}");
                for v in q.iter() {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            seed
        }
        ParamFile::Pose {
            basis,
            params,
            seed,
        } => {
            let w = params.get(index).ok_or_else(|| {
                config_error(format!(
                    "--index {index} out of range ({} parameter sets)",
                    params.len()
                ))
            })?;
            csv.push_str(POSE_HEADER);
            csv.push('\n');
            for tau in phases(points)? {
                pose_row(&mut csv, "", w, &basis, tau)?;
            }
            seed
        }
    };
    out.text("curve.csv", &csv)?;
    out.finish("sample", seed)
}

/// Encoded training codes, their class labels and the planar context.
struct LatentData {
    codes: Vec<DVector<f64>>,
    classes: Vec<usize>,
    env: Option<PlanarEnv>,
}

fn latent_data(
    model: &ManifoldModel,
    demos_path: &Path,
    bases_hint: Option<&BasisSet>,
) -> Res<LatentData> {
    match (Demos::load(demos_path)?, model.target()) {
        (Demos::Planar(set), ModelTarget::Curve(curve)) => {
            let demos = set.demos()?;
            let params = fit_demos(curve, &demos)?;
            Ok(LatentData {
                codes: params
                    .iter()
                    .map(|w| model.encode(w))
                    .collect::<mmpp::Result<_>>()?,
                classes: demos.iter().map(|d| d.class).collect(),
                env: Some(set.env),
            })
        }
        (Demos::Pose(set), ModelTarget::Se3 { basis, .. }) => {
            let basis = bases_hint.unwrap_or(basis);
            let codes = set
                .trajectories
                .iter()
                .map(|t| model.encode_se3(&fit_se3_curve(basis, t)?))
                .collect::<mmpp::Result<_>>()?;
            Ok(LatentData {
                classes: vec![0; set.trajectories.len()],
                codes,
                env: None,
            })
        }
        _ => Err(config_error(format!(
            "demo file {} does not match the model's curve type",
            demos_path.display()
        ))),
    }
}

fn fit_density(
    ctx: &Ctx,
    data: &LatentData,
    family: Option<String>,
    components: Option<usize>,
) -> Res<Density> {
    let classes = data.classes.iter().map(|c| c + 1).max().unwrap_or(1);
    Ok(Density::fit(
        ctx.family(family)?,
        &data.codes,
        ctx.components(components, classes),
        ctx.seed,
    )?)
}

fn draw_latent(
    density: &Density,
    codes: &[DVector<f64>],
    count: usize,
    seed: u64,
) -> Res<Vec<DVector<f64>>> {
    let filter = SampleFilter::from_training(
        density,
        codes,
        count.saturating_mul(ATTEMPTS_PER_SAMPLE).max(1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rejection_sample(density, &filter, &mut rng, count)?.samples)
}

fn sample_model(
    ctx: &Ctx,
    model: Option<PathBuf>,
    demos: Option<PathBuf>,
    count: usize,
    points: usize,
    family: Option<String>,
    components: Option<usize>,
) -> Res<()> {
    let model_dir = ctx.require(model, &ctx.cfg.model, "model")?;
    let demos_path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
    let ae = ManifoldModel::load(&model_dir)?;
    let data = latent_data(&ae, &demos_path, None)?;
    let density = fit_density(ctx, &data, family, components)?;
    let zs = draw_latent(&density, &data.codes, count, ctx.seed)?;
    let mut out = Outputs::new(ctx.out.clone())?;
    out.json("density.json", &density)?;
    let mut latent = String::from("sample");
    for i in 0..ae.latent_dim() {
        let _ = write!(latent, ",z{i}");
    }
    latent.push('\n');
    for (k, z) in zs.iter().enumerate() {
        let _ = write!(latent, "{k}");
        for v in z.iter() {
            let _ = write!(latent, ",{v}");
        }
        latent.push('\n');
    }
    out.text("latent_samples.csv", &latent)?;
    let mut csv = String::new();
    match ae.target() {
        ModelTarget::Curve(curve) => {
            csv.push_str("sample,tau");
            for i in 0..curve.dim() {
                let _ = write!(csv, ",q{i}");
            }
            csv.push('\n');
            let mut drawn = Vec::new();
            for (k, z) in zs.iter().enumerate() {
                let qs = curve_points(curve, &ae.decode(z)?, points)?;
                for (tau, q) in phases(points)?.into_iter().zip(&qs) {
                    let _ = write!(csv, "{k},{tau}");
                    for v in q.iter() {
                        let _ = write!(csv, ",{v}");
                    }
                    csv.push('\n');
                }
                drawn.push((qs, 0));
            }
            if let Some(env) = &data.env {
                out.text("samples.svg", &plot::scene_svg(env, &drawn, 0.0))?;
            }
        }
        ModelTarget::Se3 { basis, .. } => {
            let _ = writeln!(csv, "sample,{POSE_HEADER}");
            for (k, z) in zs.iter().enumerate() {
                let params = ae.decode_se3(z)?;
                for tau in phases(points)? {
                    pose_row(&mut csv, &format!("{k},"), &params, basis, tau)?;
                }
            }
        }
    }
    out.text("samples.csv", &csv)?;
    println!("drew {} samples", zs.len());
    out.finish("sample", ctx.seed)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ctx: &Ctx,
    demos: Option<PathBuf>,
    model: Option<PathBuf>,
    kind: Option<String>,
    samples: Option<usize>,
    seeds: Option<usize>,
    family: Option<String>,
    components: Option<usize>,
) -> Res<()> {
    let demos_path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
    let set = Demos::load(&demos_path)?.planar(&demos_path)?;
    let demos = set.demos()?;
    let classes = set.classes();
    let k = ctx.components(components, classes);
    let samples = samples.unwrap_or(ctx.cfg.eval.samples);
    let seeds: Vec<u64> = (0..seeds.unwrap_or(ctx.cfg.eval.seeds) as u64)
        .map(|i| ctx.seed + i)
        .collect();
    let kind_flag = kind
        .or_else(|| ctx.cfg.model_kind.clone())
        .map(|s| s.parse::<ModelKind>())
        .transpose()?;
    let generator = match model.or_else(|| ctx.cfg.model.clone()) {
        Some(dir) => {
            let ae = ManifoldModel::load(&dir)?;
            let kind = if ae.config().alpha > 0.0 {
                ModelKind::Immp
            } else {
                ModelKind::Mmp
            };
            if let Some(flag) = kind_flag {
                if flag != kind {
                    return Err(config_error(format!(
                        "--kind {flag} conflicts with the model in {} (trained as {kind})",
                        dir.display()
                    )));
                }
            }
            let curve = ae.curve_model()?.clone();
            let params = fit_demos(&curve, &demos)?;
            Generator::latent(kind, ae, &params, ctx.family(family)?, k, ctx.seed)?
        }
        None => {
            let kind = kind_flag
                .ok_or_else(|| config_error("eval needs --model or --kind vmp-gauss|vmp-gmm"))?;
            if kind.is_latent() {
                return Err(config_error(format!(
                    "--kind {kind} needs a trained --model"
                )));
            }
            let curve = set.env.curve_model()?;
            let params = fit_demos(&curve, &demos)?;
            Generator::vmp(kind, curve, &params, k, ctx.seed)?
        }
    };
    let report = evaluate_success(&generator, &set.env, samples, &seeds)?;
    let mut out = Outputs::new(ctx.out.clone())?;
    out.text("report.csv", &report.to_csv())?;
    out.text("flags.csv", &report.flags_csv())?;
    println!(
        "{} {}: {:.2} ± {:.2}",
        report.model,
        report.env,
        report.mean(),
        report.std()
    );
    out.finish("eval", ctx.seed)
}

/// Small regularized model for the replanning demo when no bundle is given.
fn quick_model(seed: u64) -> Res<(ManifoldModel, Vec<DVector<f64>>, usize)> {
    let (env, demos) = generate_env(EnvId::Env1, seed)?;
    let curve = env.curve_model()?;
    let params = fit_demos(&curve, &demos)?;
    let tc = TrainConfig {
        alpha: 0.1,
        epochs: 3000,
        hidden: vec![128, 128],
        seed,
        ..TrainConfig::default()
    };
    let ae = train(&params, &curve, &tc)?;
    let codes = params
        .iter()
        .map(|w| ae.encode(w))
        .collect::<mmpp::Result<_>>()?;
    Ok((ae, codes, 2))
}

#[derive(Serialize)]
struct EpisodeSummary {
    seed: u64,
    env: String,
    completed: bool,
    duration: f64,
    ticks: usize,
    replans: usize,
    failures: usize,
    violations: usize,
    max_constraint: f64,
    log_density_threshold: f64,
}

#[allow(clippy::too_many_arguments)]
fn replan(
    ctx: &Ctx,
    env: Option<String>,
    model: Option<PathBuf>,
    demos: Option<PathBuf>,
    obstacles: Option<PathBuf>,
    family: Option<String>,
    components: Option<usize>,
) -> Res<()> {
    let name = env
        .or_else(|| ctx.cfg.env.clone())
        .unwrap_or_else(|| MOVING_OBSTACLE.into());
    let mut scene = if name == MOVING_OBSTACLE {
        moving_obstacle_scenario()
    } else {
        PlanarEnv::load(Path::new(&name))?
    };
    if let Some(script) = obstacles {
        scene.obstacles.retain(|o| o.is_static());
        scene.obstacles.extend(load_obstacle_script(&script)?);
        scene.validate()?;
    }
    let (ae, codes, classes) = match model.or_else(|| ctx.cfg.model.clone()) {
        Some(dir) => {
            let ae = ManifoldModel::load(&dir)?;
            let demos_path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
            let data = latent_data(&ae, &demos_path, None)?;
            let classes = data.classes.iter().map(|c| c + 1).max().unwrap_or(1);
            (ae, data.codes, classes)
        }
        None => quick_model(ctx.seed)?,
    };
    ae.curve_model()?;
    let density = Density::fit(
        ctx.family(family)?,
        &codes,
        ctx.components(components, classes),
        ctx.seed,
    )?;
    let mut rc = ctx.cfg.replan.clone();
    if rc.log_density_threshold.is_none() {
        rc.log_density_threshold = Some(training_threshold(&density, &codes)?);
    }
    let trace = run_episode(&ae, &density, &scene, &rc, ctx.seed)?;
    let mut out = Outputs::new(ctx.out.clone())?;
    out.text("trace.csv", &trace.to_csv())?;
    let path: Vec<DVector<f64>> = trace.ticks.iter().map(|t| t.q.clone()).collect();
    out.text("scene.svg", &plot::scene_svg(&scene, &[(path, 0)], 0.0))?;
    let summary = EpisodeSummary {
        seed: ctx.seed,
        env: scene.name.clone(),
        completed: trace.completed,
        duration: trace.duration(),
        ticks: trace.ticks.len(),
        replans: trace.replans(),
        failures: trace.failures(),
        violations: trace.violations(),
        max_constraint: trace.max_constraint(),
        log_density_threshold: trace.threshold,
    };
    out.json("summary.json", &summary)?;
    println!(
        "episode {}: {} replans, {} infeasible, {} violating ticks, max constraint {:.4}",
        if trace.completed {
            "completed"
        } else {
            "hit the time cap"
        },
        summary.replans,
        summary.failures,
        summary.violations,
        summary.max_constraint
    );
    out.finish("replan", ctx.seed)
}

fn export_plot(
    ctx: &Ctx,
    model: Option<PathBuf>,
    demos: Option<PathBuf>,
    count: usize,
    family: Option<String>,
    components: Option<usize>,
) -> Res<()> {
    let model_dir = ctx.require(model, &ctx.cfg.model, "model")?;
    let demos_path = ctx.require(demos, &ctx.cfg.demos, "demos")?;
    let ae = ManifoldModel::load(&model_dir)?;
    let data = latent_data(&ae, &demos_path, None)?;
    let density = fit_density(ctx, &data, family, components)?;
    let zs = draw_latent(&density, &data.codes, count, ctx.seed)?;
    let mut out = Outputs::new(ctx.out.clone())?;
    let labelled: Vec<(DVector<f64>, usize)> = data
        .codes
        .iter()
        .cloned()
        .zip(data.classes.iter().copied())
        .collect();
    out.text("latent.svg", &plot::latent_svg(&labelled, &zs))?;
    if let (Some(env), ModelTarget::Curve(curve)) = (&data.env, ae.target()) {
        let mut drawn = Vec::new();
        for z in &zs {
            let w = ae.decode(z)?;
            let label = density_label(&density, z);
            drawn.push((curve_points(curve, &w, 100)?, label));
        }
        out.text("samples.svg", &plot::scene_svg(env, &drawn, 0.0))?;
    }
    out.text("loss.svg", &plot::loss_svg(ae.history()))?;
    out.finish("export-plot", ctx.seed)
}

fn density_label(density: &Density, z: &DVector<f64>) -> usize {
    match density {
        Density::Gmm(g) => g.responsibilities(z).argmax().0,
        Density::Kde(_) => 0,
    }
}
