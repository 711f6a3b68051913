//! Autoencoder training on curve parameters, with optional isometric
//! regularization of the decoder.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, CurveModel, CurveModelSpec, CurveParams};
use crate::error::{Error, Result};
use crate::geometry::{curvegeom_euclidean, evaluate_distortion, CurveGeomMetric, TraceMode};
use crate::io::{read_json, read_text, write_json, write_text};
use crate::liegroup::{fit_se3_curve, Pose, Se3CurveParams, Se3Layout, Se3Trajectory};
use crate::nn::{Adam, Mlp};

pub const MIXUP_ETA: f64 = 0.2;

/// Row-major flattening: entry `(i, j)` lands at `i·B + j`.
pub fn flatten(w: &CurveParams) -> DVector<f64> {
    let (n, b) = w.shape();
    DVector::from_fn(n * b, |k, _| w.matrix()[(k / b, k % b)])
}

pub fn unflatten(v: &DVector<f64>, n: usize, b: usize) -> Result<CurveParams> {
    if v.len() != n * b {
        return Err(Error::shape("flattened parameters", n * b, v.len()));
    }
    CurveParams::new(DMatrix::from_row_slice(n, b, v.as_slice()))
}

/// `δ ~ U[−η, 1+η]`.
pub fn mixup_coefficient<R: Rng + ?Sized>(rng: &mut R, eta: f64) -> f64 {
    rng.random_range(-eta..=1.0 + eta)
}

/// `δ z_i + (1−δ) z_j` with `δ ~ U[−0.2, 1.2]`.
pub fn mixup_sample<R: Rng + ?Sized>(
    zi: &DVector<f64>,
    zj: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if zi.len() != zj.len() {
        return Err(Error::shape("mixup pair", zi.len(), zj.len()));
    }
    let delta = mixup_coefficient(rng, MIXUP_ETA);
    Ok(mix(zi, zj, delta))
}

fn mix(zi: &DVector<f64>, zj: &DVector<f64>, delta: f64) -> DVector<f64> {
    zi * delta + zj * (1.0 - delta)
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256, 256]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    /// Weight of the distortion term; zero disables it entirely.
    pub alpha: f64,
    pub eta_mix: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub trace_mode: TraceMode,
    /// Hidden widths shared by encoder and decoder (decoder mirrors them).
    pub hidden: Vec<usize>,
    pub mixup_batch: usize,
    /// Rotation weight of the pose reconstruction loss.
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 2,
            alpha: 0.0,
            eta_mix: MIXUP_ETA,
            epochs: 5000,
            learning_rate: 1e-3,
            seed: 0,
            trace_mode: TraceMode::Exact,
            hidden: default_hidden(),
            mixup_batch: 16,
            beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("train config", reason));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            ));
        }
        if !(self.eta_mix >= 0.0) {
            return bad(format!("eta_mix must be >= 0, got {}", self.eta_mix));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.alpha > 0.0 && self.mixup_batch == 0 {
            return bad("mixup_batch must be positive when alpha > 0".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

/// Per-epoch training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub reconstruction: Vec<f64>,
    /// Distortion of the epoch's mixup batch; NaN when the term is disabled.
    pub distortion: Vec<f64>,
    pub total: Vec<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,reconstruction,distortion,total\n");
        for k in 0..self.total.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                k, self.reconstruction[k], self.distortion[k], self.total[k]
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut h = History::default();
        for (line_no, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::invalid(
                        "loss history",
                        format!("line {}: bad number {s:?}", line_no + 1),
                    )
                })
            };
            if f.len() != 4 {
                return Err(Error::invalid(
                    "loss history",
                    format!("line {} has {} fields", line_no + 1, f.len()),
                ));
            }
            h.reconstruction.push(parse(f[1])?);
            h.distortion.push(parse(f[2])?);
            h.total.push(parse(f[3])?);
        }
        Ok(h)
    }
}

/// What the decoder output represents.
#[derive(Debug, Clone)]
pub enum ModelTarget {
    Curve(CurveModel),
    Se3 { basis: BasisSet, start: Pose },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case", deny_unknown_fields)]
enum TargetRepr {
    Curve { model: CurveModelSpec },
    Se3 { basis: BasisSet, start: Pose },
}

impl ModelTarget {
    fn to_repr(&self) -> Result<TargetRepr> {
        Ok(match self {
            ModelTarget::Curve(m) => TargetRepr::Curve {
                model: m.to_spec()?,
            },
            ModelTarget::Se3 { basis, start } => TargetRepr::Se3 {
                basis: basis.clone(),
                start: *start,
            },
        })
    }

    fn from_repr(r: TargetRepr) -> Result<Self> {
        Ok(match r {
            TargetRepr::Curve { model } => ModelTarget::Curve(CurveModel::from_spec(&model)?),
            TargetRepr::Se3 { basis, start } => ModelTarget::Se3 { basis, start },
        })
    }
}

/// Trained encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct ManifoldModel {
    encoder: Mlp,
    decoder: Mlp,
    target: ModelTarget,
    config: TrainConfig,
    history: History,
    metric_evaluations: u64,
}

/// Reconstruction objective over a batch of network outputs.
trait Objective {
    fn inputs(&self) -> &DMatrix<f64>;
    fn output_dim(&self) -> usize;
    /// Mean loss and its gradient with respect to the outputs.
    fn loss_and_gradient(&self, outputs: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>;
}

/// Squared Frobenius error on flattened parameters.
struct Euclidean {
    data: DMatrix<f64>,
}

impl Objective for Euclidean {
    fn inputs(&self) -> &DMatrix<f64> {
        &self.data
    }

    fn output_dim(&self) -> usize {
        self.data.nrows()
    }

    fn loss_and_gradient(&self, outputs: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let n = self.data.ncols() as f64;
        let diff = outputs - &self.data;
        Ok((diff.norm_squared() / n, diff * (2.0 / n)))
    }
}

struct PoseObjective<'a> {
    data: DMatrix<f64>,
    trajectories: &'a [Se3Trajectory],
    layout: Se3Layout,
    basis: &'a BasisSet,
    beta: f64,
}

impl Objective for PoseObjective<'_> {
    fn inputs(&self) -> &DMatrix<f64> {
        &self.data
    }

    fn output_dim(&self) -> usize {
        self.layout.decoder_dim()
    }

    fn loss_and_gradient(&self, outputs: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let n = self.trajectories.len() as f64;
        let mut grad = DMatrix::zeros(outputs.nrows(), outputs.ncols());
        let mut loss = 0.0;
        for (c, traj) in self.trajectories.iter().enumerate() {
            let y = outputs.column(c).into_owned();
            let (l, g) = self
                .layout
                .loss_and_gradient(traj, &y, self.basis, self.beta)?;
            loss += l / n;
            grad.set_column(c, &(g / n));
        }
        Ok((loss, grad))
    }
}

fn columns(vs: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(vs[0].len(), vs.len(), |r, c| vs[c][r])
}

fn network_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

struct Fitted {
    encoder: Mlp,
    decoder: Mlp,
    history: History,
    metric_evaluations: u64,
}

fn fit_autoencoder(
    objective: &dyn Objective,
    metric: Option<&CurveGeomMetric>,
    cfg: &TrainConfig,
) -> Result<Fitted> {
    cfg.validate()?;
    let x = objective.inputs();
    if x.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Mlp::new(
        &network_sizes(x.nrows(), &cfg.hidden, cfg.latent_dim),
        &mut rng,
    )?;
    let mirrored: Vec<usize> = cfg.hidden.iter().rev().copied().collect();
    let mut decoder = Mlp::new(
        &network_sizes(cfg.latent_dim, &mirrored, objective.output_dim()),
        &mut rng,
    )?;
    let mut enc_opt = Adam::new(cfg.learning_rate);
    let mut dec_opt = Adam::new(cfg.learning_rate);
    let mut history = History::default();
    let mut metric_evaluations = 0;
    let n = x.ncols();

    for epoch in 0..cfg.epochs {
        let z = encoder.forward_batch(x)?;
        let y = decoder.forward_batch(&z)?;
        let (recon, dy) = objective.loss_and_gradient(&y)?;
        let (dz, dec_grad) = decoder.vjp_batch(&z, &dy)?;
        let (_, enc_grad) = encoder.vjp_batch(x, &dz)?;
        let mut dec_grad = dec_grad;
        let mut distortion = f64::NAN;
        if cfg.alpha > 0.0 {
            let metric = metric.ok_or_else(|| {
                Error::invalid("train config", "alpha > 0 needs a curve-space metric")
            })?;
            // mixup points are treated as constants: R is taken with respect
            // to the decoder only
            let codes: Vec<DVector<f64>> = (0..n).map(|c| z.column(c).into_owned()).collect();
            let batch: Vec<DVector<f64>> = (0..cfg.mixup_batch)
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let j = rng.random_range(0..n);
                    let delta = mixup_coefficient(&mut rng, cfg.eta_mix);
                    mix(&codes[i], &codes[j], delta)
                })
                .collect();
            let mode = match cfg.trace_mode {
                TraceMode::Exact => TraceMode::Exact,
                TraceMode::Hutchinson { probes, seed } => TraceMode::Hutchinson {
                    probes,
                    seed: seed.wrapping_add(epoch as u64),
                },
            };
            let eval = evaluate_distortion(&decoder, &batch, metric, mode, true)?;
            metric_evaluations += 1;
            distortion = eval.value;
            dec_grad.add_scaled(
                eval.gradient.as_ref().expect("gradient requested"),
                cfg.alpha,
            );
        }
        let total = recon
            + if cfg.alpha > 0.0 {
                cfg.alpha * distortion
            } else {
                0.0
            };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.reconstruction.push(recon);
        history.distortion.push(distortion);
        history.total.push(total);
        enc_opt
            .step_mlp(&mut encoder, &enc_grad)
            .map_err(|e| rename_block(e, "encoder"))?;
        dec_opt
            .step_mlp(&mut decoder, &dec_grad)
            .map_err(|e| rename_block(e, "decoder"))?;
    }
    Ok(Fitted {
        encoder,
        decoder,
        history,
        metric_evaluations,
    })
}

fn rename_block(e: Error, net: &str) -> Error {
    match e {
        Error::NonFiniteGradient { block } => Error::NonFiniteGradient {
            block: format!("{net} {block}"),
        },
        other => other,
    }
}

/// Trains on fitted curve parameters. `alpha > 0` adds the relaxed
/// distortion under the Euclidean CurveGeom metric of `model`'s basis.
pub fn train(
    dataset: &[CurveParams],
    model: &CurveModel,
    cfg: &TrainConfig,
) -> Result<ManifoldModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let shape = (model.dim(), model.num_bases());
    if let Some(w) = dataset.iter().find(|w| w.shape() != shape) {
        return Err(Error::shape(
            "training parameters",
            format!("{}x{}", shape.0, shape.1),
            format!("{}x{}", w.shape().0, w.shape().1),
        ));
    }
    let data = columns(&dataset.iter().map(flatten).collect::<Vec<_>>());
    let metric = curvegeom_euclidean(model.basis(), model.dim());
    let fitted = fit_autoencoder(&Euclidean { data }, Some(&metric), cfg)?;
    Ok(ManifoldModel {
        encoder: fitted.encoder,
        decoder: fitted.decoder,
        target: ModelTarget::Curve(model.clone()),
        config: cfg.clone(),
        history: fitted.history,
        metric_evaluations: fitted.metric_evaluations,
    })
}

const START_POSE_TOL: f64 = 1e-6;

/// Trains a pose autoencoder with the pose reconstruction loss. All
/// trajectories must share one start pose.
pub fn train_se3(
    trajectories: &[Se3Trajectory],
    basis: &BasisSet,
    cfg: &TrainConfig,
) -> Result<ManifoldModel> {
    let first = trajectories.first().ok_or(Error::EmptyBatch)?;
    let start = first.start();
    for (k, t) in trajectories.iter().enumerate() {
        let s = t.start();
        if (s.p - start.p).amax() > START_POSE_TOL
            || (s.r.matrix() - start.r.matrix()).amax() > START_POSE_TOL
        {
            return Err(Error::invalid(
                "pose dataset",
                format!("trajectory {k} has a different start pose"),
            ));
        }
    }
    if cfg.alpha > 0.0 {
        return Err(Error::invalid(
            "train config",
            "isometric regularization is not available for pose data",
        ));
    }
    let layout = Se3Layout { bases: basis.len() };
    let fits: Vec<Se3CurveParams> = trajectories
        .iter()
        .map(|t| fit_se3_curve(basis, t))
        .collect::<Result<_>>()?;
    let inputs: Vec<DVector<f64>> = fits
        .iter()
        .map(|f| layout.encode_input(f))
        .collect::<Result<_>>()?;
    let objective = PoseObjective {
        data: columns(&inputs),
        trajectories,
        layout,
        basis,
        beta: cfg.beta,
    };
    let fitted = fit_autoencoder(&objective, None, cfg)?;
    Ok(ManifoldModel {
        encoder: fitted.encoder,
        decoder: fitted.decoder,
        target: ModelTarget::Se3 {
            basis: basis.clone(),
            start,
        },
        config: cfg.clone(),
        history: fitted.history,
        metric_evaluations: fitted.metric_evaluations,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AutoencoderCheckpoint {
    seed: u64,
    latent_dim: usize,
    encoder: Mlp,
    decoder: Mlp,
}

pub const AUTOENCODER_FILE: &str = "autoencoder.json";
pub const CURVE_MODEL_FILE: &str = "curve_model.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";

impl ManifoldModel {
    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn target(&self) -> &ModelTarget {
        &self.target
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    /// Number of distortion evaluations performed during training.
    pub fn metric_evaluations(&self) -> u64 {
        self.metric_evaluations
    }

    pub fn curve_model(&self) -> Result<&CurveModel> {
        match &self.target {
            ModelTarget::Curve(m) => Ok(m),
            ModelTarget::Se3 { .. } => Err(Error::invalid(
                "model",
                "pose model has no planar curve model",
            )),
        }
    }

    /// Euclidean CurveGeom metric of the curve model.
    pub fn metric(&self) -> Result<CurveGeomMetric> {
        let m = self.curve_model()?;
        Ok(curvegeom_euclidean(m.basis(), m.dim()))
    }

    pub fn encode(&self, w: &CurveParams) -> Result<DVector<f64>> {
        let m = self.curve_model()?;
        if w.shape() != (m.dim(), m.num_bases()) {
            return Err(Error::shape(
                "curve parameters",
                format!("{}x{}", m.dim(), m.num_bases()),
                format!("{}x{}", w.shape().0, w.shape().1),
            ));
        }
        self.encoder.forward(&flatten(w))
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<CurveParams> {
        let m = self.curve_model()?;
        unflatten(&self.decoder.forward(z)?, m.dim(), m.num_bases())
    }

    pub fn encode_se3(&self, params: &Se3CurveParams) -> Result<DVector<f64>> {
        match &self.target {
            ModelTarget::Se3 { basis, .. } => self
                .encoder
                .forward(&Se3Layout { bases: basis.len() }.encode_input(params)?),
            ModelTarget::Curve(_) => Err(Error::invalid(
                "model",
                "planar model cannot encode pose parameters",
            )),
        }
    }

    pub fn decode_se3(&self, z: &DVector<f64>) -> Result<Se3CurveParams> {
        match &self.target {
            ModelTarget::Se3 { basis, start } => {
                Se3Layout { bases: basis.len() }.decode_output(&self.decoder.forward(z)?, start)
            }
            ModelTarget::Curve(_) => Err(Error::invalid(
                "model",
                "planar model cannot decode pose parameters",
            )),
        }
    }

    /// Writes the four bundle files into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_json(
            &dir.join(AUTOENCODER_FILE),
            &AutoencoderCheckpoint {
                seed: self.config.seed,
                latent_dim: self.latent_dim(),
                encoder: self.encoder.clone(),
                decoder: self.decoder.clone(),
            },
        )?;
        write_json(&dir.join(CURVE_MODEL_FILE), &self.target.to_repr()?)?;
        write_json(&dir.join(TRAIN_CONFIG_FILE), &self.config)?;
        write_text(&dir.join(LOSS_HISTORY_FILE), &self.history.to_csv())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ae: AutoencoderCheckpoint = read_json(&dir.join(AUTOENCODER_FILE))?;
        let target = ModelTarget::from_repr(read_json(&dir.join(CURVE_MODEL_FILE))?)?;
        let config: TrainConfig = read_json(&dir.join(TRAIN_CONFIG_FILE))?;
        config.validate()?;
        let history_path = dir.join(LOSS_HISTORY_FILE);
        let history = if history_path.exists() {
            History::from_csv(&read_text(&history_path)?)?
        } else {
            History::default()
        };
        let out_dim = match &target {
            ModelTarget::Curve(m) => m.dim() * m.num_bases(),
            ModelTarget::Se3 { basis, .. } => Se3Layout { bases: basis.len() }.decoder_dim(),
        };
        if ae.decoder.output_dim() != out_dim || ae.encoder.input_dim() != ae_input_dim(&target) {
            return Err(Error::invalid(
                "model bundle",
                "network sizes do not match the curve model",
            ));
        }
        if ae.encoder.output_dim() != ae.latent_dim || ae.decoder.input_dim() != ae.latent_dim {
            return Err(Error::invalid("model bundle", "latent dimension mismatch"));
        }
        Ok(ManifoldModel {
            encoder: ae.encoder,
            decoder: ae.decoder,
            target,
            config,
            history,
            metric_evaluations: 0,
        })
    }
}

fn ae_input_dim(target: &ModelTarget) -> usize {
    match target {
        ModelTarget::Curve(m) => m.dim() * m.num_bases(),
        ModelTarget::Se3 { basis, .. } => Se3Layout { bases: basis.len() }.encoder_dim(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisMode;

    fn small_config(alpha: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            alpha,
            epochs,
            hidden: vec![32, 32],
            learning_rate: 3e-3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn planar_model(b: usize) -> CurveModel {
        CurveModel::via_point(
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            BasisSet::uniform(b, BasisMode::ViaPoint).unwrap(),
        )
        .unwrap()
    }

    fn dataset(b: usize, count: usize) -> Vec<CurveParams> {
        (0..count)
            .map(|k| {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 } * (0.8 + 0.05 * k as f64);
                CurveParams::new(DMatrix::from_fn(2, b, |i, j| {
                    if i == 1 {
                        s * (1.0 + 0.1 * j as f64)
                    } else {
                        0.1 * s
                    }
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn flatten_conventions() {
        let w = CurveParams::new(DMatrix::from_fn(3, 4, |i, j| (10 * i + j) as f64)).unwrap();
        let v = flatten(&w);
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(v[i * 4 + j], w.matrix()[(i, j)]);
            }
        }
        assert_eq!(unflatten(&v, 3, 4).unwrap(), w);
        assert_eq!(flatten(&CurveParams::zeros(2, 5)), DVector::zeros(10));
        assert!(unflatten(&v, 2, 4).is_err());
    }

    #[test]
    fn mixup_endpoints_and_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = DVector::from_vec(vec![0.3, -0.2]);
        assert!((mixup_sample(&z, &z, &mut rng).unwrap() - &z).amax() < 1e-15);
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![-1.0, 0.5]);
        assert_eq!(mix(&a, &b, 0.0), b);
        assert_eq!(mix(&a, &b, 1.0), a);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| mixup_coefficient(&mut rng, MIXUP_ETA))
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!(draws.iter().all(|d| (-0.2..=1.2).contains(d)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            alpha: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            latent_dim: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let json = r#"{"alpha": 0.1, "latnt_dim": 2}"#;
        let err = serde_json::from_str::<TrainConfig>(json)
            .unwrap_err()
            .to_string();
        assert!(err.contains("latnt_dim"));
    }

    #[test]
    fn single_point_is_memorized() {
        let model = planar_model(6);
        let data = dataset(6, 1);
        let trained = train(&data, &model, &small_config(0.0, 3000)).unwrap();
        assert!(*trained.history().reconstruction.last().unwrap() < 1e-6);
    }

    #[test]
    fn unregularized_training_never_touches_metric() {
        let model = planar_model(6);
        let trained = train(&dataset(6, 4), &model, &small_config(0.0, 50)).unwrap();
        assert_eq!(trained.metric_evaluations(), 0);
        assert!(trained.history().distortion.iter().all(|d| d.is_nan()));
        let reg = train(&dataset(6, 4), &model, &small_config(0.1, 50)).unwrap();
        assert_eq!(reg.metric_evaluations(), 50);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let model = planar_model(6);
        let data = dataset(6, 6);
        let a = train(&data, &model, &small_config(0.1, 800)).unwrap();
        let b = train(&data, &model, &small_config(0.1, 800)).unwrap();
        assert_eq!(a.encoder().params_flat(), b.encoder().params_flat());
        assert_eq!(a.decoder().params_flat(), b.decoder().params_flat());
        let h = &a.history().reconstruction;
        assert!(
            h.last().unwrap() <= &(h[0] * 0.01),
            "{} -> {}",
            h[0],
            h.last().unwrap()
        );
    }

    #[test]
    fn decoded_curves_respect_endpoints() {
        let model = planar_model(6);
        let trained = train(&dataset(6, 3), &model, &small_config(0.0, 20)).unwrap();
        let z = DVector::from_vec(vec![0.7, -3.0]);
        let w = trained.decode(&z).unwrap();
        assert_eq!(trained.decode(&z).unwrap(), w);
        assert_eq!(
            model.eval(&w, 0.0).unwrap(),
            DVector::from_vec(vec![0.0, 0.0])
        );
        assert_eq!(
            model.eval(&w, 1.0).unwrap(),
            DVector::from_vec(vec![1.0, 0.0])
        );
    }

    #[test]
    fn bundle_round_trip() {
        let model = planar_model(6);
        let trained = train(&dataset(6, 3), &model, &small_config(0.1, 10)).unwrap();
        let dir = std::env::temp_dir().join(format!("mmpp-bundle-{}", std::process::id()));
        trained.save(&dir).unwrap();
        let back = ManifoldModel::load(&dir).unwrap();
        let w = &dataset(6, 3)[1];
        assert_eq!(back.encode(w).unwrap(), trained.encode(w).unwrap());
        assert_eq!(back.config(), trained.config());
        assert_eq!(back.history().total, trained.history().total);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn pose_training_reduces_loss() {
        let basis = BasisSet::uniform(6, BasisMode::ViaPoint).unwrap();
        let demos = crate::liegroup::synthetic_pouring_demos(3, 30, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            hidden: vec![32, 32],
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let trained = train_se3(&demos, &basis, &cfg).unwrap();
        let h = &trained.history().reconstruction;
        assert!(h.last().unwrap() < &(h[0] * 0.1));
        let decoded = trained
            .decode_se3(
                &trained
                    .encode_se3(&fit_se3_curve(&basis, &demos[0]).unwrap())
                    .unwrap(),
            )
            .unwrap();
        assert!(decoded.r_f.orthonormality_error() < 1e-9);
    }
}
