//! The two training stages of an ensemble path.
//!
//! Stage one fits the network on clean data with the Laplace
//! negative-log-likelihood
//!
//! ```text
//! L_nll = mean( exp(-s) * |mean - target| + s )
//! ```
//!
//! where `s` is the predicted log-scale, clamped to `[-7, 7]` inside every
//! loss. Sigma is `sqrt(2) * exp(s)`.
//!
//! Stage two is sigma training: mixed batches where undistorted samples
//! keep contributing the NLL while distorted samples contribute mean
//! grounding (an l1 tie to the prediction at the start of the stage,
//! `z0`) and sigma calibration (an l1 pull of `exp(s)` toward the
//! observed residual `|target - z0|`, its maximum-likelihood value):
//!
//! ```text
//! L_st = L_nll(undist) + alpha1 * |z0 - mean|(dist)
//!                      + alpha2 * |exp(s) - |target - z0||(dist)
//! ```
//!
//! Each training sample gets one fixed distorted replica, drawn from the
//! sigma-training corruption set at high severity when the stage starts;
//! the anchors `z0` are computed once from those replicas and never
//! updated.

use crate::corruptions::{corrupt, CorruptionId, CorruptionSpec};
use crate::error::{Error, Result};
use crate::filters::{self, MiddleDomainId};
use crate::nets::{ProbabilisticPrediction, TinyUNet};
use crate::rng::{child_seed, stream};
use crate::tensor::{AmsGradConfig, AmsGradState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f32::consts::SQRT_2;

/// Log-scale clamp applied inside every loss; bounds `exp` and keeps
/// merge weights finite.
pub const LOG_SCALE_CLAMP: (f32, f32) = (-7.0, 7.0);

/// Laplace std from the predicted log-scale: `sqrt(2) * exp(s)`.
pub fn sigma_to_scale(log_scale: f32) -> f32 {
    SQRT_2 * log_scale.exp()
}

/// Per-pixel sigma map of a prediction.
pub fn sigma_map(pred: &ProbabilisticPrediction) -> Tensor {
    pred.log_scale.map(sigma_to_scale)
}

fn check_finite(name: &str, g: &Graph, v: Var) -> Result<()> {
    if g.value(v).data().iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric {
            tensor: name.to_string(),
            detail: "NaN encountered".to_string(),
        });
    }
    Ok(())
}

/// Laplace NLL over all pixels/channels/samples (graph form).
pub fn nll_loss(g: &mut Graph, mean: Var, log_scale: Var, target: Var) -> Result<Var> {
    check_finite("mean", g, mean)?;
    check_finite("log_scale", g, log_scale)?;
    check_finite("target", g, target)?;
    if g.value(mean).shape() != g.value(target).shape() {
        return Err(Error::ShapeMismatch {
            op: "nll_loss",
            expected: g.value(target).shape().to_vec(),
            got: g.value(mean).shape().to_vec(),
        });
    }
    let s = g.clamp(log_scale, LOG_SCALE_CLAMP.0, LOG_SCALE_CLAMP.1);
    let diff = g.sub(mean, target)?;
    let residual = g.abs(diff);
    let neg_s = g.neg(s);
    let precision = g.exp(neg_s);
    let weighted = g.mul(precision, residual)?;
    let per_pixel = g.add(weighted, s)?;
    Ok(g.mean(per_pixel))
}

/// Training schedule for the NLL stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
}

fn default_lr() -> f32 {
    5e-4
}
fn default_weight_decay() -> f32 {
    2e-6
}

impl TrainConfig {
    pub fn optimizer(&self) -> AmsGradConfig {
        AmsGradConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AmsGradConfig::default()
        }
    }
}

/// Sigma-training schedule. Distorted samples draw uniformly from
/// `st_corruptions` at a severity from `severities`; batches mix
/// half undistorted, half distorted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha1: f32,
    #[serde(default = "default_alpha")]
    pub alpha2: f32,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    #[serde(default = "default_st_corruptions")]
    pub st_corruptions: Vec<CorruptionId>,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
}

fn default_alpha() -> f32 {
    1.0
}
fn default_severities() -> Vec<u8> {
    vec![3, 4, 5]
}
fn default_st_corruptions() -> Vec<CorruptionId> {
    vec![CorruptionId::GaussianNoise, CorruptionId::GaussianBlur]
}

impl StConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 <= 0.0 || self.alpha2 <= 0.0 {
            return Err(Error::config("alpha1 and alpha2 must be positive".to_string()));
        }
        if self.severities.iter().any(|&s| s == 0 || s > 5) {
            return Err(Error::config("ST severities must be in 1..=5".to_string()));
        }
        if self.st_corruptions.is_empty() {
            return Err(Error::config("ST corruption set is empty".to_string()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AmsGradConfig {
        AmsGradConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AmsGradConfig::default()
        }
    }
}

/// Training stage of a path checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Init,
    Nll,
    SigmaTrained,
}

impl TrainStage {
    pub fn tag(self) -> &'static str {
        match self {
            TrainStage::Init => "init",
            TrainStage::Nll => "nll",
            TrainStage::SigmaTrained => "st",
        }
    }
}

/// One ensemble path: a middle domain plus the network that predicts the
/// target from it.
#[derive(Debug, Clone)]
pub struct EnsemblePath {
    pub domain: MiddleDomainId,
    pub net: TinyUNet,
    pub stage: TrainStage,
}

impl EnsemblePath {
    /// Predict on an RGB batch by applying the path's filter first.
    pub fn predict_rgb(&self, rgb: &Tensor) -> Result<ProbabilisticPrediction> {
        let y = filters::apply(self.domain, rgb)?;
        self.net.predict(&y)
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub nll: f64,
    pub mg: f64,
    pub sc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Set when training stopped early after a NaN loss; the parameters
    /// are rolled back to the last finished epoch.
    pub aborted: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,nll,mg,sc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.stage, r.nll, r.mg, r.sc
            ));
        }
        out
    }

    pub fn final_nll(&self) -> Option<f64> {
        self.rows.last().map(|r| r.nll)
    }
}

/// Precompute middle-domain inputs for a set of `[C,H,W]` RGB images.
pub fn precompute_domain(domain: MiddleDomainId, rgb: &[Tensor]) -> Result<Vec<Tensor>> {
    // filter in modest batches to bound graph memory
    let mut out = Vec::with_capacity(rgb.len());
    for chunk in rgb.chunks(16) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let batch = Tensor::stack(&refs)?;
        let filtered = filters::apply(domain, &batch)?;
        out.extend(filtered.unstack()?);
    }
    Ok(out)
}

fn gather_batch(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    Tensor::stack(&refs)
}

/// Stage one: fit one path on clean data with the Laplace NLL.
///
/// `inputs` are `[3,H,W]` RGB images; the path's middle domain is applied
/// up front. Aborts with the last finished epoch's weights if the loss
/// goes NaN.
pub fn train_path_nll(
    path: &mut EnsemblePath,
    inputs: &[Tensor],
    targets: &[Tensor],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(Error::precondition(format!(
            "need matching non-empty inputs/targets, got {}/{}",
            inputs.len(),
            targets.len()
        )));
    }
    let ys = precompute_domain(path.domain, inputs)?;
    let shapes = path.net.param_shapes().into_iter().map(|s| s.to_vec()).collect::<Vec<_>>();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AmsGradState::new(cfg.optimizer(), &shape_refs);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..ys.len()).collect();
    let mut last_good: Vec<Tensor> = path.net.param_tensors().into_iter().cloned().collect();

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = stream(seed, &format!("train-batch/{}/{epoch}", path.domain));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let xb = gather_batch(&ys, batch_idx)?;
            let zb = gather_batch(targets, batch_idx)?;
            let mut g = Graph::new();
            let x = g.constant(xb);
            let z = g.constant(zb);
            let bound = path.net.bind(&mut g, true);
            let (mean, log_scale) = path.net.forward(&mut g, &bound, x)?;
            let loss = nll_loss(&mut g, mean, log_scale, z)?;
            let loss_value = f64::from(g.value(loss).item()?);
            if !loss_value.is_finite() {
                for (param, good) in path.net.param_tensors_mut().into_iter().zip(&last_good) {
                    *param = good.clone();
                }
                log.aborted = true;
                break 'epochs;
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> =
                bound.vars().iter().map(|&v| g.grad(v)).collect();
            let mut params = path.net.param_tensors_mut();
            opt.step(&mut params, &grads)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        last_good = path.net.param_tensors().into_iter().cloned().collect();
        log.rows.push(TrainLogRow {
            epoch,
            stage: TrainStage::Nll.tag(),
            nll: epoch_loss / batches.max(1) as f64,
            mg: 0.0,
            sc: 0.0,
        });
    }
    path.stage = TrainStage::Nll;
    Ok(log)
}

/// The fixed distorted replicas and frozen anchors for one ST run.
#[derive(Debug, Clone)]
pub struct StAnchors {
    /// Middle-domain view of each sample's distorted replica.
    pub distorted_inputs: Vec<Tensor>,
    /// `z0`: the path's mean prediction on each replica at ST start.
    pub anchors: Vec<Tensor>,
}

/// Draw each sample's fixed distorted replica and compute its anchor.
pub fn prepare_st_anchors(
    path: &EnsemblePath,
    inputs: &[Tensor],
    cfg: &StConfig,
    seed: u64,
) -> Result<StAnchors> {
    cfg.validate()?;
    let mut distorted_rgb = Vec::with_capacity(inputs.len());
    for (i, rgb) in inputs.iter().enumerate() {
        let mut rng = stream(seed, &format!("st-sample/{}/{i}", path.domain));
        let id = cfg.st_corruptions[rng.gen_range(0..cfg.st_corruptions.len())];
        let severity = cfg.severities[rng.gen_range(0..cfg.severities.len())];
        let spec = CorruptionSpec::new(id, severity, child_seed(seed, &format!("st-noise/{i}")))?;
        let batch = Tensor::stack(&[rgb])?;
        distorted_rgb.push(corrupt(&spec, &batch)?.unstack()?.remove(0));
    }
    let distorted_inputs = precompute_domain(path.domain, &distorted_rgb)?;
    let mut anchors = Vec::with_capacity(inputs.len());
    for chunk in distorted_inputs.chunks(16) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let pred = path.net.predict(&Tensor::stack(&refs)?)?;
        anchors.extend(pred.mean.unstack()?);
    }
    Ok(StAnchors {
        distorted_inputs,
        anchors,
    })
}

/// Stage two: sigma training with mean grounding and sigma calibration.
///
/// Requires a path that finished the NLL stage. Returns the log plus the
/// anchors (frozen `z0` buffers) so callers can verify their immutability.
pub fn sigma_train(
    path: &mut EnsemblePath,
    inputs: &[Tensor],
    targets: &[Tensor],
    cfg: &StConfig,
    seed: u64,
) -> Result<(TrainLog, StAnchors)> {
    if path.stage != TrainStage::Nll {
        return Err(Error::precondition(format!(
            "sigma training requires an nll-stage path, got `{}`",
            path.stage.tag()
        )));
    }
    let anchors = prepare_st_anchors(path, inputs, cfg, seed)?;
    let log = sigma_train_with_anchors(path, inputs, targets, &anchors, cfg, seed)?;
    Ok((log, anchors))
}

/// ST inner loop against precomputed anchors.
pub fn sigma_train_with_anchors(
    path: &mut EnsemblePath,
    inputs: &[Tensor],
    targets: &[Tensor],
    anchors: &StAnchors,
    cfg: &StConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = inputs.len();
    if anchors.anchors.len() != n || anchors.distorted_inputs.len() != n {
        return Err(Error::precondition(format!(
            "missing anchors: {} samples but {} anchors",
            n,
            anchors.anchors.len()
        )));
    }
    let ys_clean = precompute_domain(path.domain, inputs)?;
    // |target - z0| per sample, the MLE of the Laplace scale
    let residual0: Vec<Tensor> = targets
        .iter()
        .zip(&anchors.anchors)
        .map(|(z, z0)| {
            Tensor::new(
                z.shape().to_vec(),
                z.data()
                    .iter()
                    .zip(z0.data())
                    .map(|(&a, &b)| (a - b).abs())
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;

    let shapes = path.net.param_shapes().into_iter().map(|s| s.to_vec()).collect::<Vec<_>>();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    let mut opt = AmsGradState::new(cfg.optimizer(), &shape_refs);
    let mut log = TrainLog::default();
    let half = (cfg.batch_size / 2).max(1);
    let mut undist_order: Vec<usize> = (0..n).collect();
    let mut dist_order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut rng_u = stream(seed, &format!("st-undist/{}/{epoch}", path.domain));
        undist_order.shuffle(&mut rng_u);
        let mut rng_d = stream(seed, &format!("st-dist/{}/{epoch}", path.domain));
        dist_order.shuffle(&mut rng_d);
        let (mut e_nll, mut e_mg, mut e_sc) = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for (u_idx, d_idx) in undist_order.chunks(half).zip(dist_order.chunks(half)) {
            let mut g = Graph::new();
            let bound = path.net.bind(&mut g, true);

            // undistorted half: plain NLL
            let xu = g.constant(gather_batch(&ys_clean, u_idx)?);
            let zu = g.constant(gather_batch(targets, u_idx)?);
            let (mean_u, ls_u) = path.net.forward(&mut g, &bound, xu)?;
            let nll = nll_loss(&mut g, mean_u, ls_u, zu)?;

            // distorted half: mean grounding + sigma calibration
            let xd = g.constant(gather_batch(&anchors.distorted_inputs, d_idx)?);
            let z0 = g.constant(gather_batch(&anchors.anchors, d_idx)?);
            let r0 = g.constant(gather_batch(&residual0, d_idx)?);
            let (mean_d, ls_d) = path.net.forward(&mut g, &bound, xd)?;
            let mg_diff = g.sub(z0, mean_d)?;
            let mg_abs = g.abs(mg_diff);
            let mg = g.mean(mg_abs);
            let ls_c = g.clamp(ls_d, LOG_SCALE_CLAMP.0, LOG_SCALE_CLAMP.1);
            let scale = g.exp(ls_c);
            let sc_diff = g.sub(scale, r0)?;
            let sc_abs = g.abs(sc_diff);
            let sc = g.mean(sc_abs);

            let mg_w = g.mul_scalar(mg, cfg.alpha1);
            let sc_w = g.mul_scalar(sc, cfg.alpha2);
            let partial = g.add(nll, mg_w)?;
            let loss = g.add(partial, sc_w)?;
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> =
                bound.vars().iter().map(|&v| g.grad(v)).collect();
            let mut params = path.net.param_tensors_mut();
            opt.step(&mut params, &grads)?;

            e_nll += f64::from(g.value(nll).item()?);
            e_mg += f64::from(g.value(mg).item()?);
            e_sc += f64::from(g.value(sc).item()?);
            batches += 1;
        }
        let b = batches.max(1) as f64;
        log.rows.push(TrainLogRow {
            epoch,
            stage: TrainStage::SigmaTrained.tag(),
            nll: e_nll / b,
            mg: e_mg / b,
            sc: e_sc / b,
        });
    }
    path.stage = TrainStage::SigmaTrained;
    Ok(log)
}
