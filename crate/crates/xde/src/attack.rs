//! White-box I-FGSM evaluation through the filter-network-merge chain.
//!
//! The attack maximizes the l1 error of the merged mean by iterating
//!
//! ```text
//! x <- clip(x + alpha * sign(d loss / d x), x0 +/- eps/255, [0,1])
//! ```
//!
//! with `N = min(4 + eps, ceil(1.25 eps))` iterations and
//! `alpha = eps / (255 N)`. The whole chain is differentiable: analytic
//! filters, networks, and the merge itself, so one attack must fool all
//! paths simultaneously. A zero gradient at the input is treated as a hard
//! error rather than silently returning the unperturbed image.

use crate::error::{Error, Result};
use crate::filters::{self, MiddleDomainId};
use crate::merge::{inverse_variance_merge_graph, PathPrediction};
use crate::nets::{ProbabilisticPrediction, TinyUNet};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Attack strengths used in the standard evaluation grid (units 1/255).
pub const STANDARD_EPSILONS: [u8; 4] = [2, 4, 8, 16];

/// `N = min(4 + eps, ceil(1.25 eps))`; the ceiling makes eps=2 take 3
/// iterations (the stronger choice for the non-integer case).
pub fn iterations_for(epsilon: u8) -> u32 {
    if epsilon == 0 {
        return 0;
    }
    let a = 4 + u32::from(epsilon);
    let b = (5 * u32::from(epsilon)).div_ceil(4);
    a.min(b)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Perturbation budget in 1/255 units; 0 is the degenerate no-op.
    pub epsilon: u8,
    /// Step-size multiplier on `eps / (255 N)`.
    pub step_scale: f32,
}

impl AttackSpec {
    pub fn new(epsilon: u8) -> Self {
        AttackSpec {
            epsilon,
            step_scale: 1.0,
        }
    }

    pub fn iterations(&self) -> u32 {
        iterations_for(self.epsilon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    InvVar,
    Uniform,
}

impl MergeRule {
    pub fn name(self) -> &'static str {
        match self {
            MergeRule::InvVar => "inv-var",
            MergeRule::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inv-var" | "inv_var" => Ok(MergeRule::InvVar),
            "uniform" => Ok(MergeRule::Uniform),
            other => Err(Error::invalid(format!("unknown merge rule `{other}`"))),
        }
    }
}

/// The attacked model: K filter+network paths and the merge rule that
/// combines them. K=1 with the identity domain is the direct baseline.
pub struct AttackTarget<'a> {
    pub paths: Vec<(u32, MiddleDomainId, &'a TinyUNet)>,
    pub rule: MergeRule,
}

impl<'a> AttackTarget<'a> {
    /// Merged mean prediction for a clean forward pass.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let merged = self.forward_graph(&mut g, x)?;
        Ok(g.value(merged).clone())
    }

    fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.paths.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let mut entries = Vec::with_capacity(self.paths.len());
        for &(path_id, domain, net) in &self.paths {
            let y = filters::apply_graph(domain, g, x)?;
            let bound = net.bind(g, false);
            let (mean, log_scale) = net.forward(g, &bound, y)?;
            entries.push((path_id, mean, log_scale));
        }
        match self.rule {
            MergeRule::InvVar => inverse_variance_merge_graph(g, &entries),
            MergeRule::Uniform => {
                let mut sorted: Vec<&(u32, Var, Var)> = entries.iter().collect();
                sorted.sort_by_key(|e| e.0);
                let mut acc: Option<Var> = None;
                for &&(_, mean, _) in &sorted {
                    acc = Some(match acc {
                        Some(a) => g.add(a, mean)?,
                        None => mean,
                    });
                }
                Ok(g.mul_scalar(acc.expect("nonempty"), 1.0 / sorted.len() as f32))
            }
        }
    }
}

/// Run I-FGSM against one `[1,3,H,W]` image with its `[1,C,H,W]` label.
pub fn ifgsm(
    target: &AttackTarget,
    image: &Tensor,
    label: &Tensor,
    spec: &AttackSpec,
) -> Result<Tensor> {
    if image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::precondition("attack input must lie in [0,1]"));
    }
    if spec.epsilon == 0 {
        return Ok(image.clone());
    }
    let n = spec.iterations();
    let eps = f32::from(spec.epsilon) / 255.0;
    let alpha = eps / n as f32 * spec.step_scale;
    let lo: Vec<f32> = image.data().iter().map(|&v| (v - eps).max(0.0)).collect();
    let hi: Vec<f32> = image.data().iter().map(|&v| (v + eps).min(1.0)).collect();

    let mut x = image.clone();
    for _ in 0..n {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let merged = target.forward_graph(&mut g, xv)?;
        let lv = g.constant(label.clone());
        let diff = g.sub(merged, lv)?;
        let err = g.abs(diff);
        let loss = g.mean(err);
        g.backward(loss)?;
        let grad = g.grad(xv).ok_or_else(|| Error::Numeric {
            tensor: "input".to_string(),
            detail: "no gradient reached the attack input".to_string(),
        })?;
        if grad.data().iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric {
                tensor: "input".to_string(),
                detail: "all-zero input gradient (gradient masking)".to_string(),
            });
        }
        for ((xi, &gi), (&l, &h)) in x
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(lo.iter().zip(&hi))
        {
            let step = if gi > 0.0 {
                alpha
            } else if gi < 0.0 {
                -alpha
            } else {
                0.0
            };
            *xi = (*xi + step).clamp(l, h);
        }
    }
    Ok(x)
}

/// One row of the attack grid.
#[derive(Debug, Clone, Serialize)]
pub struct AttackRecord {
    pub method: String,
    pub epsilon: u8,
    pub iterations: u32,
    pub n_images: usize,
    pub clean_l1: f64,
    pub attacked_l1: f64,
    /// Largest observed perturbation, for auditing the budget.
    pub max_linf: f64,
}

/// Attack every model at every strength over a shared image set.
pub fn attack_matrix(
    models: &[(String, AttackTarget)],
    images: &[Tensor],
    labels: &[Tensor],
    eps_list: &[u8],
) -> Result<Vec<AttackRecord>> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::precondition(format!(
            "need matching non-empty images/labels, got {}/{}",
            images.len(),
            labels.len()
        )));
    }
    let mut records = Vec::new();
    for (name, target) in models {
        let mut clean_total = 0.0f64;
        for (img, label) in images.iter().zip(labels) {
            let pred = target.predict(img)?;
            clean_total += pred.l1_distance(label)?;
        }
        let clean_l1 = clean_total / images.len() as f64;
        for &eps in eps_list {
            let spec = AttackSpec::new(eps);
            let mut attacked_total = 0.0f64;
            let mut max_linf = 0.0f64;
            for (img, label) in images.iter().zip(labels) {
                let adv = ifgsm(target, img, label, &spec)?;
                for (a, b) in adv.data().iter().zip(img.data()) {
                    max_linf = max_linf.max(f64::from((a - b).abs()));
                }
                let pred = target.predict(&adv)?;
                attacked_total += pred.l1_distance(label)?;
            }
            records.push(AttackRecord {
                method: name.clone(),
                epsilon: eps,
                iterations: spec.iterations(),
                n_images: images.len(),
                clean_l1,
                attacked_l1: attacked_total / images.len() as f64,
                max_linf,
            });
        }
    }
    Ok(records)
}

/// Per-path predictions for a batch, reusable by merges.
pub fn path_predictions(
    paths: &[(u32, MiddleDomainId, &TinyUNet)],
    rgb: &Tensor,
) -> Result<Vec<PathPrediction>> {
    paths
        .iter()
        .map(|&(path_id, domain, net)| {
            let y = filters::apply(domain, rgb)?;
            let pred: ProbabilisticPrediction = net.predict(&y)?;
            Ok(PathPrediction { path_id, pred })
        })
        .collect()
}
