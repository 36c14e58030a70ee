//! Merging per-path probabilistic predictions into one final prediction.
//!
//! Inverse-variance merging weights each path's mean per pixel by
//! `exp(-2 s_j)` (the inverse of its Laplace variance up to the common
//! factor 2) and normalizes:
//!
//! ```text
//! w_j = exp(-2 s_j) / sum_k exp(-2 s_k)
//! merged_mean = sum_j w_j * mean_j
//! ```
//!
//! Uniform merging sets `w_j = 1/K`; it is also the deep-ensembles rule.
//! Classification ensembles average output probability vectors.
//!
//! The merged mean is a per-pixel convex combination of the path means.
//! Weights are computed with shifted exponentials (per-pixel max of
//! `-2 s_j` subtracted) so extreme log-scales cannot overflow, and paths
//! are always summed in ascending path-id order, making the result
//! invariant to input ordering, bitwise. The merged log-scale follows the
//! precision-sum rule `s_m = -0.5 * ln(sum_j exp(-2 s_j))`.

use crate::error::{Error, Result};
use crate::nets::ProbabilisticPrediction;
use crate::tensor::{Graph, Tensor, Var};

/// One path's prediction tagged with a stable identity for ordering.
#[derive(Debug, Clone)]
pub struct PathPrediction {
    pub path_id: u32,
    pub pred: ProbabilisticPrediction,
}

/// Result of merging K paths.
#[derive(Debug, Clone)]
pub struct MergedPrediction {
    pub mean: Tensor,
    /// Per-path weight maps, in ascending path-id order.
    pub weights: Vec<(u32, Tensor)>,
    /// Merged log-scale under the precision-sum rule.
    pub log_scale: Tensor,
}

fn sorted_refs(paths: &[PathPrediction]) -> Result<Vec<&PathPrediction>> {
    if paths.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let shape = paths[0].pred.mean.shape();
    for p in paths {
        if p.pred.mean.shape() != shape || p.pred.log_scale.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "merge",
                expected: shape.to_vec(),
                got: p.pred.mean.shape().to_vec(),
            });
        }
        if !p.pred.log_scale.all_finite() {
            return Err(Error::invalid(format!(
                "path {} has non-finite log-scale",
                p.path_id
            )));
        }
    }
    let mut refs: Vec<&PathPrediction> = paths.iter().collect();
    refs.sort_by_key(|p| p.path_id);
    Ok(refs)
}

fn merge_impl(paths: &[PathPrediction], uniform: bool) -> Result<MergedPrediction> {
    let refs = sorted_refs(paths)?;
    let shape = refs[0].pred.mean.shape().to_vec();
    let numel = refs[0].pred.mean.numel();
    let k = refs.len();

    let mut mean = vec![0.0f32; numel];
    let mut log_scale = vec![0.0f32; numel];
    let mut weights = vec![vec![0.0f32; numel]; k];
    for i in 0..numel {
        // shifted exponentials: subtract the per-pixel max of -2s
        let mut shift = f32::NEG_INFINITY;
        for p in &refs {
            shift = shift.max(-2.0 * p.pred.log_scale.data()[i]);
        }
        let mut total = 0.0f32;
        for (j, p) in refs.iter().enumerate() {
            let e = if uniform {
                1.0
            } else {
                (-2.0 * p.pred.log_scale.data()[i] - shift).exp()
            };
            weights[j][i] = e;
            total += e;
        }
        let mut m = 0.0f32;
        for (j, p) in refs.iter().enumerate() {
            let w = weights[j][i] / total;
            weights[j][i] = w;
            m += w * p.pred.mean.data()[i];
        }
        mean[i] = m;
        // precision sum in the unshifted frame: total * exp(shift)
        log_scale[i] = if uniform {
            // uniform ignores uncertainties; report the precision sum anyway
            let precision: f32 = refs
                .iter()
                .map(|p| (-2.0 * p.pred.log_scale.data()[i]).exp())
                .sum();
            -0.5 * precision.ln()
        } else {
            -0.5 * (total.ln() + shift)
        };
    }
    Ok(MergedPrediction {
        mean: Tensor::new(shape.clone(), mean)?,
        weights: refs
            .iter()
            .zip(weights)
            .map(|(p, w)| Ok((p.path_id, Tensor::new(shape.clone(), w)?)))
            .collect::<Result<_>>()?,
        log_scale: Tensor::new(shape, log_scale)?,
    })
}

/// Weight each path per pixel by the inverse of its predicted variance.
pub fn inverse_variance_merge(paths: &[PathPrediction]) -> Result<MergedPrediction> {
    merge_impl(paths, false)
}

/// Weight every path equally (uncertainty unused).
pub fn uniform_merge(paths: &[PathPrediction]) -> Result<MergedPrediction> {
    merge_impl(paths, true)
}

/// Average K probability vectors elementwise (classification merging).
pub fn prob_average_merge(class_probs: &[Vec<f32>]) -> Result<Vec<f32>> {
    if class_probs.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let dim = class_probs[0].len();
    for (i, p) in class_probs.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "prob_average_merge",
                expected: vec![dim],
                got: vec![p.len()],
            });
        }
        if p.iter().any(|&v| v < 0.0) {
            return Err(Error::precondition(format!(
                "probability vector {i} has negative entries"
            )));
        }
        let total: f32 = p.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::precondition(format!(
                "probability vector {i} sums to {total}, not 1"
            )));
        }
    }
    let k = class_probs.len() as f32;
    Ok((0..dim)
        .map(|c| class_probs.iter().map(|p| p[c]).sum::<f32>() / k)
        .collect())
}

/// Graph form of inverse-variance merging over `(path_id, mean, log_scale)`
/// entries, for differentiable chains (the shift is a detached constant,
/// which leaves the weights' gradients unchanged since they are invariant
/// to it). Returns the merged mean.
pub fn inverse_variance_merge_graph(
    g: &mut Graph,
    entries: &[(u32, Var, Var)],
) -> Result<Var> {
    if entries.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let mut sorted: Vec<&(u32, Var, Var)> = entries.iter().collect();
    sorted.sort_by_key(|e| e.0);

    // per-pixel max of -2s across paths, detached
    let shape = g.value(sorted[0].1).shape().to_vec();
    let numel: usize = shape.iter().product();
    let mut shift = vec![f32::NEG_INFINITY; numel];
    for &&(_, _, s) in &sorted {
        if g.value(s).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "merge",
                expected: shape,
                got: g.value(s).shape().to_vec(),
            });
        }
        for (m, &sv) in shift.iter_mut().zip(g.value(s).data()) {
            *m = m.max(-2.0 * sv);
        }
    }
    let shift = g.constant(Tensor::new(shape, shift)?);

    let mut num: Option<Var> = None;
    let mut den: Option<Var> = None;
    for &&(_, mean, s) in &sorted {
        let neg2s = g.mul_scalar(s, -2.0);
        let arg = g.sub(neg2s, shift)?;
        let e = g.exp(arg);
        let weighted = g.mul(e, mean)?;
        num = Some(match num {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
        den = Some(match den {
            Some(acc) => g.add(acc, e)?,
            None => e,
        });
    }
    g.div(num.expect("nonempty"), den.expect("nonempty"))
}
