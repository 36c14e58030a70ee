//! Central finite-difference checking of autodiff gradients.
//!
//! The checker probes a differentiable expression with a random linear
//! functional `L = sum(w * y)` and compares `dL/dx` from
//! [`Graph::backward`] against central differences with step `h` on every
//! input element. The functional is accumulated in f64 so the comparison is
//! limited by the f32 rounding of the forward pass itself, not by the
//! reduction.
//!
//! Errors are reported normwise: `|ad - fd| / max(max|ad|, max|fd|)` per
//! input tensor. At `h = 1e-3` on f32 forward values, a correct gradient
//! lands around 1e-5..1e-4 on this scale and a wrong rule (dropped term,
//! sign flip, bad border handling) lands orders of magnitude higher.

use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub const DEFAULT_STEP: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub failures: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Check `d sum(w * build(inputs)) / d inputs` against central differences.
///
/// `build` receives one graph plus leaf vars for each input tensor (in
/// order) and returns the expression output (any shape). Inputs are
/// expected to be bounded away from non-smooth points of the expression.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f32,
    tolerance: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    // Functional weights are derived from the output shape, deterministically.
    let forward = |tensors: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let probe = forward(inputs)?;
    let mut wrng = stream(0x9d5f_31c2, "gradcheck/functional");
    let w32 = Tensor::new(
        probe.shape().to_vec(),
        (0..probe.numel()).map(|_| wrng.gen_range(-1.0..1.0)).collect(),
    )?;
    let weights: Vec<f64> = w32.data().iter().map(|&w| f64::from(w)).collect();
    let functional = |y: &Tensor| -> f64 {
        y.data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| f64::from(v) * w)
            .sum()
    };

    // Analytic pass through the same f32 weights.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let wv = g.constant(w32.clone());
    let weighted = g.mul(out, wv)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failures: 0,
        tolerance,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut fds: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    for (ti, input) in inputs.iter().enumerate() {
        let mut fd = vec![0.0f64; input.numel()];
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = functional(&forward(&work)?);
            work[ti].data_mut()[ei] = orig - h;
            let minus = functional(&forward(&work)?);
            work[ti].data_mut()[ei] = orig;
            fd[ei] = (plus - minus) / (2.0 * f64::from(h));
        }
        fds.push(fd);
    }
    // One gradient vector, one scale: errors are measured against the
    // largest gradient magnitude in the whole check.
    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter().map(|&x| f64::from(x).abs()))
        .chain(fds.iter().flatten().map(|&x| x.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    for (ti, fd) in fds.iter().enumerate() {
        let ad = analytic[ti].data();
        for (ei, &fde) in fd.iter().enumerate() {
            let err = (f64::from(ad[ei]) - fde).abs() / scale;
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
            if err >= tolerance {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("matching length")
}

/// Random tensor avoiding a band around zero, for ops that are non-smooth
/// at the origin (abs, sign-like rules).
pub fn random_tensor_away_from_zero(
    rng: &mut impl rand::Rng,
    shape: &[usize],
    margin: f32,
    amplitude: f32,
) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel)
        .map(|_| {
            let mag = rng.gen_range(margin..amplitude);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("matching length")
}
