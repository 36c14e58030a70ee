//! AMSGrad parameter updates.

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyperparameters. Learning rate and weight decay default to the
/// published training recipe; the moment decays and epsilon are the usual
/// values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsGradConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        AmsGradConfig {
            lr: 5e-4,
            weight_decay: 2e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment buffers for AMSGrad.
///
/// The max-second-moment buffer is elementwise non-decreasing across steps.
/// Weight decay enters as an additive L2 term on the gradient.
#[derive(Debug, Clone)]
pub struct AmsGradState {
    cfg: AmsGradConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    vmax: Vec<Tensor>,
    step: u64,
}

impl AmsGradState {
    pub fn new(cfg: AmsGradConfig, param_shapes: &[&[usize]]) -> Self {
        AmsGradState {
            cfg,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            vmax: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AmsGradConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn max_second_moments(&self) -> &[Tensor] {
        &self.vmax
    }

    /// One update over all parameters. `grads[i]` must be present and match
    /// `params[i]` in shape.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::precondition(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (i, param) in params.iter_mut().enumerate() {
            let grad = grads[i].ok_or_else(|| {
                Error::precondition(format!("missing gradient for parameter {i}"))
            })?;
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "amsgrad_step",
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let vmax = self.vmax[i].data_mut();
            let g = grad.data();
            let p = param.data_mut();
            let c = &self.cfg;
            for j in 0..p.len() {
                let gj = g[j] + c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                vmax[j] = vmax[j].max(v[j]);
                let m_hat = m[j] / bc1;
                let v_hat = vmax[j] / bc2;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let cfg = AmsGradConfig {
            weight_decay: 0.0,
            ..AmsGradConfig::default()
        };
        let mut params = vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()];
        let before = params[0].clone();
        let mut state = AmsGradState::new(cfg, &[&[3]]);
        let zero = Tensor::zeros(&[3]);
        for _ in 0..5 {
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            state.step(&mut refs, &[Some(&zero)]).unwrap();
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn scalar_step_matches_hand_recurrence() {
        // Independent oracle: the AMSGrad recurrence evaluated in f64 for a
        // single scalar parameter over a fixed gradient sequence.
        let cfg = AmsGradConfig {
            lr: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        };
        let grads = [0.3f32, -0.2, 0.7, 0.0, 0.5];

        let mut p = 1.5f64;
        let (mut m, mut v, mut vmax) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            let g = f64::from(g) + 0.01 * p;
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            vmax = vmax.max(v);
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = vmax / (1.0 - 0.99f64.powi(t));
            p -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }

        let mut params = vec![Tensor::scalar(1.5)];
        let mut state = AmsGradState::new(cfg, &[&[]]);
        for &g in &grads {
            let gt = Tensor::scalar(g);
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            state.step(&mut refs, &[Some(&gt)]).unwrap();
        }
        let got = f64::from(params[0].item().unwrap());
        assert!(
            (got - p).abs() < 1e-5,
            "expected {p} from scalar recurrence, got {got}"
        );
    }

    #[test]
    fn missing_gradient_is_a_precondition_error() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AmsGradState::new(AmsGradConfig::default(), &[&[]]);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        let err = state.step(&mut refs, &[None]).unwrap_err();
        assert!(err.to_string().contains("missing gradient"));
    }

    #[test]
    fn vmax_is_monotone_non_decreasing() {
        let mut params = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut state = AmsGradState::new(AmsGradConfig::default(), &[&[2]]);
        let mut prev = vec![0.0f32; 2];
        let seq = [[1.0f32, 0.0], [0.1, 2.0], [0.0, 0.1], [3.0, 0.0]];
        for g in seq {
            let gt = Tensor::new(vec![2], g.to_vec()).unwrap();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            state.step(&mut refs, &[Some(&gt)]).unwrap();
            let cur = state.max_second_moments()[0].data().to_vec();
            assert!(cur.iter().zip(&prev).all(|(c, p)| c >= p));
            prev = cur;
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut params = vec![Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap()];
            let mut state = AmsGradState::new(AmsGradConfig::default(), &[&[4]]);
            for i in 0..10 {
                let g = Tensor::new(vec![4], vec![0.01 * i as f32; 4]).unwrap();
                let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
                state.step(&mut refs, &[Some(&g)]).unwrap();
            }
            params[0].data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
