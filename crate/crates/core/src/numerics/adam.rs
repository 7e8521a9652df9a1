use super::float::{lit, Real};
use super::tensor::Tensor;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn for_params(params: &[Tensor<F>]) -> Self {
        Self {
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub state: AdamState<F>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    /// Bias-corrected Adam update. `grads[i] == None` leaves parameter `i` untouched
    /// (frozen tensors). Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>], lr: f64) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.state.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(TensorError::Divergence(format!("non-finite gradient in parameter {i}")));
                }
            }
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2): (F, F) = (lit(beta1), lit(beta2));
        let (one, e): (F, F) = (F::one(), lit(eps));
        let step_size: F = lit(lr / bc1);
        let bc2_sqrt: F = lit(bc2.sqrt());

        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            let p = params[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + e);
            }
        }
        Ok(())
    }
}
