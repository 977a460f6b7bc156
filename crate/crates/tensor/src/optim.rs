use crate::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` in place. `step` is 1-based.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamWConfig,
    step: u64,
) {
    assert_eq!(param.len(), grad.len(), "adamw_step: grad length");
    assert_eq!(param.len(), state.m.len(), "adamw_step: state length");
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// AdamW over every trainable tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let states = store
            .ids()
            .map(|id| AdamState::new(store.value(id).numel()))
            .collect();
        Self {
            config,
            step: 0,
            states,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients; values are re-rounded to the store precision.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let precision = store.precision();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).data().to_vec();
            let value = store.value_mut(id).data_mut();
            adamw_step(
                value,
                &grad,
                &mut self.states[id.index()],
                &self.config,
                self.step,
            );
            precision.round_slice(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.5, -2.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &cfg, 1);
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn one_step_descends() {
        // f(w) = w^2 / 2, grad = w
        let cfg = AdamWConfig::default();
        let mut w = vec![1.0];
        let mut s = AdamState::new(1);
        let g = w.clone();
        adamw_step(&mut w, &g, &mut s, &cfg, 1);
        assert!(w[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 0.5 * sum a_i (w_i - c_i)^2, optimum w = c, f* = 0
        let a = [1.0, 3.0, 0.5];
        let c = [0.7, -1.2, 2.0];
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![0.0; 3];
        let mut s = AdamState::new(3);
        let loss = |w: &[f64]| {
            (0..3)
                .map(|i| 0.5 * a[i] * (w[i] - c[i]).powi(2))
                .sum::<f64>()
        };
        for t in 1..=200 {
            let g: Vec<f64> = (0..3).map(|i| a[i] * (w[i] - c[i])).collect();
            adamw_step(&mut w, &g, &mut s, &cfg, t);
        }
        assert!(loss(&w) < 1e-4, "loss {}", loss(&w));
    }
}
