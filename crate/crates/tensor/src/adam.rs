use crate::{Element, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before each step.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(0.5) }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &Tensor<T>| vec![T::ZERO; p.len()];
        Self {
            config,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Clips `grads` to the configured global norm and applies one update.
    /// Parameters without a gradient still advance their moments with zero.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let step = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let scale = T::from_f64(scale);
        for (idx, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let p = params.value_mut(idx);
            for k in 0..m.len() {
                let gk = g.as_ref().map_or(T::ZERO, |g| g.data()[k] * scale);
                m[k] = b1 * m[k] + (T::ONE - b1) * gk;
                v[k] = b2 * v[k] + (T::ONE - b2) * gk * gk;
                p.data_mut()[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
