//! Adam over a parameter tree.

use crate::autodiff::Mat;
use crate::nn::ParamTree;

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
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must have the same tree shape as `params`.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64)
    where
        P: ParamTree<Mat>,
        G: ParamTree<Mat>,
    {
        let mut flat = Vec::new();
        grads.visit("", &mut |_, g| flat.push(g.clone()));
        if self.m.is_empty() {
            self.m = flat.iter().map(|g| Mat::zeros(g.dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(flat.len(), self.m.len(), "parameter tree changed between steps");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let g = &flat[i];
            m[i].zip_mut_with(g, |mi, &gi| *mi = beta1 * *mi + (1.0 - beta1) * gi);
            v[i].zip_mut_with(g, |vi, &gi| *vi = beta2 * *vi + (1.0 - beta2) * gi * gi);
            ndarray::Zip::from(p).and(&m[i]).and(&v[i]).for_each(|p, &mi, &vi| {
                *p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            });
            i += 1;
        });
    }
}
