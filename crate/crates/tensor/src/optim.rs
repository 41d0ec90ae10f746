//! First-order optimizers over [`ParamSet`]s.

use crate::graph::Tensor;
use crate::params::ParamSet;

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: ParamSet::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if self.momentum == 0.0 {
                p.scaled_add(-self.lr, g);
                continue;
            }
            if !self.velocity.contains(name) {
                self.velocity.insert(name, Tensor::zeros(g.shape()));
            }
            let v = self.velocity.get_mut(name).unwrap();
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            p.scaled_add(-self.lr, v);
        }
    }

    pub fn state(&self) -> &ParamSet {
        &self.velocity
    }

    pub fn load_state(&mut self, velocity: ParamSet) {
        self.velocity = velocity;
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: ParamSet::new(), v: ParamSet::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()));
                self.v.insert(name, Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).unwrap();
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(name).unwrap();
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }

    /// `(t, first moments, second moments)`.
    pub fn state(&self) -> (u64, &ParamSet, &ParamSet) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: ParamSet, v: ParamSet) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
