//! Central finite-difference checks of analytic gradients.

use crate::graph::{Graph, Tensor, Var};
use crate::params::{Bound, ParamSet};

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = rel_err(analytic, numeric);
        self.checked += 1;
        if rel >= self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some(Mismatch { name: name.to_string(), index, analytic, numeric, rel_err: rel });
        }
    }

    pub fn merge(mut self, other: GradReport) -> GradReport {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Evenly spread flat indices, at most `count` of them.
pub fn spread_indices(len: usize, count: usize, offset: usize) -> Vec<usize> {
    if len == 0 || count == 0 {
        return Vec::new();
    }
    if count >= len {
        return (0..len).collect();
    }
    let step = len as f64 / count as f64;
    (0..count).map(|i| ((i as f64 * step) as usize + offset) % len).collect()
}

/// Checks `d f(x) / d x` at the given flat coordinates of `x`.
pub fn check_input<F>(x: &Tensor, coords: &[usize], eps: f64, f: F) -> GradReport
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    let graph = Graph::new();
    let xv = graph.param(x.clone());
    let y = f(&graph, xv);
    let analytic = graph.grad(y, &[xv]).remove(0);
    let analytic: Vec<f64> = analytic.iter().copied().collect();
    let eval = |xp: Tensor| {
        let g = Graph::new();
        // Leaves stay differentiable so `f` may take inner gradients.
        let v = g.param(xp);
        f(&g, v).item()
    };
    let mut report = GradReport::default();
    for &i in coords {
        let mut plus = x.clone();
        let mut minus = x.clone();
        *plus.iter_mut().nth(i).unwrap() += eps;
        *minus.iter_mut().nth(i).unwrap() -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        report.record("input", i, analytic[i], numeric);
    }
    report
}

/// Checks the gradient of `f` with respect to every tensor of `params`,
/// sampling up to `per_tensor` coordinates from each.
pub fn check_params<F>(params: &ParamSet, per_tensor: usize, eps: f64, f: F) -> GradReport
where
    F: for<'g> Fn(&Bound<'g>) -> Var<'g>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph, true);
    let y = f(&bound);
    let grads = bound.grads(y);
    let eval = |p: &ParamSet| {
        let g = Graph::new();
        let b = p.bind(&g, true);
        f(&b).item()
    };
    let mut report = GradReport::default();
    for (ti, (name, t)) in params.iter().enumerate() {
        let g = grads.get(name).unwrap();
        let gflat: Vec<f64> = g.iter().copied().collect();
        for i in spread_indices(t.len(), per_tensor, ti) {
            let mut p = params.clone();
            *p.get_mut(name).unwrap().iter_mut().nth(i).unwrap() += eps;
            let fp = eval(&p);
            *p.get_mut(name).unwrap().iter_mut().nth(i).unwrap() -= 2.0 * eps;
            let fm = eval(&p);
            report.record(name, i, gflat[i], (fp - fm) / (2.0 * eps));
        }
    }
    report
}
