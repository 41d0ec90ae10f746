use std::rc::Rc;
use canvasinfill_tensor::ndarray::Dimension;

use canvasinfill_tensor::gradcheck::{check_input, check_params, spread_indices};
use canvasinfill_tensor::ndarray::{Array2, ArrayD, IxDyn};
use canvasinfill_tensor::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn all(x: &Tensor) -> Vec<usize> {
    (0..x.len()).collect()
}

/// Weighted sum so every output element gets a distinct cotangent.
fn probe<'g>(y: Var<'g>) -> Var<'g> {
    let shape = y.shape();
    let w = ArrayD::from_shape_fn(IxDyn(&shape), |ix| {
        let s: usize = ix.as_array_view().iter().enumerate().map(|(k, &i)| (k + 2) * (i + 1)).sum();
        ((s % 7) as f64 - 3.0) / 3.0 + 0.1
    });
    y.mul_const(Rc::new(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let pos = x.mapv(|v| v.abs() + 0.5);
    let r = check_input(&x, &all(&x), EPS, |_, v| probe(v.square().add(v.sigmoid()).sub(v.exp().scale(0.3))));
    assert!(r.passes(TOL), "{r:?}");
    let r = check_input(&pos, &all(&pos), EPS, |_, v| probe(v.ln().add(v.sqrt()).add(v.recip())));
    assert!(r.passes(TOL), "{r:?}");
    let r = check_input(&x, &all(&x), EPS, |_, v| probe(v.leaky_relu(0.2).add(v.relu()).add(v.abs())));
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn broadcasting_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 1]);
    let bc = b.clone();
    let r = check_input(&a, &all(&a), EPS, move |g, v| {
        let c = g.constant(bc.clone());
        probe(v.mul(c).add(c).sub(v.scale(2.0)))
    });
    assert!(r.passes(TOL), "{r:?}");
    let ac = a.clone();
    let r = check_input(&b, &all(&b), EPS, move |g, v| {
        let c = g.constant(ac.clone());
        probe(c.mul(v).add(v.broadcast_to(&[2, 3, 4])).sub(c.mul(v.square())))
    });
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn shape_ops_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let r = check_input(&x, &all(&x), EPS, |_, v| {
        let a = v.reshape(&[6, 4]).transpose_last2();
        let b = v.slice_axis(1, 1, 2).embed_axis(1, 0, 3);
        let c = Var::concat(&[v, v.scale(0.5)], 2);
        probe(a).add(probe(b)).add(probe(c)).add(v.sum_to(&[1, 3, 1]).square().sum()).add(v.mean())
    });
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn matmul_and_logsumexp() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let wc = w.clone();
    let r = check_input(&x, &all(&x), EPS, move |g, v| {
        let w = g.constant(wc.clone());
        probe(v.matmul(w).logsumexp_last())
    });
    assert!(r.passes(TOL), "{r:?}");
    let b3 = rand_tensor(&mut rng, &[2, 3, 4]);
    let r = check_input(&b3, &all(&b3), EPS, |_, v| probe(v.matmul(v.transpose_last2())));
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn conv_pool_and_resample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ParamSet::new();
    params.insert("x", rand_tensor(&mut rng, &[2, 3, 7, 6]));
    params.insert("w", rand_tensor(&mut rng, &[4, 3, 3, 3]));
    params.insert("w2", rand_tensor(&mut rng, &[2, 4, 3, 3]));
    let r = check_params(&params, 40, EPS, |b| {
        let h = b.get("x").conv2d(b.get("w"), 2, 1).leaky_relu(0.2);
        let h = h.conv2d(b.get("w2"), 1, 1);
        probe(h.max_pool2().upsample_nearest2().resize_bilinear(5, 3))
            .add(probe(h.resize_bilinear(7, 9)))
    });
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn second_order_through_conv_critic() {
    // Penalty (||dD/dx|| - 1)^2 of a small conv critic, differentiated w.r.t. its weights.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let mut params = ParamSet::new();
    params.insert("w1", rand_tensor(&mut rng, &[4, 3, 3, 3]).mapv(|v| v * 0.5));
    params.insert("b1", rand_tensor(&mut rng, &[1, 4, 1, 1]));
    params.insert("w2", rand_tensor(&mut rng, &[5, 4, 3, 3]).mapv(|v| v * 0.5));
    params.insert("lin", rand_tensor(&mut rng, &[5, 1]));
    let r = check_params(&params, 12, EPS, move |b| {
        let g = b.graph();
        let xv = g.param(x.clone());
        let h = xv.conv2d(b.get("w1"), 2, 1).add(b.get("b1")).leaky_relu(0.2);
        let h = h.conv2d(b.get("w2"), 2, 1).leaky_relu(0.2);
        let pooled = h.sum_to(&[2, 5, 1, 1]).scale(1.0 / 4.0).reshape(&[2, 5]);
        let score = pooled.matmul(b.get("lin")).sum();
        let gx = g.grad_with_graph(score, &[xv]).remove(0);
        let norm = gx.square().sum_to(&[2, 1, 1, 1]).sqrt();
        norm.add_scalar(-1.0).square().mean()
    });
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn second_order_through_resample_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let coords = spread_indices(x.len(), 30, 0);
    let ah = Rc::new(Array2::from_shape_fn((3, 5), |(i, j)| ((i + 2 * j) % 4) as f64 * 0.3));
    let r = check_input(&x, &coords, EPS, move |g, v| {
        let y = v.resample(ah.clone(), ah.clone()).sigmoid().sum();
        let gv = g.grad_with_graph(y, &[v]).remove(0);
        gv.square().sum()
    });
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn zero_gradient_norm_is_finite() {
    let g = Graph::new();
    let x = g.param(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
    let w = g.param(ArrayD::ones(IxDyn(&[1])));
    let score = x.scale(0.0).sum().add(w.sum().scale(0.0));
    let gx = g.grad_with_graph(score, &[x]).remove(0);
    let pen = gx.square().sum().sqrt().add_scalar(-1.0).square();
    assert_eq!(pen.item(), 1.0);
    let gw = g.grad(pen, &[w]).remove(0);
    assert!(gw.iter().all(|v| v.is_finite()));
}

#[test]
fn no_grad_records_constants() {
    let g = Graph::new();
    let p = g.param(ArrayD::ones(IxDyn(&[2])));
    let y = g.no_grad(|| p.scale(3.0));
    assert!(!y.requires_grad());
    let y2 = p.scale(3.0).sum();
    assert_eq!(g.grad(y2, &[p])[0].as_slice().unwrap(), &[3.0, 3.0]);
}
