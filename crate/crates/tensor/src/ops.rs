//! Differentiable ops on [`Var`].
//!
//! Binary elementwise ops broadcast with numpy rules; their gradients are
//! reduced back to each operand's shape with [`Var::sum_to`].

use std::rc::Rc;

use ndarray::{Array2, ArrayD, Axis, IxDyn, Slice};

use crate::graph::{Tensor, Var};
use crate::kernels::{self, ConvGeom, Exec};

/// Sums `a` down to `target` (the inverse of broadcasting).
pub fn reduce_to(a: &Tensor, target: &[usize]) -> Tensor {
    if a.shape() == target {
        return a.clone();
    }
    let extra = a.ndim().checked_sub(target.len()).unwrap_or_else(|| {
        panic!("sum_to: cannot reduce {:?} to {:?}", a.shape(), target)
    });
    let mut out = a.clone();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &t) in target.iter().enumerate() {
        let s = out.shape()[ax];
        if s != t {
            assert_eq!(t, 1, "sum_to: cannot reduce {:?} to {:?}", a.shape(), target);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn dims4(v: &Tensor, what: &str) -> [usize; 4] {
    let s = v.shape();
    assert_eq!(s.len(), 4, "{what}: expected NCHW tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

impl<'g> Var<'g> {
    // ---- elementwise -------------------------------------------------

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        let v = &*self.value() + &*o.value();
        let (sa, sb) = (self.shape(), o.shape());
        self.graph.record(v, &[self, o], move |_, _, g| {
            vec![Some(g.sum_to(&sa)), Some(g.sum_to(&sb))]
        })
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        let v = &*self.value() - &*o.value();
        let (sa, sb) = (self.shape(), o.shape());
        self.graph.record(v, &[self, o], move |_, _, g| {
            vec![Some(g.sum_to(&sa)), Some(g.neg().sum_to(&sb))]
        })
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        let v = &*self.value() * &*o.value();
        let (sa, sb) = (self.shape(), o.shape());
        self.graph.record(v, &[self, o], move |ins, _, g| {
            let ga = ins[0].requires_grad().then(|| g.mul(ins[1]).sum_to(&sa));
            let gb = ins[1].requires_grad().then(|| g.mul(ins[0]).sum_to(&sb));
            vec![ga, gb]
        })
    }

    /// Multiplies by a (broadcastable) constant.
    pub fn mul_const(self, c: Rc<Tensor>) -> Var<'g> {
        let v = &*self.value() * &*c;
        let sa = self.shape();
        self.graph.record(v, &[self], move |_, _, g| {
            vec![Some(g.mul_const(c.clone()).sum_to(&sa))]
        })
    }

    /// Adds a (broadcastable) constant.
    pub fn add_const(self, c: &Tensor) -> Var<'g> {
        let v = &*self.value() + c;
        let sa = self.shape();
        self.graph
            .record(v, &[self], move |_, _, g| vec![Some(g.sum_to(&sa))])
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let v = self.value().mapv(|x| x * s);
        self.graph
            .record(v, &[self], move |_, _, g| vec![Some(g.scale(s))])
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let v = self.value().mapv(|x| x + s);
        self.graph.record(v, &[self], |_, _, g| vec![Some(g)])
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'g> {
        self.neg().add_scalar(1.0)
    }

    pub fn square(self) -> Var<'g> {
        let v = self.value().mapv(|x| x * x);
        self.graph.record(v, &[self], |ins, _, g| {
            vec![Some(g.mul(ins[0]).scale(2.0))]
        })
    }

    pub fn sqrt(self) -> Var<'g> {
        let v = self.value().mapv(f64::sqrt);
        self.graph.record(v, &[self], |_, out, g| {
            vec![Some(g.mul(out.recip_or_zero()).scale(0.5))]
        })
    }

    pub fn recip(self) -> Var<'g> {
        let v = self.value().mapv(|x| 1.0 / x);
        self.graph.record(v, &[self], |_, out, g| {
            vec![Some(g.mul(out.square()).neg())]
        })
    }

    /// `1/x`, with `0` wherever `x == 0` (and a zero derivative there).
    pub fn recip_or_zero(self) -> Var<'g> {
        let v = self.value().mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.graph.record(v, &[self], |_, out, g| {
            vec![Some(g.mul(out.square()).neg())]
        })
    }

    pub fn exp(self) -> Var<'g> {
        let v = self.value().mapv(f64::exp);
        self.graph
            .record(v, &[self], |_, out, g| vec![Some(g.mul(out))])
    }

    pub fn ln(self) -> Var<'g> {
        let v = self.value().mapv(f64::ln);
        self.graph.record(v, &[self], |ins, _, g| {
            vec![Some(g.mul(ins[0].recip()))]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let v = self.value().mapv(sigmoid);
        self.graph.record(v, &[self], |_, out, g| {
            vec![Some(g.mul(out.mul(out.one_minus())))]
        })
    }

    /// Multiplies by a constant mask derived from the input sign.
    fn piecewise_linear(self, slope: impl Fn(f64) -> f64) -> Var<'g> {
        let mask = Rc::new(self.value().mapv(slope));
        self.mul_const(mask)
    }

    pub fn relu(self) -> Var<'g> {
        self.piecewise_linear(|x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.piecewise_linear(move |x| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn abs(self) -> Var<'g> {
        self.piecewise_linear(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    // ---- reductions and shape ------------------------------------------

    /// Sums down to `shape` (inverse of broadcasting).
    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        let v = reduce_to(&self.value(), shape);
        let src = self.shape();
        self.graph.record(v, &[self], move |_, _, g| {
            vec![Some(g.broadcast_to(&src))]
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g> {
        if self.shape() == shape {
            return self;
        }
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast_to: {:?} -> {shape:?}", self.shape()))
            .to_owned();
        let src = self.shape();
        self.graph.record(v, &[self], move |_, _, g| {
            vec![Some(g.sum_to(&src))]
        })
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'g> {
        self.sum_to(&[])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let v = self.value();
        let v = contiguous(&v).into_owned();
        let src = self.shape();
        self.graph.record(from_vec(shape, v), &[self], move |_, _, g| {
            vec![Some(g.reshape(&src))]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Var<'g> {
        let v = self.value();
        let nd = v.ndim();
        assert!(nd >= 2, "transpose_last2 needs ndim >= 2");
        let mut t = v.view();
        t.swap_axes(nd - 2, nd - 1);
        let t = t.as_standard_layout().into_owned();
        self.graph
            .record(t, &[self], |_, _, g| vec![Some(g.transpose_last2())])
    }

    /// 2-D `[m,k]x[k,n]` or batched 3-D `[b,m,k]x[b,k,n]` matrix product.
    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), o.value());
        let v = match (a.ndim(), b.ndim()) {
            (2, 2) => {
                let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                a2.dot(&b2).into_dyn()
            }
            (3, 3) => {
                let a3 = a.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                assert_eq!(a3.shape()[0], b3.shape()[0], "matmul: batch mismatch");
                let (bt, m, n) = (a3.shape()[0], a3.shape()[1], b3.shape()[2]);
                let mut out = ndarray::Array3::<f64>::zeros((bt, m, n));
                for i in 0..bt {
                    out.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
                }
                out.into_dyn()
            }
            (x, y) => panic!("matmul: unsupported ranks {x} and {y}"),
        };
        self.graph.record(v, &[self, o], |ins, _, g| {
            let ga = ins[0].requires_grad().then(|| g.matmul(ins[1].transpose_last2()));
            let gb = ins[1].requires_grad().then(|| ins[0].transpose_last2().matmul(g));
            vec![ga, gb]
        })
    }

    /// Concatenates along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.record(v, parts, move |_, _, g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let s = g.slice_axis(axis, start, len);
                    start += len;
                    Some(s)
                })
                .collect()
        })
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let full = self.shape()[axis];
        self.graph.record(v, &[self], move |_, _, g| {
            vec![Some(g.embed_axis(axis, start, full))]
        })
    }

    /// Places `self` at `start` along `axis` inside zeros of length `full`.
    pub fn embed_axis(self, axis: usize, start: usize, full: usize) -> Var<'g> {
        let mut shape = self.shape();
        let len = shape[axis];
        shape[axis] = full;
        let mut v = Tensor::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(&*self.value());
        self.graph.record(v, &[self], move |_, _, g| {
            vec![Some(g.slice_axis(axis, start, len))]
        })
    }

    /// `log(sum(exp(x)))` over the last axis; output drops that axis.
    pub fn logsumexp_last(self) -> Var<'g> {
        let v = self.value();
        let last = v.ndim() - 1;
        let out = v.map_axis(Axis(last), |row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
        });
        self.graph.record(out, &[self], move |ins, out, g| {
            let x = ins[0];
            let mut kshape = out.shape();
            kshape.push(1);
            let xs = x.shape();
            let soft = x.sub(out.reshape(&kshape).broadcast_to(&xs)).exp();
            vec![Some(g.reshape(&kshape).broadcast_to(&xs).mul(soft))]
        })
    }

    // ---- index ops ---------------------------------------------------

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather_flat(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let flat = contiguous(&x);
        let data: Vec<f64> = idx.iter().map(|&i| flat[i]).collect();
        let src = self.shape();
        self.graph.record(from_vec(shape, data), &[self], move |_, _, g| {
            vec![Some(g.scatter_add_flat(idx.clone(), &src))]
        })
    }

    /// Adjoint of [`Var::gather_flat`].
    pub fn scatter_add_flat(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'g> {
        let g = self.value();
        let gflat = contiguous(&g);
        let mut data = vec![0.0; shape.iter().product()];
        for (k, &i) in idx.iter().enumerate() {
            data[i] += gflat[k];
        }
        let src = self.shape();
        self.graph.record(from_vec(shape, data), &[self], move |_, _, g| {
            vec![Some(g.gather_flat(idx.clone(), &src))]
        })
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(self) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "max_pool2");
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh >= 1 && ow >= 1, "max_pool2: input {h}x{w} too small");
        let flat = contiguous(&x);
        let mut idx = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if flat[j] > flat[best] {
                            best = j;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        self.gather_flat(Rc::new(idx), &[n, c, oh, ow])
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of an NCHW input with an `[cout, cin, kh, kw]` kernel.
    pub fn conv2d(self, w: Var<'g>, stride: usize, pad: usize) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let g = ConvGeom::new(dims4(&x, "conv2d"), dims4(&wv, "conv2d weight"), stride, pad);
        let y = kernels::conv2d_forward(Exec::default(), &g, &contiguous(&x), &contiguous(&wv));
        let out = from_vec(&[g.n, g.cout, g.oh, g.ow], y);
        self.graph.record(out, &[self, w], move |ins, _, gy| {
            let (x, w) = (ins[0], ins[1]);
            let gx = x.requires_grad().then(|| gy.conv2d_input_grad(w, (g.h, g.w), stride, pad));
            let gw = w.requires_grad().then(|| x.conv2d_weight_grad(gy, (g.kh, g.kw), stride, pad));
            vec![gx, gw]
        })
    }

    /// Transposed convolution: adjoint of [`Var::conv2d`] in its input.
    /// `self` is the output-side gradient, `in_hw` the original input size.
    pub fn conv2d_input_grad(self, w: Var<'g>, in_hw: (usize, usize), stride: usize, pad: usize) -> Var<'g> {
        let (gy, wv) = (self.value(), w.value());
        let g = ConvGeom::from_output(dims4(&gy, "conv2d_input_grad"), dims4(&wv, "weight"), in_hw, stride, pad);
        let gx = kernels::conv2d_input_grad(Exec::default(), &g, &contiguous(&gy), &contiguous(&wv));
        let out = from_vec(&[g.n, g.cin, g.h, g.w], gx);
        self.graph.record(out, &[self, w], move |ins, _, h| {
            let (gy, w) = (ins[0], ins[1]);
            let d_gy = gy.requires_grad().then(|| h.conv2d(w, stride, pad));
            let d_w = w.requires_grad().then(|| h.conv2d_weight_grad(gy, (g.kh, g.kw), stride, pad));
            vec![d_gy, d_w]
        })
    }

    /// Adjoint of [`Var::conv2d`] in its kernel: `self` is the input `x`,
    /// `gy` the output-side gradient.
    pub fn conv2d_weight_grad(self, gy: Var<'g>, k: (usize, usize), stride: usize, pad: usize) -> Var<'g> {
        let (x, gyv) = (self.value(), gy.value());
        let xs = dims4(&x, "conv2d_weight_grad");
        let gys = dims4(&gyv, "conv2d_weight_grad gy");
        let g = ConvGeom::new(xs, [gys[1], xs[1], k.0, k.1], stride, pad);
        assert_eq!((g.oh, g.ow), (gys[2], gys[3]), "conv2d_weight_grad: gy spatial mismatch");
        let gw = kernels::conv2d_weight_grad(Exec::default(), &g, &contiguous(&x), &contiguous(&gyv));
        let out = from_vec(&[g.cout, g.cin, g.kh, g.kw], gw);
        self.graph.record(out, &[self, gy], move |ins, _, h| {
            let (x, gy) = (ins[0], ins[1]);
            let d_x = x.requires_grad().then(|| gy.conv2d_input_grad(h, (g.h, g.w), stride, pad));
            let d_gy = gy.requires_grad().then(|| x.conv2d(h, stride, pad));
            vec![d_x, d_gy]
        })
    }

    // ---- resampling --------------------------------------------------

    /// Applies `A_h * X * A_w^T` to every spatial plane of an NCHW tensor.
    pub fn resample(self, ah: Rc<Array2<f64>>, aw: Rc<Array2<f64>>) -> Var<'g> {
        let x = self.value();
        let [n, c, h, w] = dims4(&x, "resample");
        let y = kernels::separable_apply(Exec::default(), &contiguous(&x), n * c, (h, w), ah.view(), aw.view());
        let out = from_vec(&[n, c, ah.nrows(), aw.nrows()], y);
        self.graph.record(out, &[self], move |_, _, g| {
            let aht = Rc::new(ah.t().to_owned());
            let awt = Rc::new(aw.t().to_owned());
            vec![Some(g.resample(aht, awt))]
        })
    }

    /// Bilinear resize (half-pixel centers, edge clamped, no antialiasing).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "resize_bilinear: expected NCHW");
        if (s[2], s[3]) == (oh, ow) {
            return self;
        }
        self.resample(Rc::new(bilinear_matrix(s[2], oh)), Rc::new(bilinear_matrix(s[3], ow)))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(self) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "upsample_nearest2: expected NCHW");
        self.resample(Rc::new(nearest2_matrix(s[2])), Rc::new(nearest2_matrix(s[3])))
    }
}

/// Logistic function, kept inside the open interval (0, 1): large inputs
/// return the neighbours of 0 and 1 instead of rounding onto them.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Interpolation matrix `[out, inp]` for one axis of a bilinear resize.
pub fn bilinear_matrix(inp: usize, out: usize) -> Array2<f64> {
    assert!(inp >= 1 && out >= 1, "bilinear_matrix: empty axis");
    let mut m = Array2::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

fn nearest2_matrix(inp: usize) -> Array2<f64> {
    let mut m = Array2::zeros((2 * inp, inp));
    for i in 0..2 * inp {
        m[[i, i / 2]] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::sigmoid;

    #[test]
    fn sigmoid_stays_in_open_interval() {
        for x in [-1e4, -800.0, -40.0, 0.0, 40.0, 800.0, 1e4] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-16);
    }
}
