//! Raw convolution and resampling kernels on contiguous NCHW buffers.
//!
//! Every kernel splits its work per batch sample. With the `parallel`
//! feature the samples are processed on the rayon pool; without it (or with
//! [`Exec::Sequential`]) they run in order on the calling thread. Partial
//! results are always reduced in sample order, so both paths produce
//! bit-identical output.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Execution strategy for the per-sample kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to sequential when the crate is built without `parallel`.
    Parallel,
}

impl Exec {
    pub const fn default_exec() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Default for Exec {
    fn default() -> Self {
        Self::default_exec()
    }
}

/// Geometry of a 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Panics if the kernel does not fit the padded input.
    pub fn new(x: [usize; 4], w: [usize; 4], stride: usize, pad: usize) -> Self {
        let [n, cin, h, wd] = x;
        let [cout, wcin, kh, kw] = w;
        assert_eq!(cin, wcin, "conv: input has {cin} channels, kernel expects {wcin}");
        assert!(stride >= 1, "conv: stride must be >= 1");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, oh, ow }
    }

    /// Geometry recovered from an output-gradient shape plus the original input size.
    pub fn from_output(
        gy: [usize; 4],
        w: [usize; 4],
        in_hw: (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Self {
        let g = Self::new([gy[0], w[1], in_hw.0, in_hw.1], w, stride, pad);
        assert_eq!(
            (g.n, g.cout, g.oh, g.ow),
            (gy[0], gy[1], gy[2], gy[3]),
            "conv: output gradient shape does not match geometry"
        );
        g
    }

    pub fn x_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    pub fn y_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }
    pub fn k_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn w_len(&self) -> usize {
        self.cout * self.k_len()
    }
    fn p_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    let hi = if g.w + g.pad > kj { ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.p_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let p = g.p_len();
    x.fill(0.0);
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let start = lo * g.stride + kj - g.pad;
                    for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a per-thread buffer of `len` values. The contents are stale;
/// callers must overwrite every element before reading it.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn gemm(alpha: f64, a: ArrayView2<f64>, b: ArrayView2<f64>, c: &mut ArrayViewMut2<f64>) {
    general_mat_mul(alpha, &a, &b, 0.0, c);
}

fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

fn map_samples<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// `y[n] = W * x[n]` (cross-correlation), returns a buffer of `n * y_len`.
pub fn conv2d_forward(exec: Exec, g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), g.n * g.x_len());
    assert_eq!(w.len(), g.w_len());
    let mut y = vec![0.0; g.n * g.y_len()];
    let wm = ArrayView2::from_shape((g.cout, g.k_len()), w).unwrap();
    for_each_chunk(exec, &mut y, g.y_len(), |n, yn| {
        with_scratch(g.k_len() * g.p_len(), |cols| {
            im2col(g, &x[n * g.x_len()..(n + 1) * g.x_len()], cols);
            let cm = ArrayView2::from_shape((g.k_len(), g.p_len()), &*cols).unwrap();
            let mut ym = ArrayViewMut2::from_shape((g.cout, g.p_len()), yn).unwrap();
            gemm(1.0, wm, cm, &mut ym);
        })
    });
    y
}

/// Adjoint of [`conv2d_forward`] in its input: `gx[n] = W^T * gy[n]`.
pub fn conv2d_input_grad(exec: Exec, g: &ConvGeom, gy: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(gy.len(), g.n * g.y_len());
    assert_eq!(w.len(), g.w_len());
    let mut gx = vec![0.0; g.n * g.x_len()];
    let wt = ArrayView2::from_shape((g.cout, g.k_len()), w).unwrap().reversed_axes();
    for_each_chunk(exec, &mut gx, g.x_len(), |n, gxn| {
        let gyn = ArrayView2::from_shape((g.cout, g.p_len()), &gy[n * g.y_len()..(n + 1) * g.y_len()])
            .unwrap();
        // gemm with beta 0 overwrites the whole scratch buffer.
        with_scratch(g.k_len() * g.p_len(), |cols| {
            {
                let mut cm = ArrayViewMut2::from_shape((g.k_len(), g.p_len()), &mut *cols).unwrap();
                gemm(1.0, wt, gyn, &mut cm);
            }
            col2im(g, cols, gxn);
        })
    });
    gx
}

/// Adjoint of [`conv2d_forward`] in its kernel: `gW = sum_n gy[n] * cols(x[n])^T`.
pub fn conv2d_weight_grad(exec: Exec, g: &ConvGeom, x: &[f64], gy: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), g.n * g.x_len());
    assert_eq!(gy.len(), g.n * g.y_len());
    let partials = map_samples(exec, g.n, |n| {
        let gyn = ArrayView2::from_shape((g.cout, g.p_len()), &gy[n * g.y_len()..(n + 1) * g.y_len()])
            .unwrap();
        let mut out = vec![0.0; g.w_len()];
        with_scratch(g.k_len() * g.p_len(), |cols| {
            im2col(g, &x[n * g.x_len()..(n + 1) * g.x_len()], cols);
            let cm = ArrayView2::from_shape((g.k_len(), g.p_len()), &*cols).unwrap();
            let mut om = ArrayViewMut2::from_shape((g.cout, g.k_len()), &mut out[..]).unwrap();
            gemm(1.0, gyn, cm.reversed_axes(), &mut om);
        });
        out
    });
    let mut gw = vec![0.0; g.w_len()];
    for part in partials {
        for (a, b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }
    gw
}

/// Applies `A_h * X * A_w^T` to every `h x w` plane of a planes-major buffer.
pub fn separable_apply(
    exec: Exec,
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ah: ArrayView2<f64>,
    aw: ArrayView2<f64>,
) -> Vec<f64> {
    let (oh, ow) = (ah.nrows(), aw.nrows());
    assert_eq!(ah.ncols(), h);
    assert_eq!(aw.ncols(), w);
    assert_eq!(x.len(), planes * h * w);
    let mut y = vec![0.0; planes * oh * ow];
    // Per-plane work is small; group planes so rayon tasks stay coarse.
    let group = 16usize.min(planes.max(1));
    for_each_chunk(exec, &mut y, group * oh * ow, |gi, ychunk| {
        let mut tmp = ndarray::Array2::<f64>::zeros((oh, w));
        for (pi, yp) in ychunk.chunks_mut(oh * ow).enumerate() {
            let p = gi * group + pi;
            let xp = ArrayView2::from_shape((h, w), &x[p * h * w..(p + 1) * h * w]).unwrap();
            gemm(1.0, ah, xp, &mut tmp.view_mut());
            let mut ym = ArrayViewMut2::from_shape((oh, ow), yp).unwrap();
            gemm(1.0, tmp.view(), aw.t(), &mut ym);
        }
    });
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.y_len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * g.kh + ki) * g.kw + kj]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        y[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn forward_matches_naive_loops() {
        for &(stride, pad, h) in &[(1, 1, 5), (2, 1, 6), (2, 1, 7), (1, 0, 4)] {
            let g = ConvGeom::new([2, 3, h, h + 1], [4, 3, 3, 3], stride, pad);
            let x = seq(g.n * g.x_len(), 2.0);
            let w = seq(g.w_len(), 1.0);
            let y = conv2d_forward(Exec::Sequential, &g, &x, &w);
            let r = naive_conv(&g, &x, &w);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x, W), gy> == <x, input_grad(gy, W)> == <W, weight_grad(x, gy)>
        let g = ConvGeom::new([2, 3, 7, 6], [5, 3, 3, 3], 2, 1);
        let x = seq(g.n * g.x_len(), 1.3);
        let w = seq(g.w_len(), 0.7);
        let gy = seq(g.n * g.y_len(), 0.9);
        let y = conv2d_forward(Exec::Sequential, &g, &x, &w);
        let gx = conv2d_input_grad(Exec::Sequential, &g, &gy, &w);
        let gw = conv2d_weight_grad(Exec::Sequential, &g, &x, &gy);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &gy);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-10);
        assert!((lhs - dot(&w, &gw)).abs() < 1e-10);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let g = ConvGeom::new([4, 2, 8, 8], [3, 2, 3, 3], 1, 1);
        let x = seq(g.n * g.x_len(), 1.0);
        let w = seq(g.w_len(), 1.0);
        let gy = seq(g.n * g.y_len(), 1.0);
        assert_eq!(
            conv2d_forward(Exec::Sequential, &g, &x, &w),
            conv2d_forward(Exec::Parallel, &g, &x, &w)
        );
        assert_eq!(
            conv2d_weight_grad(Exec::Sequential, &g, &x, &gy),
            conv2d_weight_grad(Exec::Parallel, &g, &x, &gy)
        );
    }

    fn naive_adjoints(g: &ConvGeom, x: &[f64], w: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; g.n * g.x_len()];
        let mut gw = vec![0.0; g.w_len()];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let d = gy[((n * g.cout + co) * g.oh + oy) * g.ow + ox];
                        for ci in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize;
                                    let wi = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                                    gx[xi] += w[wi] * d;
                                    gw[wi] += x[xi] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gw)
    }

    proptest::proptest! {
        #[test]
        fn kernels_match_naive_loops_on_random_geometry(
            n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
            h in 1usize..9, w in 1usize..9, kh in 1usize..5, kw in 1usize..5,
            stride in 1usize..4, pad in 0usize..4,
        ) {
            proptest::prop_assume!(h + 2 * pad >= kh && w + 2 * pad >= kw);
            let g = ConvGeom::new([n, cin, h, w], [cout, cin, kh, kw], stride, pad);
            let x = seq(g.n * g.x_len(), 1.1);
            let wt = seq(g.w_len(), 0.8);
            let gy = seq(g.n * g.y_len(), 0.6);
            let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-9);
            proptest::prop_assert!(close(&conv2d_forward(Exec::Sequential, &g, &x, &wt), &naive_conv(&g, &x, &wt)));
            let (gx, gw) = naive_adjoints(&g, &x, &wt, &gy);
            proptest::prop_assert!(close(&conv2d_input_grad(Exec::Sequential, &g, &gy, &wt), &gx));
            proptest::prop_assert!(close(&conv2d_weight_grad(Exec::Sequential, &g, &x, &gy), &gw));
        }
    }
}
