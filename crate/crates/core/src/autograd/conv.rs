//! Convolutions in channel-first layout.
//!
//! Feature volumes are stored as `[C, ...batch/time..., H, W]`, so every
//! convolution reduces to one matrix product between the flattened kernel and
//! a patch matrix whose columns run over all frames at once.

use ndarray::{Array2, ArrayView2, Axis, IxDyn};

use super::ops::{as_matrix, reshape};
use super::{Function, GradSink, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geom2d {
    cin: usize,
    n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom2d {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn input_index(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is inside
    /// the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kx)).div_ceil(self.stride);
        let limit = (self.w + self.pad) as isize - kx as isize;
        let hi = if limit <= 0 {
            0
        } else {
            ((limit as usize - 1) / self.stride + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f64], g: &Geom2d) -> Array2<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for n in 0..g.n {
                    let src = &x[(ci * g.n + n) * plane..(ci * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let Some(iy) = g.input_index(oy, ky) else {
                            continue;
                        };
                        let base = (n * g.ho + oy) * g.wo;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst[base + lo..base + hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                        } else {
                            for (k, d) in dst[base + lo..base + hi].iter_mut().enumerate() {
                                *d = srow[ix0 + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), cols).unwrap()
}

fn col2im(cols: ArrayView2<'_, f64>, g: &Geom2d) -> Vec<f64> {
    let plane = g.h * g.w;
    let mut x = vec![0.0; g.cin * g.n * plane];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = cols.row((ci * g.kh + ky) * g.kw + kx);
                let src = row.as_slice().expect("standard layout");
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for n in 0..g.n {
                    let dst = &mut x[(ci * g.n + n) * plane..(ci * g.n + n + 1) * plane];
                    for oy in 0..g.ho {
                        let Some(iy) = g.input_index(oy, ky) else {
                            continue;
                        };
                        let base = (n * g.ho + oy) * g.wo;
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let ix0 = lo * g.stride + kx - g.pad;
                        for (k, &v) in src[base + lo..base + hi].iter().enumerate() {
                            drow[ix0 + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

struct Conv2dFn {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: Geom2d,
    /// Patch matrix, kept only when the kernel needs a gradient.
    cols: Option<Array2<f64>>,
}

impl Function for Conv2dFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let g = &self.geom;
        let wt = graph.value(self.w);
        let cout = wt.shape()[0];
        let g2 = as_matrix(grad, cout, g.cols());
        if sink.wants(self.w) {
            let dw = if g.is_pointwise() {
                g2.dot(&as_matrix(graph.value(self.x), g.cin, g.cols()).t())
            } else {
                g2.dot(&self.cols.as_ref().expect("cached patches").t())
            };
            let dw = reshape(dw.into_dyn(), wt.shape());
            sink.add(self.w, dw);
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                sink.add(b, g2.sum_axis(Axis(1)).into_dyn());
            }
        }
        if sink.wants(self.x) {
            let w2 = as_matrix(wt, cout, g.rows());
            let dcols = w2.t().dot(&g2).as_standard_layout().into_owned();
            let shape = graph.shape(self.x).to_vec();
            let dx = if g.is_pointwise() {
                dcols.into_dyn()
            } else {
                Tensor::from_shape_vec(IxDyn(&[g.cin * g.n * g.h * g.w]), col2im(dcols.view(), g)).unwrap()
            };
            sink.add(self.x, reshape(dx, &shape));
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GeomTime {
    cin: usize,
    b: usize,
    t: usize,
    s: usize,
    k: usize,
    pad: usize,
}

impl GeomTime {
    fn rows(&self) -> usize {
        self.cin * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.t * self.s
    }

    /// Valid output time range for kernel tap `j` and the input offset.
    fn span(&self, j: usize) -> (usize, usize, isize) {
        let shift = j as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.t as isize - shift).min(self.t as isize)).max(0) as usize;
        (lo, hi.max(lo), shift)
    }
}

fn time_im2col(x: &[f64], g: &GeomTime) -> Array2<f64> {
    let ncols = g.cols();
    let mut cols = vec![0.0; g.rows() * ncols];
    let seq = g.t * g.s;
    for ci in 0..g.cin {
        for j in 0..g.k {
            let row = ci * g.k + j;
            let (lo, hi, shift) = g.span(j);
            for b in 0..g.b {
                let src = &x[(ci * g.b + b) * seq..(ci * g.b + b + 1) * seq];
                let dst = &mut cols[row * ncols + b * seq..row * ncols + (b + 1) * seq];
                for t in lo..hi {
                    let it = (t as isize + shift) as usize;
                    dst[t * g.s..(t + 1) * g.s].copy_from_slice(&src[it * g.s..(it + 1) * g.s]);
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), ncols), cols).unwrap()
}

fn time_col2im(cols: ArrayView2<'_, f64>, g: &GeomTime) -> Vec<f64> {
    let seq = g.t * g.s;
    let mut x = vec![0.0; g.cin * g.b * seq];
    for ci in 0..g.cin {
        for j in 0..g.k {
            let row = cols.row(ci * g.k + j);
            let src_row = row.as_slice().expect("standard layout");
            let (lo, hi, shift) = g.span(j);
            for b in 0..g.b {
                let src = &src_row[b * seq..(b + 1) * seq];
                let dst = &mut x[(ci * g.b + b) * seq..(ci * g.b + b + 1) * seq];
                for t in lo..hi {
                    let it = (t as isize + shift) as usize;
                    for (d, s) in dst[it * g.s..(it + 1) * g.s]
                        .iter_mut()
                        .zip(&src[t * g.s..(t + 1) * g.s])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

struct TimeConvFn {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: GeomTime,
    cols: Option<Array2<f64>>,
}

impl Function for TimeConvFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let g = &self.geom;
        let wt = graph.value(self.w);
        let cout = wt.shape()[0];
        let g2 = as_matrix(grad, cout, g.cols());
        if sink.wants(self.w) {
            let dw = g2.dot(&self.cols.as_ref().expect("cached patches").t());
            let dw = reshape(dw.into_dyn(), wt.shape());
            sink.add(self.w, dw);
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                sink.add(b, g2.sum_axis(Axis(1)).into_dyn());
            }
        }
        if sink.wants(self.x) {
            let w2 = as_matrix(wt, cout, g.rows());
            let dcols = w2.t().dot(&g2).as_standard_layout().into_owned();
            let shape = graph.shape(self.x).to_vec();
            let dx = Tensor::from_shape_vec(IxDyn(&shape), time_col2im(dcols.view(), g)).unwrap();
            sink.add(self.x, dx);
        }
    }
}

struct AdaptiveTimeConvFn {
    x: Var,
    kernel: Var,
    geom: GeomTime,
}

impl Function for AdaptiveTimeConvFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let g = &self.geom;
        let seq = g.t * g.s;
        let kern = graph.value(self.kernel).as_slice().expect("contiguous kernel");
        let gs = grad.as_slice().expect("contiguous gradient");
        if sink.wants(self.x) {
            let mut dx = vec![0.0; gs.len()];
            for cb in 0..g.cin * g.b {
                let go = &gs[cb * seq..(cb + 1) * seq];
                let dst = &mut dx[cb * seq..(cb + 1) * seq];
                for j in 0..g.k {
                    let kj = kern[cb * g.k + j];
                    let (lo, hi, shift) = g.span(j);
                    for t in lo..hi {
                        let it = (t as isize + shift) as usize;
                        for (d, &v) in dst[it * g.s..(it + 1) * g.s]
                            .iter_mut()
                            .zip(&go[t * g.s..(t + 1) * g.s])
                        {
                            *d += kj * v;
                        }
                    }
                }
            }
            let shape = graph.shape(self.x).to_vec();
            sink.add(self.x, Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap());
        }
        if sink.wants(self.kernel) {
            let xs = graph.value(self.x).as_slice().expect("contiguous input");
            let mut dk = vec![0.0; g.cin * g.b * g.k];
            for cb in 0..g.cin * g.b {
                let go = &gs[cb * seq..(cb + 1) * seq];
                let src = &xs[cb * seq..(cb + 1) * seq];
                for j in 0..g.k {
                    let (lo, hi, shift) = g.span(j);
                    let mut acc = 0.0;
                    for t in lo..hi {
                        let it = (t as isize + shift) as usize;
                        for (&gv, &xv) in go[t * g.s..(t + 1) * g.s].iter().zip(&src[it * g.s..(it + 1) * g.s]) {
                            acc += gv * xv;
                        }
                    }
                    dk[cb * g.k + j] = acc;
                }
            }
            sink.add(
                self.kernel,
                Tensor::from_shape_vec(IxDyn(&[g.cin, g.b, g.k]), dk).unwrap(),
            );
        }
    }
}

fn time_geom(x_shape: &[usize], k: usize) -> GeomTime {
    assert!(x_shape.len() >= 3, "time convolution expects [C, B, T, ...]");
    assert!(k % 2 == 1, "temporal kernel size must be odd");
    GeomTime {
        cin: x_shape[0],
        b: x_shape[1],
        t: x_shape[2],
        s: x_shape[3..].iter().product(),
        k,
        pad: k / 2,
    }
}

impl Graph {
    /// 2-D convolution of every frame. `x: [Cin, ..., H, W]`,
    /// `w: [Cout, Cin, kh, kw]`, optional `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() >= 3, "conv2d input must be [C, ..., H, W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [Cout, Cin, kh, kw]");
        assert_eq!(ws[1], xs[0], "conv2d input channels");
        let nd = xs.len();
        let (h, wd) = (xs[nd - 2], xs[nd - 1]);
        assert!(stride >= 1);
        assert!(
            h + 2 * pad >= ws[2] && wd + 2 * pad >= ws[3],
            "conv2d kernel larger than padded input"
        );
        let geom = Geom2d {
            cin: xs[0],
            n: xs[1..nd - 2].iter().product(),
            h,
            w: wd,
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h + 2 * pad - ws[2]) / stride + 1,
            wo: (wd + 2 * pad - ws[3]) / stride + 1,
        };
        let cout = ws[0];
        let wv = self.value(w);
        let w2 = as_matrix(wv, cout, geom.rows());
        let (mut y, cols) = if geom.is_pointwise() {
            (w2.dot(&as_matrix(self.value(x), geom.cin, geom.cols())), None)
        } else {
            let cols = im2col(self.value(x).as_slice().expect("contiguous input"), &geom);
            (w2.dot(&cols), Some(cols))
        };
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order((cout, 1)).unwrap();
            y += &bv;
        }
        let mut out_shape = xs.clone();
        out_shape[0] = cout;
        out_shape[nd - 2] = geom.ho;
        out_shape[nd - 1] = geom.wo;
        let value = reshape(y.into_dyn(), &out_shape);
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let keep_cols = self.requires_grad(w);
        self.push(value, &deps, move || Conv2dFn {
            x,
            w,
            b,
            geom,
            cols: if keep_cols { cols } else { None },
        })
    }

    /// Convolution along time with channel mixing (a `k×1×1` 3-D
    /// convolution). `x: [Cin, B, T, ...]`, `w: [Cout, Cin, k]`, zero padding
    /// `k/2` so the time length is preserved.
    pub fn time_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "time_conv kernel must be [Cout, Cin, k]");
        assert_eq!(ws[1], xs[0], "time_conv input channels");
        let geom = time_geom(&xs, ws[2]);
        let cout = ws[0];
        let cols = time_im2col(self.value(x).as_slice().expect("contiguous input"), &geom);
        let mut y = as_matrix(self.value(w), cout, geom.rows()).dot(&cols);
        if let Some(b) = b {
            let bv = self.value(b).view().into_shape_with_order((cout, 1)).unwrap();
            y += &bv;
        }
        let mut out_shape = xs;
        out_shape[0] = cout;
        let value = reshape(y.into_dyn(), &out_shape);
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let keep_cols = self.requires_grad(w);
        self.push(value, &deps, move || TimeConvFn {
            x,
            w,
            b,
            geom,
            cols: keep_cols.then_some(cols),
        })
    }

    /// Depthwise convolution along time with a per-sample, per-channel
    /// kernel. `x: [C, B, T, ...]`, `kernel: [C, B, k]`; zero padding `k/2`.
    pub fn adaptive_time_conv(&mut self, x: Var, kernel: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        assert_eq!(ks.len(), 3, "adaptive kernel must be [C, B, k]");
        assert_eq!(&ks[..2], &xs[..2], "adaptive kernel must match [C, B]");
        let geom = time_geom(&xs, ks[2]);
        let seq = geom.t * geom.s;
        let xv = self.value(x).as_slice().expect("contiguous input");
        let kv = self.value(kernel).as_slice().expect("contiguous kernel");
        let mut out = vec![0.0; xv.len()];
        for cb in 0..geom.cin * geom.b {
            let src = &xv[cb * seq..(cb + 1) * seq];
            let dst = &mut out[cb * seq..(cb + 1) * seq];
            for j in 0..geom.k {
                let kj = kv[cb * geom.k + j];
                let (lo, hi, shift) = geom.span(j);
                for t in lo..hi {
                    let it = (t as isize + shift) as usize;
                    for (d, &v) in dst[t * geom.s..(t + 1) * geom.s]
                        .iter_mut()
                        .zip(&src[it * geom.s..(it + 1) * geom.s])
                    {
                        *d += kj * v;
                    }
                }
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&xs), out).unwrap();
        self.push(value, &[x, kernel], move || AdaptiveTimeConvFn { x, kernel, geom })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_graph_gradients;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution.
    fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (cin, n, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        ArrayD::from_shape_fn(IxDyn(&[cout, n, ho, wo]), |idx| {
            let (co, f, oy, ox) = (idx[0], idx[1], idx[2], idx[3]);
            let mut acc = b[[co]];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[co, ci, ky, kx]] * x[[ci, f, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (7, 1, 3)] {
            let x = random(&[2, 3, 7, 6], &mut rng);
            let w = random(&[4, 2, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let expect = conv_reference(&x, &w, &b, stride, pad);
            let diff = (g.value(y) - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "k={k} s={stride} p={pad} diff={diff}");
        }
        for &(hw, k, stride, pad) in &[(1, 3, 2, 1), (2, 7, 1, 3), (1, 7, 1, 3), (3, 3, 2, 1)] {
            let x = random(&[2, 3, hw, hw], &mut rng);
            let w = random(&[2, 2, k, k], &mut rng);
            let b = random(&[2], &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let expect = conv_reference(&x, &w, &b, stride, pad);
            let diff = (g.value(y) - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "hw={hw} k={k} diff={diff}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(k, stride, pad) in &[(3, 2, 1), (1, 1, 0), (1, 2, 0), (5, 1, 2)] {
            let x = random(&[2, 2, 3, 5, 4], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let b = random(&[3], &mut rng);
            let shape = {
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                let y = g.conv2d(xv, wv, None, stride, pad);
                g.shape(y).to_vec()
            };
            let coeffs = random(&shape, &mut rng);
            let report = check_graph_gradients(&[x, w, b], 1e-5, |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                g.dot_const(y, coeffs.clone())
            });
            assert!(report.max_rel_error < 1e-7, "{report:?}");
        }
    }

    #[test]
    fn time_conv_matches_reference_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[3, 2, 5, 2, 2], &mut rng);
        let w = random(&[2, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.time_conv(xv, wv, Some(bv));
        let expect = ArrayD::from_shape_fn(IxDyn(&[2, 2, 5, 2, 2]), |i| {
            let mut acc = b[[i[0]]];
            for ci in 0..3 {
                for j in 0..3 {
                    let t = i[2] as isize + j as isize - 1;
                    if (0..5).contains(&t) {
                        acc += w[[i[0], ci, j]] * x[[ci, i[1], t as usize, i[3], i[4]]];
                    }
                }
            }
            acc
        });
        let diff = (g.value(y) - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);

        let coeffs = random(&[2, 2, 5, 2, 2], &mut rng);
        let report = check_graph_gradients(&[x, w, b], 1e-5, |g, v| {
            let y = g.time_conv(v[0], v[1], Some(v[2]));
            g.dot_const(y, coeffs.clone())
        });
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn adaptive_time_conv_gradients_and_t1() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[2, 2, 4, 3], &mut rng);
        let k = random(&[2, 2, 3], &mut rng);
        let coeffs = random(&[2, 2, 4, 3], &mut rng);
        let report = check_graph_gradients(&[x, k], 1e-5, |g, v| {
            let y = g.adaptive_time_conv(v[0], v[1]);
            g.dot_const(y, coeffs.clone())
        });
        assert!(report.max_rel_error < 1e-7, "{report:?}");

        // T = 1: only the centre tap sees data.
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_elem(IxDyn(&[1, 1, 1, 2]), 2.0));
        let k = g.constant(ndarray::array![[[0.1, 0.5, 0.9]]].into_dyn());
        let y = g.adaptive_time_conv(x, k);
        assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, 1.0]);
    }
}
