use ndarray::{Axis, Ix2, IxDyn, Slice, Zip};

use super::{sum_to_shape, Function, GradSink, Graph, Tensor, Var};

pub(crate) fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

pub(crate) fn reshape(t: Tensor, shape: &[usize]) -> Tensor {
    standard(t)
        .into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

pub(crate) fn as_matrix(t: &Tensor, rows: usize, cols: usize) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("tensor must be contiguous for a matrix view")
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct AddFn {
    a: Var,
    b: Var,
}

impl Function for AddFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        if sink.wants(self.a) {
            sink.add(self.a, sum_to_shape(grad.clone(), graph.shape(self.a)));
        }
        if sink.wants(self.b) {
            sink.add(self.b, sum_to_shape(grad.clone(), graph.shape(self.b)));
        }
    }
}

struct SubFn {
    a: Var,
    b: Var,
}

impl Function for SubFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        if sink.wants(self.a) {
            sink.add(self.a, sum_to_shape(grad.clone(), graph.shape(self.a)));
        }
        if sink.wants(self.b) {
            sink.add(self.b, sum_to_shape(-grad, graph.shape(self.b)));
        }
    }
}

struct MulFn {
    a: Var,
    b: Var,
}

impl Function for MulFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        if sink.wants(self.a) {
            let g = grad * graph.value(self.b);
            sink.add(self.a, sum_to_shape(g, graph.shape(self.a)));
        }
        if sink.wants(self.b) {
            let g = grad * graph.value(self.a);
            sink.add(self.b, sum_to_shape(g, graph.shape(self.b)));
        }
    }
}

struct ScaleFn {
    a: Var,
    s: f64,
}

impl Function for ScaleFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        sink.add(self.a, grad * self.s);
    }
}

struct IdentityFn {
    a: Var,
}

impl Function for IdentityFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        sink.add(self.a, grad.clone());
    }
}

struct ReluFn {
    a: Var,
}

impl Function for ReluFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let mut g = grad.clone();
        Zip::from(&mut g).and(graph.value(self.a)).for_each(|g, &x| {
            if x <= 0.0 {
                *g = 0.0;
            }
        });
        sink.add(self.a, g);
    }
}

/// Backward of sigmoid/tanh uses the cached output.
struct SigmoidFn {
    a: Var,
    out: Tensor,
}

impl Function for SigmoidFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let mut g = grad.clone();
        Zip::from(&mut g).and(&self.out).for_each(|g, &s| *g *= s * (1.0 - s));
        sink.add(self.a, g);
    }
}

struct TanhFn {
    a: Var,
    out: Tensor,
}

impl Function for TanhFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let mut g = grad.clone();
        Zip::from(&mut g).and(&self.out).for_each(|g, &t| *g *= 1.0 - t * t);
        sink.add(self.a, g);
    }
}

struct ReshapeFn {
    a: Var,
}

impl Function for ReshapeFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let shape = graph.shape(self.a).to_vec();
        let g = standard(grad.clone())
            .into_shape_with_order(IxDyn(&shape))
            .expect("reshape backward");
        sink.add(self.a, g);
    }
}

struct PermuteFn {
    a: Var,
    inverse: Vec<usize>,
}

impl Function for PermuteFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let g = standard(grad.clone().permuted_axes(IxDyn(&self.inverse)));
        sink.add(self.a, g);
    }
}

struct SliceFn {
    a: Var,
    axis: usize,
    start: usize,
    len: usize,
}

impl Function for SliceFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let (axis, start, end) = (self.axis, self.start, self.start + self.len);
        sink.add_with(self.a, |acc| {
            let mut part = acc.slice_axis_mut(Axis(axis), Slice::from(start..end));
            part += grad;
        });
    }
}

struct ConcatFn {
    inputs: Vec<Var>,
    axis: usize,
    offsets: Vec<usize>,
}

impl Function for ConcatFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        for (&v, &start) in self.inputs.iter().zip(&self.offsets) {
            if !sink.wants(v) {
                continue;
            }
            let len = graph.shape(v)[self.axis];
            let part = grad
                .slice_axis(Axis(self.axis), Slice::from(start..start + len))
                .to_owned();
            sink.add(v, standard(part));
        }
    }
}

struct SumFn {
    a: Var,
}

impl Function for SumFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let g = grad.iter().next().copied().unwrap_or(0.0);
        sink.add(self.a, Tensor::from_elem(IxDyn(graph.shape(self.a)), g));
    }
}

struct DotConstFn {
    a: Var,
    coeffs: Tensor,
}

impl Function for DotConstFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let g = grad.iter().next().copied().unwrap_or(0.0);
        sink.add(self.a, &self.coeffs * g);
    }
}

struct MeanAxesFn {
    a: Var,
    keep_shape: Vec<usize>,
    count: f64,
}

impl Function for MeanAxesFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let g = standard(grad.clone())
            .into_shape_with_order(IxDyn(&self.keep_shape))
            .expect("mean backward reshape");
        let shape = graph.shape(self.a).to_vec();
        let full = g.broadcast(IxDyn(&shape)).expect("mean backward broadcast").to_owned();
        sink.add(self.a, full / self.count);
    }
}

struct MaxAxisFn {
    a: Var,
    axis: usize,
    argmax: ndarray::ArrayD<usize>,
}

impl Function for MaxAxisFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        let axis = Axis(self.axis);
        sink.add_with(self.a, |acc| {
            Zip::from(acc.lanes_mut(axis))
                .and(grad.lanes(axis))
                .and(self.argmax.lanes(axis))
                .for_each(|mut dst, g, idx| dst[idx[0]] += g[0]);
        });
    }
}

struct LinearFn {
    x: Var,
    w: Var,
    b: Option<Var>,
}

impl Function for LinearFn {
    fn backward(&self, grad: &Tensor, graph: &Graph, sink: &mut GradSink<'_>) {
        let w = graph.value(self.w);
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let w = as_matrix(w, out_dim, in_dim);
        let rows = grad.len() / out_dim;
        let g = as_matrix(grad, rows, out_dim);
        if sink.wants(self.x) {
            let dx = g.dot(&w).into_dyn();
            let shape = graph.shape(self.x).to_vec();
            sink.add(self.x, reshape(dx, &shape));
        }
        if sink.wants(self.w) {
            let x = as_matrix(graph.value(self.x), rows, in_dim);
            sink.add(self.w, g.t().dot(&x).into_dyn());
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                sink.add(b, g.sum_axis(Axis(0)).into_dyn());
            }
        }
    }
}

struct SelectRowsFn {
    a: Var,
    rows: Vec<usize>,
}

impl Function for SelectRowsFn {
    fn backward(&self, grad: &Tensor, _graph: &Graph, sink: &mut GradSink<'_>) {
        sink.add_with(self.a, |acc| {
            for (i, &r) in self.rows.iter().enumerate() {
                let mut dst = acc.index_axis_mut(Axis(0), r);
                dst += &grad.index_axis(Axis(0), i);
            }
        });
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = standard(self.value(a) + self.value(b));
        self.push(value, &[a, b], || AddFn { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = standard(self.value(a) - self.value(b));
        self.push(value, &[a, b], || SubFn { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = standard(self.value(a) * self.value(b));
        self.push(value, &[a, b], || MulFn { a, b })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.push(value, &[a], || IdentityFn { a })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, &[a], || ScaleFn { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, &[a], || ReluFn { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        let out = value.clone();
        self.push(value, &[a], move || SigmoidFn { a, out })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let out = value.clone();
        self.push(value, &[a], move || TanhFn { a, out })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = standard(self.value(a).clone())
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {shape:?}: {e}", self.shape(a)));
        self.push(value, &[a], || ReshapeFn { a })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = standard(self.value(a).clone().permuted_axes(IxDyn(axes)));
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(value, &[a], move || PermuteFn { a, inverse })
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = standard(
            self.value(a)
                .slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned(),
        );
        self.push(value, &[a], || SliceFn { a, axis, start, len })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = inputs.iter().map(|&v| self.value(v).view()).collect();
        let value = standard(ndarray::concatenate(Axis(axis), &views).expect("concat shapes"));
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut at = 0;
        for &v in inputs {
            offsets.push(at);
            at += self.shape(v)[axis];
        }
        let inputs = inputs.to_vec();
        let deps = inputs.clone();
        self.push(value, &deps, move || ConcatFn { inputs, axis, offsets })
    }

    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(value, &[a], || SumFn { a })
    }

    /// `sum(a * coeffs)` with constant coefficients.
    pub fn dot_const(&mut self, a: Var, coeffs: Tensor) -> Var {
        assert_eq!(coeffs.shape(), self.shape(a), "dot_const shape mismatch");
        let s = Zip::from(self.value(a))
            .and(&coeffs)
            .fold(0.0, |acc, &x, &c| acc + x * c);
        let value = Tensor::from_elem(IxDyn(&[]), s);
        self.push(value, &[a], move || DotConstFn { a, coeffs })
    }

    /// Mean over `axes`. With `keepdim` the reduced axes remain with length 1.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Var {
        let shape = self.shape(a).to_vec();
        let mut keep_shape = shape.clone();
        let mut count = 1usize;
        for &ax in axes {
            count *= shape[ax];
            keep_shape[ax] = 1;
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        let mut value = self.value(a).clone();
        for &ax in &sorted {
            value = value.sum_axis(Axis(ax));
        }
        let value = standard(value) / count as f64;
        let value = if keepdim {
            value.into_shape_with_order(IxDyn(&keep_shape)).unwrap()
        } else {
            value
        };
        let count = count as f64;
        self.push(value, &[a], move || MeanAxesFn { a, keep_shape, count })
    }

    /// Maximum along `axis`, kept as a length-1 axis. Ties resolve to the
    /// first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let mut value = Tensor::zeros(IxDyn(&shape));
        let mut argmax = ndarray::ArrayD::<usize>::zeros(IxDyn(&shape));
        Zip::from(value.lanes_mut(Axis(axis)))
            .and(argmax.lanes_mut(Axis(axis)))
            .and(x.lanes(Axis(axis)))
            .for_each(|mut v, mut idx, lane| {
                let mut best = 0;
                for (i, &x) in lane.iter().enumerate() {
                    if x > lane[best] {
                        best = i;
                    }
                }
                v[0] = lane[best];
                idx[0] = best;
            });
        self.push(value, &[a], move || MaxAxisFn { a, axis, argmax })
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        let xs = self.shape(x).to_vec();
        assert_eq!(
            *xs.last().expect("linear input must have an axis"),
            in_dim,
            "linear input width"
        );
        let rows = xs.iter().product::<usize>() / in_dim;
        let x2 = as_matrix(self.value(x), rows, in_dim);
        let mut y = x2.dot(&as_matrix(wv, out_dim, in_dim).t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &bv;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_dim;
        let value = reshape(y.into_dyn(), &out_shape);
        let deps: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, &deps, || LinearFn { x, w, b })
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let value = x.select(Axis(0), rows).into_dyn();
        let rows = rows.to_vec();
        self.push(value, &[a], move || SelectRowsFn { a, rows })
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

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[1, 3, 1], &mut rng);
        let w = random(&[5, 4], &mut rng);
        let bias = random(&[5], &mut rng);
        let coeffs = random(&[2, 6, 5], &mut rng);
        let report = check_graph_gradients(&[a, b, w, bias], 1e-5, |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sigmoid(m);
            let t = g.tanh(v[0]);
            let d = g.sub(s, t);
            let c = g.concat(&[d, m], 1);
            let l = g.linear(c, v[2], Some(v[3]));
            let r = g.relu(l);
            let p = g.permute(r, &[1, 0, 2]);
            let p = g.permute(p, &[1, 0, 2]);
            let sl = g.slice_axis(p, 1, 1, 4);
            let q = g.add_scalar(sl, 0.5);
            let q = g.scale(q, 2.0);
            let pad = g.slice_axis(p, 1, 0, 2);
            let full = g.concat(&[q, pad], 1);
            g.dot_const(full, coeffs.clone())
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[3, 2, 4, 5], &mut rng);
        let coeffs = random(&[1, 2, 4, 5], &mut rng);
        let coeffs2 = random(&[3, 2], &mut rng);
        let report = check_graph_gradients(&[a], 1e-5, |g, v| {
            let m = g.max_axis(v[0], 0);
            let mean = g.mean_axes(v[0], &[2, 3], false);
            let x = g.dot_const(m, coeffs.clone());
            let y = g.dot_const(mean, coeffs2.clone());
            let s = g.add(x, y);
            let m2 = g.mean_axes(v[0], &[0], true);
            let r = g.reshape(m2, &[8, 5]);
            let rows = g.select_rows(r, &[0, 3, 3, 7]);
            let rs = g.sum(rows);
            g.add(s, rs)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn max_axis_breaks_ties_to_first() {
        let mut g = Graph::new();
        let a = g.leaf(ndarray::array![[1.0, 5.0], [1.0, 2.0]].into_dyn());
        let m = g.max_axis(a, 0);
        assert_eq!(g.value(m), &ndarray::array![[1.0, 5.0]].into_dyn());
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(
            grads.get(a).unwrap(),
            &ndarray::array![[1.0, 1.0], [0.0, 0.0]].into_dyn()
        );
    }
}
