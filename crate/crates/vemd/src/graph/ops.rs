//! Elementwise, structural and linear-algebra operations.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

use super::{reshape_owned, BackwardOp, Graph, TensorId};

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

struct AddBack;
impl BackwardOp for AddBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct SubBack;
impl BackwardOp for SubBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(grad.clone()), Some(-grad)]
    }
}

struct MulBack;
impl BackwardOp for MulBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [a, b] = g.parents(out) else { unreachable!() };
        vec![Some(grad * g.val(*b)), Some(grad * g.val(*a))]
    }
}

struct ScaleBack(f64);
impl BackwardOp for ScaleBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(grad * self.0)]
    }
}

struct ExpBack;
impl BackwardOp for ExpBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(grad * g.val(out))]
    }
}

struct ReluBack;
impl BackwardOp for ReluBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let x = g.val(g.parents(out)[0]);
        let mut gx = grad.clone();
        gx.zip_mut_with(x, |gv, &xv| {
            if xv <= 0.0 {
                *gv = 0.0;
            }
        });
        vec![Some(gx)]
    }
}

struct EluBack {
    alpha: f64,
}
impl BackwardOp for EluBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        // For x <= 0: y = alpha*(e^x - 1), dy/dx = alpha*e^x = y + alpha.
        let x = g.val(g.parents(out)[0]);
        let y = g.val(out);
        let mut gx = grad.clone();
        ndarray::Zip::from(&mut gx).and(x).and(y).for_each(|gv, &xv, &yv| {
            if xv <= 0.0 {
                *gv *= yv + self.alpha;
            }
        });
        vec![Some(gx)]
    }
}

struct SigmoidBack;
impl BackwardOp for SigmoidBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let y = g.val(out);
        let mut gx = grad.clone();
        gx.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
        vec![Some(gx)]
    }
}

impl Graph {
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.val(a) + self.val(b);
        self.push(v, vec![a, b], Some(Box::new(AddBack)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.val(a) - self.val(b);
        self.push(v, vec![a, b], Some(Box::new(SubBack)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.val(a) * self.val(b);
        self.push(v, vec![a, b], Some(Box::new(MulBack)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.val(a) * c;
        self.push(v, vec![a], Some(Box::new(ScaleBack(c))))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = self.val(a).mapv(f64::exp);
        self.push(v, vec![a], Some(Box::new(ExpBack)))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.val(a).mapv(|x| x.max(0.0));
        self.push(v, vec![a], Some(Box::new(ReluBack)))
    }

    pub fn elu(&mut self, a: TensorId, alpha: f64) -> TensorId {
        let v = self
            .val(a)
            .mapv(|x| if x > 0.0 { x } else { alpha * (x.exp() - 1.0) });
        self.push(v, vec![a], Some(Box::new(EluBack { alpha })))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.val(a).mapv(stable_sigmoid);
        self.push(v, vec![a], Some(Box::new(SigmoidBack)))
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// structural
// ---------------------------------------------------------------------------

struct ReshapeBack {
    in_shape: Vec<usize>,
}
impl BackwardOp for ReshapeBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(reshape_owned(grad.clone(), &self.in_shape))]
    }
}

struct ConcatBack {
    axis: usize,
    sizes: Vec<usize>,
}
impl BackwardOp for ConcatBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0isize;
        for &len in &self.sizes {
            let piece = grad
                .slice_axis(Axis(self.axis), Slice::new(start, Some(start + len as isize), 1))
                .to_owned();
            out.push(Some(piece));
            start += len as isize;
        }
        out
    }
}

struct SliceBack {
    axis: usize,
    start: usize,
    in_shape: Vec<usize>,
}
impl BackwardOp for SliceBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::zeros(IxDyn(&self.in_shape));
        let len = grad.shape()[self.axis] as isize;
        gx.slice_axis_mut(
            Axis(self.axis),
            Slice::new(self.start as isize, Some(self.start as isize + len), 1),
        )
        .assign(grad);
        vec![Some(gx)]
    }
}

struct IndexRowsBack {
    indices: Vec<usize>,
    in_shape: Vec<usize>,
}
impl BackwardOp for IndexRowsBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::zeros(IxDyn(&self.in_shape));
        for (row, &src) in self.indices.iter().enumerate() {
            let mut dst = gx.index_axis_mut(Axis(0), src);
            dst += &grad.index_axis(Axis(0), row);
        }
        vec![Some(gx)]
    }
}

struct SumAllBack {
    in_shape: Vec<usize>,
}
impl BackwardOp for SumAllBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap();
        vec![Some(ArrayD::from_elem(IxDyn(&self.in_shape), s))]
    }
}

struct MeanAllBack {
    in_shape: Vec<usize>,
    n: f64,
}
impl BackwardOp for MeanAllBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap() / self.n;
        vec![Some(ArrayD::from_elem(IxDyn(&self.in_shape), s))]
    }
}

struct MaxAxis0Back {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}
impl BackwardOp for MaxAxis0Back {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let mut gx = ArrayD::zeros(IxDyn(&self.in_shape));
        let inner: usize = self.in_shape[1..].iter().product();
        {
            let gx_flat = gx.as_slice_mut().unwrap();
            for (pos, (&arg, &gv)) in self.argmax.iter().zip(grad.iter()).enumerate() {
                gx_flat[arg * inner + pos] += gv;
            }
        }
        vec![Some(gx)]
    }
}

impl Graph {
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        let v = reshape_owned(self.val(a).clone(), shape);
        self.push(
            v,
            vec![a],
            Some(Box::new(ReshapeBack { in_shape })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.val(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let sizes = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(v, parts.to_vec(), Some(Box::new(ConcatBack { axis, sizes })))
    }

    pub fn slice_axis(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        let v = self
            .val(a)
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        self.push(v, vec![a], Some(Box::new(SliceBack { axis, start, in_shape })))
    }

    /// Gather rows (axis 0). Repeated indices accumulate in the backward pass.
    pub fn index_rows(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        let views: Vec<_> = indices
            .iter()
            .map(|&i| self.val(a).index_axis(Axis(0), i))
            .collect();
        let v = ndarray::stack(Axis(0), &views).expect("index_rows: stack failed");
        self.push(
            v,
            vec![a],
            Some(Box::new(IndexRowsBack {
                indices: indices.to_vec(),
                in_shape,
            })),
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        let v = ndarray::arr0(self.val(a).sum()).into_dyn();
        self.push(v, vec![a], Some(Box::new(SumAllBack { in_shape })))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        let n = self.val(a).len() as f64;
        let v = ndarray::arr0(self.val(a).sum() / n).into_dyn();
        self.push(v, vec![a], Some(Box::new(MeanAllBack { in_shape, n })))
    }

    /// Max over axis 0: (C, ...) -> (...). Ties resolve to the lowest index.
    pub fn max_axis0(&mut self, a: TensorId) -> TensorId {
        let in_shape = self.shape(a).to_vec();
        assert!(in_shape.len() >= 2, "max_axis0 expects at least 2 dims");
        let c = in_shape[0];
        assert!(c >= 1);
        let inner: usize = in_shape[1..].iter().product();
        let flat = self.val(a).as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let mut vals = vec![f64::NEG_INFINITY; inner];
        let mut args = vec![0usize; inner];
        for ch in 0..c {
            for pos in 0..inner {
                let v = flat[ch * inner + pos];
                if v > vals[pos] {
                    vals[pos] = v;
                    args[pos] = ch;
                }
            }
        }
        let v = reshape_owned(ArrayD::from_shape_vec(IxDyn(&[inner]), vals).unwrap(), &in_shape[1..]);
        self.push(
            v,
            vec![a],
            Some(Box::new(MaxAxis0Back {
                argmax: args,
                in_shape,
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

struct MatmulBack;
impl BackwardOp for MatmulBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [a, b] = g.parents(out) else { unreachable!() };
        let av = g.val(*a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = g.val(*b).view().into_dimensionality::<Ix2>().unwrap();
        let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
        let ga = gv.dot(&bv.t()).into_dyn();
        let gb = av.t().dot(&gv).into_dyn();
        vec![Some(ga), Some(gb)]
    }
}

struct BmmBack;
impl BackwardOp for BmmBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [a, b] = g.parents(out) else { unreachable!() };
        let av = g.val(*a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = g.val(*b).view().into_dimensionality::<Ix3>().unwrap();
        let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
        let batch = av.shape()[0];
        let mut ga = ndarray::Array3::zeros((batch, av.shape()[1], av.shape()[2]));
        let mut gb = ndarray::Array3::zeros((batch, bv.shape()[1], bv.shape()[2]));
        for i in 0..batch {
            let gi = gv.index_axis(Axis(0), i);
            ga.index_axis_mut(Axis(0), i)
                .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
            gb.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
        }
        vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
    }
}

struct AddBiasRowBack {
    rows: usize,
}
impl BackwardOp for AddBiasRowBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let d = grad.shape()[grad.ndim() - 1];
        let g2 = grad.view().into_shape_with_order((self.rows, d)).unwrap();
        let gb = g2.sum_axis(Axis(0)).into_dyn();
        vec![Some(grad.clone()), Some(gb)]
    }
}

struct AddBiasChannelBack;
impl BackwardOp for AddBiasChannelBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        // x: (N, C, H, W), bias: (C,)
        let c = g.shape(g.parents(out)[1])[0];
        let mut gb = ndarray::Array1::zeros(c);
        let g4 = grad.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ch in 0..c {
            gb[ch] = g4.index_axis(Axis(1), ch).sum();
        }
        vec![Some(grad.clone()), Some(gb.into_dyn())]
    }
}

impl Graph {
    /// 2-D matrix product (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.val(a).view().into_dimensionality::<Ix2>().expect("matmul: a not 2-d");
        let bv = self.val(b).view().into_dimensionality::<Ix2>().expect("matmul: b not 2-d");
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul: inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(v, vec![a, b], Some(Box::new(MatmulBack)))
    }

    /// Batched matrix product (B,m,k) x (B,k,n) -> (B,m,n).
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.val(a).view().into_dimensionality::<Ix3>().expect("bmm: a not 3-d");
        let bv = self.val(b).view().into_dimensionality::<Ix3>().expect("bmm: b not 3-d");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm: batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm: inner dim mismatch");
        let batch = av.shape()[0];
        let mut v = ndarray::Array3::zeros((batch, av.shape()[1], bv.shape()[2]));
        for i in 0..batch {
            v.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        self.push(v.into_dyn(), vec![a, b], Some(Box::new(BmmBack)))
    }

    /// Add a (D,) bias to the last axis of an (..., D) tensor.
    pub fn add_bias_row(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let d = *self.shape(a).last().unwrap();
        assert_eq!(self.shape(bias), [d], "add_bias_row: bias dim mismatch");
        let rows = self.val(a).len() / d;
        let bv = self.val(bias).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut v = self.val(a).clone();
        let mut v2 = v.view_mut().into_shape_with_order((rows, d)).unwrap();
        v2 += &bv.view().insert_axis(Axis(0));
        self.push(v, vec![a, bias], Some(Box::new(AddBiasRowBack { rows })))
    }

    /// Add a (C,) bias to the channel axis of an (N, C, H, W) tensor.
    pub fn add_bias_channel(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let c = self.shape(a)[1];
        assert_eq!(self.shape(bias), [c], "add_bias_channel: bias dim mismatch");
        let mut v = self.val(a).clone();
        {
            let mut v4 = v.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            let bv = self.val(bias).view().into_dimensionality::<Ix1>().unwrap();
            for ch in 0..c {
                v4.index_axis_mut(Axis(1), ch).mapv_inplace(|x| x + bv[ch]);
            }
        }
        self.push(v, vec![a, bias], Some(Box::new(AddBiasChannelBack)))
    }
}

// ---------------------------------------------------------------------------
// softmax / losses
// ---------------------------------------------------------------------------

struct SoftmaxBack;
impl BackwardOp for SoftmaxBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let y = g.val(out);
        let d = y.shape()[y.ndim() - 1];
        let rows = y.len() / d;
        let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
        let g2 = grad.view().into_shape_with_order((rows, d)).unwrap();
        let mut gx = ndarray::Array2::zeros((rows, d));
        for r in 0..rows {
            let yr = y2.row(r);
            let gr = g2.row(r);
            let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..d {
                gx[[r, j]] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(reshape_owned(gx.into_dyn(), y.shape()))]
    }
}

struct CrossEntropyBack {
    targets: Vec<usize>,
    probs: Arc<ArrayD<f64>>,
}
impl BackwardOp for CrossEntropyBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap();
        let n = self.targets.len() as f64;
        let mut gx = self.probs.as_ref().clone();
        let d = gx.shape()[1];
        {
            let flat = gx.as_slice_mut().unwrap();
            for (r, &t) in self.targets.iter().enumerate() {
                flat[r * d + t] -= 1.0;
            }
        }
        gx.mapv_inplace(|v| v * s / n);
        vec![Some(gx)]
    }
}

struct MseBack {
    target: ArrayD<f64>,
}
impl BackwardOp for MseBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap();
        let pred = g.val(g.parents(out)[0]);
        let n = pred.len() as f64;
        let gx = (pred - &self.target) * (2.0 * s / n);
        vec![Some(gx)]
    }
}

struct SmoothL1Back {
    target: ArrayD<f64>,
    mask: Option<Vec<bool>>,
    denom: f64,
}
impl BackwardOp for SmoothL1Back {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap();
        let pred = g.val(g.parents(out)[0]);
        let mut gx = pred - &self.target;
        for (i, v) in gx.iter_mut().enumerate() {
            let masked = self.mask.as_ref().map(|m| !m[i]).unwrap_or(false);
            if masked {
                *v = 0.0;
            } else {
                *v = if v.abs() < 1.0 { *v } else { v.signum() };
            }
            *v *= s / self.denom;
        }
        vec![Some(gx)]
    }
}

struct BceBack {
    target: ArrayD<f64>,
    eps: f64,
}
impl BackwardOp for BceBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let s = grad.iter().copied().next().unwrap();
        let pred = g.val(g.parents(out)[0]);
        let n = pred.len() as f64;
        let mut gx = pred.clone();
        ndarray::Zip::from(&mut gx).and(&self.target).for_each(|p, &t| {
            // Gradient vanishes where the clamp is active.
            if *p < self.eps || *p > 1.0 - self.eps {
                *p = 0.0;
            } else {
                *p = (-t / *p + (1.0 - t) / (1.0 - *p)) * s / n;
            }
        });
        vec![Some(gx)]
    }
}

struct Pdist2Back;
impl BackwardOp for Pdist2Back {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [xa, ya] = g.parents(out) else { unreachable!() };
        let x = g.val(*xa).view().into_dimensionality::<Ix2>().unwrap();
        let y = g.val(*ya).view().into_dimensionality::<Ix2>().unwrap();
        let gm = grad.view().into_dimensionality::<Ix2>().unwrap();
        // d||x_i - y_j||^2 / dx_i = 2 (x_i - y_j)
        let row_sum = gm.sum_axis(Axis(1));
        let col_sum = gm.sum_axis(Axis(0));
        let gx = 2.0 * (&x * &row_sum.view().insert_axis(Axis(1)) - gm.dot(&y));
        let gy = 2.0 * (&y * &col_sum.view().insert_axis(Axis(1)) - gm.t().dot(&x));
        vec![Some(gx.into_dyn()), Some(gy.into_dyn())]
    }
}

impl Graph {
    /// Softmax over the last axis, numerically stable.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> TensorId {
        let x = self.val(a);
        let d = x.shape()[x.ndim() - 1];
        let rows = x.len() / d;
        let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
        let mut v = ndarray::Array2::zeros((rows, d));
        for r in 0..rows {
            let row = x2.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                v[[r, j]] = e;
                sum += e;
            }
            v.row_mut(r).mapv_inplace(|e| e / sum);
        }
        let v = reshape_owned(v.into_dyn(), x.shape());
        self.push(v, vec![a], Some(Box::new(SoftmaxBack)))
    }

    /// Mean cross-entropy of (N, C) logits against class indices.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let x = self.val(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(n, targets.len(), "cross_entropy: target count mismatch");
        assert!(targets.iter().all(|&t| t < c), "cross_entropy: target out of range");
        let mut probs = ndarray::Array2::zeros((n, c));
        let mut loss = 0.0;
        for r in 0..n {
            let row = x.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let logsum = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[[r, j]] = (row[j] - logsum).exp();
            }
            loss -= x[[r, targets[r]]] - logsum;
        }
        loss /= n as f64;
        let probs = Arc::new(probs.into_dyn());
        self.push(
            ndarray::arr0(loss).into_dyn(),
            vec![logits],
            Some(Box::new(CrossEntropyBack {
                targets: targets.to_vec(),
                probs,
            })),
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: TensorId, target: &ArrayD<f64>) -> TensorId {
        assert_eq!(self.shape(pred), target.shape(), "mse: shape mismatch");
        let diff = self.val(pred) - target;
        let v = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        self.push(
            ndarray::arr0(v).into_dyn(),
            vec![pred],
            Some(Box::new(MseBack {
                target: target.clone(),
            })),
        )
    }

    /// Smooth-L1 against a constant target, averaged over unmasked elements.
    /// `mask` (flattened, `true` = contributes) defaults to all-true.
    pub fn smooth_l1_loss(
        &mut self,
        pred: TensorId,
        target: &ArrayD<f64>,
        mask: Option<&[bool]>,
    ) -> TensorId {
        assert_eq!(self.shape(pred), target.shape(), "smooth_l1: shape mismatch");
        if let Some(m) = mask {
            assert_eq!(m.len(), target.len(), "smooth_l1: mask length mismatch");
        }
        let n_valid = mask
            .map(|m| m.iter().filter(|&&b| b).count())
            .unwrap_or(target.len());
        if n_valid == 0 {
            return self.scalar_const(0.0);
        }
        let denom = n_valid as f64;
        let mut total = 0.0;
        for (i, (p, t)) in self.val(pred).iter().zip(target.iter()).enumerate() {
            if mask.map(|m| m[i]).unwrap_or(true) {
                let d = (p - t).abs();
                total += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        self.push(
            ndarray::arr0(total / denom).into_dyn(),
            vec![pred],
            Some(Box::new(SmoothL1Back {
                target: target.clone(),
                mask: mask.map(|m| m.to_vec()),
                denom,
            })),
        )
    }

    /// Mean binary cross-entropy against a constant target, with predictions
    /// clamped to `[eps, 1-eps]`.
    pub fn bce_loss(&mut self, pred: TensorId, target: &ArrayD<f64>, eps: f64) -> TensorId {
        assert_eq!(self.shape(pred), target.shape(), "bce: shape mismatch");
        let mut total = 0.0;
        for (p, t) in self.val(pred).iter().zip(target.iter()) {
            let p = p.clamp(eps, 1.0 - eps);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let v = total / target.len() as f64;
        self.push(
            ndarray::arr0(v).into_dyn(),
            vec![pred],
            Some(Box::new(BceBack {
                target: target.clone(),
                eps,
            })),
        )
    }

    /// Pairwise squared Euclidean distances between rows: (n,d) x (m,d) -> (n,m).
    pub fn pdist2(&mut self, x: TensorId, y: TensorId) -> TensorId {
        let xv = self.val(x).view().into_dimensionality::<Ix2>().expect("pdist2: x not 2-d");
        let yv = self.val(y).view().into_dimensionality::<Ix2>().expect("pdist2: y not 2-d");
        assert_eq!(xv.shape()[1], yv.shape()[1], "pdist2: feature dim mismatch");
        let (n, m) = (xv.shape()[0], yv.shape()[0]);
        let mut v = ndarray::Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..xv.shape()[1] {
                    let d = xv[[i, k]] - yv[[j, k]];
                    s += d * d;
                }
                v[[i, j]] = s.max(0.0);
            }
        }
        self.push(v.into_dyn(), vec![x, y], Some(Box::new(Pdist2Back)))
    }
}
