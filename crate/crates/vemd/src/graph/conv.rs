//! 2-D convolution, transposed convolution, upsampling and pooling.
//!
//! Both convolution directions are built on a shared im2col/col2im pair, so
//! `conv_transpose2d` is exactly the adjoint of `conv2d` with the same
//! geometry. Samples in a batch are independent and processed in parallel
//! when the `parallel` feature is enabled; results are reduced in sample
//! order, which keeps every run bit-deterministic.

use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Axis, Ix4};

use super::{BackwardOp, Graph, TensorId};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn for_conv(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { c_in, h, w, kh, kw, stride, pad, oh, ow }
    }
}

/// Gather (C*kh*kw, OH*OW) patch columns from one (C, H, W) image.
fn im2col(img: &ndarray::ArrayView3<f64>, geom: &ConvGeom) -> Array2<f64> {
    let ConvGeom { c_in, h, w, kh, kw, stride, pad, oh, ow } = *geom;
    let mut cols = Array2::zeros((c_in * kh * kw, oh * ow));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut out_row = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * ow + ox] = img[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch columns back into a (C, H, W) image; adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, geom: &ConvGeom) -> Array3<f64> {
    let ConvGeom { c_in, h, w, kh, kw, stride, pad, oh, ow } = *geom;
    let mut img = Array3::zeros((c_in, h, w));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let col_row = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[c, iy as usize, ix as usize]] += col_row[oy * ow + ox];
                    }
                }
            }
        }
    }
    img
}

/// Map samples of a batch to per-sample arrays, in parallel when enabled.
fn map_samples<F>(n: usize, f: F) -> Vec<Array3<f64>>
where
    F: Fn(usize) -> Array3<f64> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn stack_samples(parts: Vec<Array3<f64>>) -> ArrayD<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).unwrap().into_dyn()
}

fn conv_forward(x: &ArrayViewD<f64>, w: &ArrayViewD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x = x.view().into_dimensionality::<Ix4>().expect("conv2d: input not 4-d");
    let w = w.view().into_dimensionality::<Ix4>().expect("conv2d: weight not 4-d");
    let (n, ci, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    let geom = ConvGeom::for_conv(ci, h, ww, kh, kw, stride, pad);
    let w_mat = w.to_shape((co, ci * kh * kw)).unwrap().to_owned();
    let outs = map_samples(n, |i| {
        let cols = im2col(&x.index_axis(Axis(0), i), &geom);
        let y = w_mat.dot(&cols);
        y.into_shape_with_order((co, geom.oh, geom.ow)).unwrap()
    });
    stack_samples(outs)
}

/// Gradient of `conv_forward` w.r.t. its input.
fn conv_grad_input(
    gy: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> ArrayD<f64> {
    let gy = gy.view().into_dimensionality::<Ix4>().unwrap();
    let w = w.view().into_dimensionality::<Ix4>().unwrap();
    let (n, co) = (gy.shape()[0], gy.shape()[1]);
    let (wco, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(co, wco);
    let geom = ConvGeom::for_conv(ci, in_hw.0, in_hw.1, kh, kw, stride, pad);
    assert_eq!((geom.oh, geom.ow), (gy.shape()[2], gy.shape()[3]), "conv grad geometry mismatch");
    let w_mat_t = w.to_shape((co, ci * kh * kw)).unwrap().t().to_owned();
    let outs = map_samples(n, |i| {
        let gy_mat = gy
            .index_axis(Axis(0), i)
            .to_shape((co, geom.oh * geom.ow))
            .unwrap()
            .to_owned();
        let gcols = w_mat_t.dot(&gy_mat);
        col2im(&gcols, &geom)
    });
    stack_samples(outs)
}

/// Gradient of `conv_forward` w.r.t. its weight.
fn conv_grad_weight(
    x: &ArrayViewD<f64>,
    gy: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> ArrayD<f64> {
    let x = x.view().into_dimensionality::<Ix4>().unwrap();
    let gy = gy.view().into_dimensionality::<Ix4>().unwrap();
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = gy.shape()[1];
    let (kh, kw) = kernel;
    let geom = ConvGeom::for_conv(ci, h, w, kh, kw, stride, pad);
    let per_sample: Vec<Array2<f64>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let cols = im2col(&x.index_axis(Axis(0), i), &geom);
                    let gy_mat = gy
                        .index_axis(Axis(0), i)
                        .to_shape((co, geom.oh * geom.ow))
                        .unwrap()
                        .to_owned();
                    gy_mat.dot(&cols.t())
                })
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..n)
                .map(|i| {
                    let cols = im2col(&x.index_axis(Axis(0), i), &geom);
                    let gy_mat = gy
                        .index_axis(Axis(0), i)
                        .to_shape((co, geom.oh * geom.ow))
                        .unwrap()
                        .to_owned();
                    gy_mat.dot(&cols.t())
                })
                .collect()
        }
    };
    // Fixed-order reduction keeps the result independent of thread count.
    let mut acc = Array2::zeros((co, ci * kh * kw));
    for gw in per_sample {
        acc += &gw;
    }
    acc.into_shape_with_order((co, ci, kh, kw)).unwrap().into_dyn()
}

struct Conv2dBack {
    stride: usize,
    pad: usize,
}
impl BackwardOp for Conv2dBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [x, w] = g.parents(out) else { unreachable!() };
        let xs = g.shape(*x);
        let ws = g.shape(*w);
        let gx = if g.requires_grad(*x) {
            Some(conv_grad_input(
                &grad.view(),
                &g.val(*w).view(),
                self.stride,
                self.pad,
                (xs[2], xs[3]),
            ))
        } else {
            None
        };
        let gw = Some(conv_grad_weight(
            &g.val(*x).view(),
            &grad.view(),
            self.stride,
            self.pad,
            (ws[2], ws[3]),
        ));
        vec![gx, gw]
    }
}

struct ConvTranspose2dBack {
    stride: usize,
    pad: usize,
}
impl BackwardOp for ConvTranspose2dBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        // Forward was conv_grad_input(x, w); the adjoint swaps the roles back.
        let [x, w] = g.parents(out) else { unreachable!() };
        let ws = g.shape(*w);
        let gx = if g.requires_grad(*x) {
            Some(conv_forward(&grad.view(), &g.val(*w).view(), self.stride, self.pad))
        } else {
            None
        };
        let gw = Some(conv_grad_weight(
            &grad.view(),
            &g.val(*x).view(),
            self.stride,
            self.pad,
            (ws[2], ws[3]),
        ));
        vec![gx, gw]
    }
}

struct UpsampleNearest2xBack;
impl BackwardOp for UpsampleNearest2xBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let xs = g.shape(g.parents(out)[0]);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
        let mut gx = ndarray::Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gx[[i, ch, y, x]] = g4[[i, ch, 2 * y, 2 * x]]
                            + g4[[i, ch, 2 * y, 2 * x + 1]]
                            + g4[[i, ch, 2 * y + 1, 2 * x]]
                            + g4[[i, ch, 2 * y + 1, 2 * x + 1]];
                    }
                }
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

struct GlobalAvgPoolBack {
    in_shape: Vec<usize>,
}
impl BackwardOp for GlobalAvgPoolBack {
    fn backward(&self, _g: &Graph, _out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let (n, c, h, w) = (
            self.in_shape[0],
            self.in_shape[1],
            self.in_shape[2],
            self.in_shape[3],
        );
        let scale = 1.0 / (h * w) as f64;
        let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut gx = ndarray::Array4::zeros((n, c, h, w));
        for i in 0..n {
            for ch in 0..c {
                gx.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .fill(g2[[i, ch]] * scale);
            }
        }
        vec![Some(gx.into_dyn())]
    }
}

impl Graph {
    /// 2-D convolution: x (N,Ci,H,W) * w (Co,Ci,kh,kw) -> (N,Co,OH,OW).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let v = conv_forward(&self.val(x).view(), &self.val(w).view(), stride, pad);
        self.push(v, vec![x, w], Some(Box::new(Conv2dBack { stride, pad })))
    }

    /// Transposed 2-D convolution: x (N,Ci,H,W) * w (Ci,Co,kh,kw) -> (N,Co,OH,OW)
    /// with OH = (H-1)*stride - 2*pad + kh.
    pub fn conv_transpose2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv_transpose2d: input not 4-d");
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight not 4-d");
        assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
        let (kh, kw) = (ws[2], ws[3]);
        let oh = (xs[2] - 1) * stride + kh - 2 * pad;
        let ow = (xs[3] - 1) * stride + kw - 2 * pad;
        let v = conv_grad_input(
            &self.val(x).view(),
            &self.val(w).view(),
            stride,
            pad,
            (oh, ow),
        );
        self.push(v, vec![x, w], Some(Box::new(ConvTranspose2dBack { stride, pad })))
    }

    /// Nearest-neighbour 2x spatial upsampling of an (N,C,H,W) tensor.
    pub fn upsample_nearest2x(&mut self, x: TensorId) -> TensorId {
        let x4 = self.val(x).view().into_dimensionality::<Ix4>().expect("upsample: not 4-d");
        let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut v = ndarray::Array4::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let s = x4[[i, ch, y, xx]];
                        v[[i, ch, 2 * y, 2 * xx]] = s;
                        v[[i, ch, 2 * y, 2 * xx + 1]] = s;
                        v[[i, ch, 2 * y + 1, 2 * xx]] = s;
                        v[[i, ch, 2 * y + 1, 2 * xx + 1]] = s;
                    }
                }
            }
        }
        self.push(v.into_dyn(), vec![x], Some(Box::new(UpsampleNearest2xBack)))
    }

    /// Spatial mean over (H,W): (N,C,H,W) -> (N,C).
    pub fn global_avg_pool(&mut self, x: TensorId) -> TensorId {
        let in_shape = self.shape(x).to_vec();
        let x4 = self.val(x).view().into_dimensionality::<Ix4>().expect("gap: not 4-d");
        let (n, c) = (x4.shape()[0], x4.shape()[1]);
        let scale = 1.0 / (x4.shape()[2] * x4.shape()[3]) as f64;
        let mut v = ndarray::Array2::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                v[[i, ch]] = x4.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() * scale;
            }
        }
        self.push(
            v.into_dyn(),
            vec![x],
            Some(Box::new(GlobalAvgPoolBack { in_shape })),
        )
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

#[allow(dead_code)]
fn debug_shape(v: &ArrayD<f64>) -> Vec<usize> {
    v.shape().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let geom = ConvGeom::for_conv(2, 5, 6, 3, 3, 2, 1);
        let x = Array3::from_shape_fn((2, 5, 6), |_| rng.random::<f64>() - 0.5);
        let c = Array2::from_shape_fn((2 * 9, geom.oh * geom.ow), |_| rng.random::<f64>() - 0.5);
        let lhs: f64 = (im2col(&x.view(), &geom) * &c).sum();
        let rhs: f64 = (&x * &col2im(&c, &geom)).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch: {lhs} vs {rhs}");
    }
}
