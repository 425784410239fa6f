//! Batch norm, layer norm and fused scaled-dot-product attention.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4};

use super::{reshape_owned, BackwardOp, Graph, ParamId, TensorId};

/// Running-statistics buffers for a batch-norm layer, read from the parameter
/// store by the caller. Updates are recorded on the graph and applied later.
pub struct BnBuffers {
    pub mean_pid: ParamId,
    pub var_pid: ParamId,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

fn channel_stats(x: &ndarray::ArrayView4<f64>) -> (Array1<f64>, Array1<f64>) {
    let c = x.shape()[1];
    let m = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let lane = x.index_axis(Axis(1), ch);
        let mu = lane.sum() / m;
        mean[ch] = mu;
        var[ch] = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    }
    (mean, var)
}

struct BatchNormBack {
    mean: Array1<f64>,
    var: Array1<f64>,
    eps: f64,
    /// Batch statistics were used (training mode); otherwise the stats are
    /// constants and the backward pass is a plain affine map.
    batch_stats: bool,
}

impl BackwardOp for BatchNormBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [x, gamma, _beta] = g.parents(out) else { unreachable!() };
        let xv = g.val(*x).view().into_dimensionality::<Ix4>().unwrap();
        let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
        let gammav = g.val(*gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let m = (n * h * w) as f64;

        let mut gx = ndarray::Array4::zeros((n, c, h, w));
        let mut ggamma = Array1::zeros(c);
        let mut gbeta = Array1::zeros(c);
        for ch in 0..c {
            let inv_std = 1.0 / (self.var[ch] + self.eps).sqrt();
            let mu = self.mean[ch];
            let x_lane = xv.index_axis(Axis(1), ch);
            let g_lane = gv.index_axis(Axis(1), ch);
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for (&xi, &gi) in x_lane.iter().zip(g_lane.iter()) {
                sum_g += gi;
                sum_gx += gi * (xi - mu) * inv_std;
            }
            ggamma[ch] = sum_gx;
            gbeta[ch] = sum_g;
            let mut gx_lane = gx.index_axis_mut(Axis(1), ch);
            if self.batch_stats {
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                for ((gxi, &xi), &gi) in gx_lane.iter_mut().zip(x_lane.iter()).zip(g_lane.iter()) {
                    let xhat = (xi - mu) * inv_std;
                    *gxi = gammav[ch] * inv_std * (gi - mean_g - xhat * mean_gx);
                }
            } else {
                for (gxi, &gi) in gx_lane.iter_mut().zip(g_lane.iter()) {
                    *gxi = gammav[ch] * inv_std * gi;
                }
            }
        }
        vec![
            Some(gx.into_dyn()),
            Some(ggamma.into_dyn()),
            Some(gbeta.into_dyn()),
        ]
    }
}

struct LayerNormBack {
    eps: f64,
}

impl BackwardOp for LayerNormBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [x, gamma, _beta] = g.parents(out) else { unreachable!() };
        let d = *g.shape(*x).last().unwrap();
        let rows = g.val(*x).len() / d;
        let xv = g.val(*x).view().into_shape_with_order((rows, d)).unwrap();
        let gv = grad.view().into_shape_with_order((rows, d)).unwrap();
        let gammav = g.val(*gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();

        let mut gx = Array2::zeros((rows, d));
        let mut ggamma = Array1::zeros(d);
        let mut gbeta = Array1::zeros(d);
        for r in 0..rows {
            let xr = xv.row(r);
            let gr = gv.row(r);
            let mu = xr.sum() / d as f64;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            let mut mean_gy = 0.0;
            let mut mean_gy_xhat = 0.0;
            for j in 0..d {
                let xhat = (xr[j] - mu) * inv_std;
                let gy = gr[j] * gammav[j];
                ggamma[j] += gr[j] * xhat;
                gbeta[j] += gr[j];
                mean_gy += gy;
                mean_gy_xhat += gy * xhat;
            }
            mean_gy /= d as f64;
            mean_gy_xhat /= d as f64;
            for j in 0..d {
                let xhat = (xr[j] - mu) * inv_std;
                let gy = gr[j] * gammav[j];
                gx[[r, j]] = inv_std * (gy - mean_gy - xhat * mean_gy_xhat);
            }
        }
        vec![
            Some(reshape_owned(gx.into_dyn(), g.shape(*x))),
            Some(ggamma.into_dyn()),
            Some(gbeta.into_dyn()),
        ]
    }
}

impl Graph {
    /// Batch normalization over an (N,C,H,W) tensor. In training mode, batch
    /// statistics normalize the activations and running-buffer updates are
    /// recorded; in eval mode the provided running statistics are used.
    pub fn batch_norm2d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        buffers: &BnBuffers,
        momentum: f64,
        eps: f64,
    ) -> TensorId {
        let xv = self.val(x).view().into_dimensionality::<Ix4>().expect("batch_norm2d: not 4-d");
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);

        let (mean, var) = if self.train {
            channel_stats(&xv)
        } else {
            (buffers.mean.clone(), buffers.var.clone())
        };

        let gammav = self.val(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let betav = self.val(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut y = ndarray::Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + eps).sqrt();
            let (mu, ga, be) = (mean[ch], gammav[ch], betav[ch]);
            let x_lane = xv.index_axis(Axis(1), ch);
            let mut y_lane = y.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut y_lane).and(&x_lane).for_each(|yo, &xi| {
                *yo = (xi - mu) * inv_std * ga + be;
            });
        }

        if self.train {
            let m = (n * h * w) as f64;
            // Unbiased variance for the running estimate, as is conventional.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let new_mean = &buffers.mean * (1.0 - momentum) + &mean * momentum;
            let new_var = &buffers.var * (1.0 - momentum) + &(var.clone() * unbias) * momentum;
            self.push_buffer_update(buffers.mean_pid, new_mean.into_dyn());
            self.push_buffer_update(buffers.var_pid, new_var.into_dyn());
        }

        let batch_stats = self.train;
        self.push(
            y.into_dyn(),
            vec![x, gamma, beta],
            Some(Box::new(BatchNormBack {
                mean,
                var,
                eps,
                batch_stats,
            })),
        )
    }

    /// Layer normalization over the last axis of an (..., D) tensor.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let rows = self.val(x).len() / d;
        let xv = self.val(x).view().into_shape_with_order((rows, d)).unwrap();
        let gammav = self.val(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let betav = self.val(beta).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array2::zeros((rows, d));
        for r in 0..rows {
            let xr = xv.row(r);
            let mu = xr.sum() / d as f64;
            let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                y[[r, j]] = (xr[j] - mu) * inv_std * gammav[j] + betav[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let y = reshape_owned(y.into_dyn(), &shape);
        self.push(y, vec![x, gamma, beta], Some(Box::new(LayerNormBack { eps })))
    }
}

// ---------------------------------------------------------------------------
// fused attention
// ---------------------------------------------------------------------------

/// Row-stable softmax of a 2-d array.
pub(crate) fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    a
}

fn head_view(x: &ArrayD<f64>, heads: usize, head: usize) -> Array2<f64> {
    let (_l, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
    x2.slice(ndarray::s![.., head * dh..(head + 1) * dh]).to_owned()
}

struct FusedAttentionBack {
    heads: usize,
}

impl BackwardOp for FusedAttentionBack {
    fn backward(&self, g: &Graph, out: TensorId, grad: &ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> {
        let [q, k, v] = g.parents(out) else { unreachable!() };
        let (lq, d) = (g.shape(*q)[0], g.shape(*q)[1]);
        let lk = g.shape(*k)[0];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut gq = Array2::zeros((lq, d));
        let mut gk = Array2::zeros((lk, d));
        let mut gv = Array2::zeros((lk, d));
        let g2 = grad.view().into_shape_with_order((lq, d)).unwrap();

        for h in 0..self.heads {
            let qh = head_view(g.val(*q), self.heads, h);
            let kh = head_view(g.val(*k), self.heads, h);
            let vh = head_view(g.val(*v), self.heads, h);
            // Recompute attention probabilities; cheaper than caching them
            // for every layer of every frame.
            let scores = qh.dot(&kh.t()) * scale;
            let probs = softmax_rows(&scores);
            let go = g2.slice(ndarray::s![.., h * dh..(h + 1) * dh]).to_owned();

            let ga = go.dot(&vh.t());
            // softmax backward per row
            let mut gs = Array2::zeros((lq, lk));
            for r in 0..lq {
                let dot: f64 = (0..lk).map(|j| ga[[r, j]] * probs[[r, j]]).sum();
                for j in 0..lk {
                    gs[[r, j]] = probs[[r, j]] * (ga[[r, j]] - dot);
                }
            }
            let gqh = gs.dot(&kh) * scale;
            let gkh = gs.t().dot(&qh) * scale;
            let gvh = probs.t().dot(&go);
            gq.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]).assign(&gqh);
            gk.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]).assign(&gkh);
            gv.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]).assign(&gvh);
        }
        vec![
            Some(gq.into_dyn()),
            Some(gk.into_dyn()),
            Some(gv.into_dyn()),
        ]
    }
}

impl Graph {
    /// Multi-head scaled-dot-product attention on 2-d sequences:
    /// q (Lq,D), k (Lk,D), v (Lk,D) -> (Lq,D). Projections live outside.
    ///
    /// Attention probabilities are recomputed in the backward pass instead of
    /// being stored, which keeps long-sequence graphs small.
    pub fn attention(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> TensorId {
        let (lq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let lk = self.shape(k)[0];
        assert_eq!(self.shape(k)[1], d, "attention: k dim mismatch");
        assert_eq!(self.shape(v), [lk, d], "attention: v shape mismatch");
        assert_eq!(d % heads, 0, "attention: dim not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = Array2::zeros((lq, d));
        for h in 0..heads {
            let qh = head_view(self.val(q), heads, h);
            let kh = head_view(self.val(k), heads, h);
            let vh = head_view(self.val(v), heads, h);
            let probs = softmax_rows(&(qh.dot(&kh.t()) * scale));
            let oh = probs.dot(&vh);
            out.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh]).assign(&oh);
        }
        self.push(
            out.into_dyn(),
            vec![q, k, v],
            Some(Box::new(FusedAttentionBack { heads })),
        )
    }
}

/// Attention probabilities for inspection (tests, demos): one (Lq,Lk) matrix
/// per head. Pure function, not recorded on any tape.
pub fn attention_probs(
    q: &Array2<f64>,
    k: &Array2<f64>,
    heads: usize,
) -> Vec<Array2<f64>> {
    let d = q.shape()[1];
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = q.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let kh = k.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            softmax_rows(&(qh.dot(&kh.t()) * scale))
        })
        .collect()
}
