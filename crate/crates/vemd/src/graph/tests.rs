//! Finite-difference verification of every backward rule.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::grad_check_inputs;
use super::Graph;

const H: f64 = 1e-5;
const TOL: f64 = 1e-7;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Random array with no element near `avoid` (for kinked activations).
fn randn_away(shape: &[usize], seed: u64, avoid: f64, margin: f64) -> ArrayD<f64> {
    let mut a = randn(shape, seed);
    a.mapv_inplace(|v| {
        if (v - avoid).abs() < margin {
            v + 2.0 * margin * (v - avoid).signum().max(0.0).max(1.0)
        } else {
            v
        }
    });
    a
}

/// Loss = sum(out * fixed random projection) to make all gradients visible.
fn proj_loss(g: &mut Graph, out: super::TensorId, seed: u64) -> super::TensorId {
    let p = g.constant(randn(&g.shape(out).to_vec(), seed));
    let prod = g.mul(out, p);
    g.sum_all(prod)
}

#[test]
fn grad_elementwise() {
    let x = randn(&[3, 4], 1);
    let y = randn(&[3, 4], 2);
    let err = grad_check_inputs(
        |g, ids| {
            let a = g.add(ids[0], ids[1]);
            let s = g.sub(a, ids[0]);
            let m = g.mul(s, ids[1]);
            let sc = g.scale(m, 1.7);
            proj_loss(g, sc, 99)
        },
        &[x, y],
        H,
    );
    assert!(err < TOL, "elementwise err {err}");
}

#[test]
fn grad_activations() {
    let x = randn_away(&[4, 5], 3, 0.0, 0.05);
    let err = grad_check_inputs(
        |g, ids| {
            let r = g.relu(ids[0]);
            let e = g.elu(ids[0], 1.0);
            let s = g.sigmoid(ids[0]);
            let ex = g.exp(ids[0]);
            let a = g.add(r, e);
            let b = g.add(s, ex);
            let c = g.add(a, b);
            proj_loss(g, c, 7)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "activations err {err}");
}

#[test]
fn grad_structural() {
    let x = randn(&[2, 3, 4], 4);
    let y = randn(&[2, 2, 4], 5);
    let err = grad_check_inputs(
        |g, ids| {
            let r = g.reshape(ids[0], &[2, 12]);
            let r = g.reshape(r, &[2, 3, 4]);
            let c = g.concat(1, &[r, ids[1]]);
            let s = g.slice_axis(c, 1, 1, 3);
            proj_loss(g, s, 11)
        },
        &[x, y],
        H,
    );
    assert!(err < TOL, "structural err {err}");
}

#[test]
fn grad_index_rows_with_repeats() {
    let x = randn(&[5, 3], 6);
    let err = grad_check_inputs(
        |g, ids| {
            let picked = g.index_rows(ids[0], &[0, 2, 2, 4]);
            proj_loss(g, picked, 13)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "index_rows err {err}");
}

#[test]
fn grad_reductions() {
    let x = randn(&[3, 4], 8);
    let err = grad_check_inputs(
        |g, ids| {
            let s = g.sum_all(ids[0]);
            let m = g.mean_all(ids[0]);
            g.add(s, m)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "reductions err {err}");
}

#[test]
fn grad_max_axis0() {
    // Distinct entries so the argmax is stable under the FD perturbation.
    let mut x = randn(&[3, 4, 2], 9);
    for (i, v) in x.iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    let err = grad_check_inputs(
        |g, ids| {
            let m = g.max_axis0(ids[0]);
            proj_loss(g, m, 17)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "max_axis0 err {err}");
}

#[test]
fn grad_matmul_bias() {
    let x = randn(&[3, 4], 10);
    let w = randn(&[4, 5], 11);
    let b = randn(&[5], 12);
    let err = grad_check_inputs(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let y = g.add_bias_row(y, ids[2]);
            proj_loss(g, y, 19)
        },
        &[x, w, b],
        H,
    );
    assert!(err < TOL, "matmul err {err}");
}

#[test]
fn grad_bmm() {
    let a = randn(&[2, 3, 4], 13);
    let b = randn(&[2, 4, 2], 14);
    let err = grad_check_inputs(
        |g, ids| {
            let y = g.bmm(ids[0], ids[1]);
            proj_loss(g, y, 23)
        },
        &[a, b],
        H,
    );
    assert!(err < TOL, "bmm err {err}");
}

#[test]
fn grad_softmax() {
    let x = randn(&[3, 5], 15);
    let err = grad_check_inputs(
        |g, ids| {
            let y = g.softmax_lastdim(ids[0]);
            proj_loss(g, y, 29)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "softmax err {err}");
}

#[test]
fn grad_losses() {
    let logits = randn(&[4, 3], 16);
    let err = grad_check_inputs(
        |g, ids| g.cross_entropy_logits(ids[0], &[0, 2, 1, 1]),
        &[logits.clone()],
        H,
    );
    assert!(err < TOL, "cross_entropy err {err}");

    let pred = randn(&[3, 4], 17);
    let target = randn(&[3, 4], 18);
    let err = grad_check_inputs(
        |g, ids| g.mse_loss(ids[0], &target),
        &[pred.clone()],
        H,
    );
    assert!(err < TOL, "mse err {err}");

    // Keep |pred - target| away from the smooth-L1 kink at 1.
    let target2 = &pred * 0.5 + 3.0;
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let err = grad_check_inputs(
        |g, ids| g.smooth_l1_loss(ids[0], &target2, Some(&mask)),
        &[pred.clone()],
        H,
    );
    assert!(err < TOL, "smooth_l1 (linear branch) err {err}");

    let target3 = &pred + 0.3;
    let err = grad_check_inputs(
        |g, ids| g.smooth_l1_loss(ids[0], &target3, None),
        &[pred.clone()],
        H,
    );
    assert!(err < TOL, "smooth_l1 (quadratic branch) err {err}");

    let p = pred.mapv(|v| 0.2 + 0.6 * super::ops::stable_sigmoid(v));
    let t = randn(&[3, 4], 19).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let err = grad_check_inputs(|g, ids| g.bce_loss(ids[0], &t, 1e-7), &[p], H);
    assert!(err < TOL, "bce err {err}");
}

#[test]
fn grad_pdist2() {
    let x = randn(&[4, 3], 20);
    let y = randn(&[5, 3], 21);
    let err = grad_check_inputs(
        |g, ids| {
            let d = g.pdist2(ids[0], ids[1]);
            proj_loss(g, d, 31)
        },
        &[x, y],
        H,
    );
    assert!(err < TOL, "pdist2 err {err}");
}

#[test]
fn grad_conv2d() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let x = randn(&[2, 3, 6, 6], 22);
        let w = randn(&[4, 3, 3, 3], 23);
        let err = grad_check_inputs(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], stride, pad);
                proj_loss(g, y, 37)
            },
            &[x, w],
            H,
        );
        assert!(err < TOL, "conv2d s={stride} p={pad} err {err}");
    }
}

#[test]
fn grad_conv_transpose2d() {
    for (k, stride, pad) in [(2, 2, 0), (3, 1, 1), (1, 1, 0)] {
        let x = randn(&[2, 3, 4, 4], 24);
        let w = randn(&[3, 2, k, k], 25);
        let err = grad_check_inputs(
            |g, ids| {
                let y = g.conv_transpose2d(ids[0], ids[1], stride, pad);
                proj_loss(g, y, 41)
            },
            &[x, w],
            H,
        );
        assert!(err < TOL, "conv_transpose2d k={k} s={stride} err {err}");
    }
}

#[test]
fn conv_transpose_shape_contract() {
    let mut g = Graph::new();
    let x = g.constant(randn(&[1, 8, 7, 7], 26));
    let w = g.constant(randn(&[8, 4, 2, 2], 27));
    let y = g.conv_transpose2d(x, w, 2, 0);
    assert_eq!(g.shape(y), &[1, 4, 14, 14]);
}

#[test]
fn grad_upsample_and_pool() {
    let x = randn(&[2, 3, 4, 4], 28);
    let err = grad_check_inputs(
        |g, ids| {
            let u = g.upsample_nearest2x(ids[0]);
            let p = g.global_avg_pool(u);
            proj_loss(g, p, 43)
        },
        &[x],
        H,
    );
    assert!(err < TOL, "upsample/pool err {err}");
}

#[test]
fn grad_batch_norm_train_uses_batch_stats() {
    let x = randn(&[3, 2, 4, 4], 29);
    let gamma = randn(&[2], 30).mapv(|v| 1.0 + 0.2 * v);
    let beta = randn(&[2], 31);
    let buffers = super::BnBuffers {
        mean_pid: 0,
        var_pid: 1,
        mean: ndarray::Array1::zeros(2),
        var: ndarray::Array1::ones(2),
    };
    let err = grad_check_inputs(
        |g, ids| {
            let y = g.batch_norm2d(ids[0], ids[1], ids[2], &buffers, 0.1, 1e-5);
            proj_loss(g, y, 47)
        },
        &[x, gamma, beta],
        H,
    );
    assert!(err < 1e-6, "batch_norm train err {err}");
}

#[test]
fn grad_batch_norm_eval_uses_running_stats() {
    let x = randn(&[2, 2, 3, 3], 32);
    let gamma = ndarray::arr1(&[1.1, 0.9]).into_dyn();
    let beta = ndarray::arr1(&[0.1, -0.2]).into_dyn();
    let buffers = super::BnBuffers {
        mean_pid: 0,
        var_pid: 1,
        mean: ndarray::arr1(&[0.3, -0.1]),
        var: ndarray::arr1(&[1.5, 0.8]),
    };
    // Eval mode: graph not in train mode.
    let eval = |arrays: &[ArrayD<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<_> = arrays.iter().map(|a| g.var(a.clone())).collect();
        let y = g.batch_norm2d(ids[0], ids[1], ids[2], &buffers, 0.1, 1e-5);
        let loss = proj_loss(&mut g, y, 53);
        (g.scalar(loss), {
            let grads = g.backward(loss);
            grads.get(ids[0]).unwrap().clone()
        })
    };
    let (_, analytic) = eval(&[x.clone(), gamma.clone(), beta.clone()]);
    // finite differences on x only
    let mut max_err = 0.0f64;
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += H;
        let mut xm = x.clone();
        xm.as_slice_mut().unwrap()[idx] -= H;
        let (fp, _) = eval(&[xp, gamma.clone(), beta.clone()]);
        let (fm, _) = eval(&[xm, gamma.clone(), beta.clone()]);
        let num = (fp - fm) / (2.0 * H);
        let ana = analytic.as_slice().unwrap()[idx];
        max_err = max_err.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-2));
    }
    assert!(max_err < TOL, "batch_norm eval err {max_err}");
}

#[test]
fn batch_norm_records_buffer_updates_in_train_mode() {
    let mut g = Graph::train_mode();
    let x = g.constant(randn(&[2, 2, 3, 3], 33));
    let gamma = g.constant(ndarray::Array1::ones(2).into_dyn());
    let beta = g.constant(ndarray::Array1::zeros(2).into_dyn());
    let buffers = super::BnBuffers {
        mean_pid: 7,
        var_pid: 8,
        mean: ndarray::Array1::zeros(2),
        var: ndarray::Array1::ones(2),
    };
    g.batch_norm2d(x, gamma, beta, &buffers, 0.1, 1e-5);
    assert_eq!(g.buffer_updates.len(), 2);
    assert_eq!(g.buffer_updates[0].param, 7);
    assert_eq!(g.buffer_updates[1].param, 8);
}

#[test]
fn grad_layer_norm() {
    let x = randn(&[3, 6], 34);
    let gamma = randn(&[6], 35).mapv(|v| 1.0 + 0.1 * v);
    let beta = randn(&[6], 36);
    let err = grad_check_inputs(
        |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            proj_loss(g, y, 59)
        },
        &[x, gamma, beta],
        H,
    );
    assert!(err < 1e-6, "layer_norm err {err}");
}

#[test]
fn grad_attention() {
    let q = randn(&[3, 8], 37);
    let k = randn(&[5, 8], 38);
    let v = randn(&[5, 8], 39);
    for heads in [1, 2, 4] {
        let err = grad_check_inputs(
            |g, ids| {
                let y = g.attention(ids[0], ids[1], ids[2], heads);
                proj_loss(g, y, 61)
            },
            &[q.clone(), k.clone(), v.clone()],
            H,
        );
        assert!(err < TOL, "attention heads={heads} err {err}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let q = randn(&[4, 8], 40);
    let k = randn(&[6, 8], 41);
    let q2 = q.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    let k2 = k.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
    for probs in super::attention_probs(&q2, &k2, 2) {
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn detach_stops_gradient() {
    let x = randn(&[2, 2], 42);
    let mut g = Graph::new();
    let xid = g.var(x);
    let d = g.detach(xid);
    let s = g.sum_all(d);
    assert!(!g.requires_grad(s));
}

#[test]
fn repeated_lease_accumulates() {
    // f(x) = sum(x*x) via two leases of the same parameter must give 2x.
    use crate::nn::{Init, ParamStore};
    let mut store = ParamStore::new(0);
    let pid = store.root().param("p", &[3], Init::Uniform { limit: 1.0 });
    let mut g = Graph::train_mode();
    let a = g.lease(&store, pid);
    let b = g.lease(&store, pid);
    assert_eq!(a, b);
    let prod = g.mul(a, b);
    let loss = g.sum_all(prod);
    let mut grads = g.backward(loss);
    let pg = g.param_grads(&mut grads);
    let expect = store.value(pid) * 2.0;
    assert_eq!(pg.len(), 1);
    assert!(pg[0].1.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}
