use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Tape};

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-1.0..1.0))
}

/// Central finite differences of `f` w.r.t. `x`, compared against the tape
/// gradient at relative tolerance `tol`.
fn check_grad(
    x: &ArrayD<f64>,
    f: impl Fn(&mut Tape, NodeId) -> NodeId,
    tol: f64,
) {
    let mut tape = Tape::new();
    let xid = tape.input(x.clone());
    let out = f(&mut tape, xid);
    let grads = tape.backward(out);
    let analytic: Vec<f64> = grads
        .node(xid)
        .expect("input gradient")
        .iter()
        .copied()
        .collect();

    let eps = 1e-5;
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[i] += eps;
        xm.as_slice_mut().unwrap()[i] -= eps;
        let fp = {
            let mut t = Tape::new();
            let id = t.input(xp);
            let o = f(&mut t, id);
            t.scalar(o)
        };
        let fm = {
            let mut t = Tape::new();
            let id = t.input(xm);
            let o = f(&mut t, id);
            t.scalar(o)
        };
        let num = (fp - fm) / (2.0 * eps);
        let ana = analytic[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    assert!(max_rel < tol, "finite-difference mismatch: {max_rel} >= {tol}");
}

#[test]
fn grad_elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[3, 4]);
    check_grad(
        &x,
        |t, x| {
            let a = t.tanh(x);
            let b = t.sigmoid(a);
            let c = t.square(b);
            let d = t.add(c, a);
            let e = t.mul(d, b);
            t.mean_all(e)
        },
        1e-6,
    );
}

#[test]
fn grad_exp_ln_sqrt() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[4, 3]).mapv(|v| v.abs() + 0.5);
    check_grad(
        &x,
        |t, x| {
            let a = t.ln(x);
            let b = t.exp(a);
            let c = t.sqrt(b);
            let d = t.div(c, x);
            t.sum_all(d)
        },
        1e-6,
    );
}

#[test]
fn grad_broadcast_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    let b = randn(&mut rng, &[1, 3, 1, 1]);
    // Gradient w.r.t. the broadcast operand.
    check_grad(
        &b,
        |t, bid| {
            let xc = t.constant(x.clone());
            let y = t.mul(xc, bid);
            let z = t.add(y, bid);
            t.mean_all(z)
        },
        1e-6,
    );
}

#[test]
fn grad_reductions_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[2, 3, 4]);
    check_grad(
        &x,
        |t, x| {
            let s = t.sum_axes(x, &[1]);
            let m = t.mean_axes(s, &[2]);
            let r = t.reshape(m, &[2]);
            let sq = t.square(r);
            t.sum_all(sq)
        },
        1e-6,
    );
}

#[test]
fn grad_matmul_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    check_grad(
        &a,
        |t, aid| {
            let bc = t.constant(b.clone());
            let y = t.matmul(aid, bc);
            let yt = t.transpose2(y);
            let sq = t.square(yt);
            t.sum_all(sq)
        },
        1e-6,
    );
    check_grad(
        &b,
        |t, bid| {
            let ac = t.constant(a.clone());
            let y = t.matmul(ac, bid);
            t.mean_all(y)
        },
        1e-6,
    );
}

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    let b = randn(&mut rng, &[4]);
    check_grad(
        &x,
        |t, xid| {
            let wc = t.constant(w.clone());
            let bc = t.constant(b.clone());
            let y = t.conv2d(xid, wc, Some(bc), 2, 1);
            let y = t.tanh(y);
            t.mean_all(y)
        },
        1e-5,
    );
    check_grad(
        &w,
        |t, wid| {
            let xc = t.constant(x.clone());
            let bc = t.constant(b.clone());
            let y = t.conv2d(xc, wid, Some(bc), 1, 1);
            let y = t.sigmoid(y);
            t.sum_all(y)
        },
        1e-5,
    );
    check_grad(
        &b,
        |t, bid| {
            let xc = t.constant(x.clone());
            let wc = t.constant(w.clone());
            let y = t.conv2d(xc, wc, Some(bid), 1, 0);
            let y = t.square(y);
            t.mean_all(y)
        },
        1e-5,
    );
}

#[test]
fn conv2d_matches_direct_sum() {
    // 1x1 input patch against a hand-evaluated 3x3 kernel position.
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), (1..=9).map(f64::from).collect()).unwrap();
    let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), vec![0.0; 9])
        .unwrap()
        .mapv(|_| 1.0);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let wid = t.constant(w);
    let y = t.conv2d(xid, wid, None, 1, 0);
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert!((t.value(y)[[0, 0, 0, 0]] - 45.0).abs() < 1e-12);
}

#[test]
fn grad_bilinear_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[1, 2, 4, 4]);
    check_grad(
        &x,
        |t, xid| {
            let up = t.bilinear_resize(xid, 7, 7);
            let sq = t.square(up);
            t.mean_all(sq)
        },
        1e-6,
    );
    // Downsample direction.
    check_grad(
        &x,
        |t, xid| {
            let dn = t.bilinear_resize(xid, 2, 2);
            t.sum_all(dn)
        },
        1e-6,
    );
}

#[test]
fn grad_replicate_pad() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = randn(&mut rng, &[1, 2, 3, 3]);
    check_grad(
        &x,
        |t, xid| {
            let p = t.replicate_pad(xid, 2);
            let sq = t.square(p);
            t.mean_all(sq)
        },
        1e-6,
    );
    // forward: corners replicate
    let mut t = Tape::new();
    let xid = t.constant(x.clone());
    let p = t.replicate_pad(xid, 1);
    assert_eq!(t.shape(p), &[1, 2, 5, 5]);
    assert_eq!(t.value(p)[[0, 0, 0, 0]], x[[0, 0, 0, 0]]);
    assert_eq!(t.value(p)[[0, 1, 4, 4]], x[[0, 1, 2, 2]]);
}

#[test]
fn grad_pooling_and_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    check_grad(
        &x,
        |t, xid| {
            let gap = t.global_avg_pool(xid);
            let gmp = t.global_max_pool(xid);
            let s = t.add(gap, gmp);
            let s = t.tanh(s);
            t.sum_all(s)
        },
        1e-5,
    );
    check_grad(
        &x,
        |t, xid| {
            let mm = t.channel_mean_map(xid);
            let mx = t.channel_max_map(xid);
            let c = t.concat(&[mm, mx], 1);
            let c = t.sigmoid(c);
            t.mean_all(c)
        },
        1e-5,
    );
}

#[test]
fn grad_concat_narrow_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, &[2, 4, 3, 3]);
    check_grad(
        &x,
        |t, xid| {
            let a = t.narrow(xid, 1, 0, 2);
            let b = t.narrow(xid, 1, 2, 2);
            let c = t.concat(&[b, a], 1);
            let picked = t.gather_pixels(c, &[(0, 1, 2), (1, 0, 0), (0, 1, 2)]);
            let sq = t.square(picked);
            t.sum_all(sq)
        },
        1e-6,
    );
    let m = randn(&mut rng, &[3, 4]);
    check_grad(
        &m,
        |t, mid| {
            let g = t.gather_rows(mid, &[2, 0, 2, 1]);
            let s = t.sigmoid(g);
            t.mean_all(s)
        },
        1e-6,
    );
}

#[test]
fn grad_softmax_and_l2norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    check_grad(
        &x,
        |t, xid| {
            let sm = t.softmax_axis1(xid);
            let sq = t.square(sm);
            t.sum_all(sq)
        },
        1e-5,
    );
    let m = randn(&mut rng, &[4, 5]);
    check_grad(
        &m,
        |t, mid| {
            let n = t.l2_normalize_rows(mid, 1e-12);
            let s = t.tanh(n);
            t.mean_all(s)
        },
        1e-5,
    );
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[3, 5, 2, 2]).mapv(|v| v * 10.0);
    let mut t = Tape::new();
    let xid = t.constant(x);
    let sm = t.softmax_axis1(xid);
    let v = t.value(sm);
    for n in 0..3 {
        for y in 0..2 {
            for xx in 0..2 {
                let s: f64 = (0..5).map(|c| v[[n, c, y, xx]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_reversal_flips_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[3, 3]);
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let head = |t: &mut Tape, id: NodeId| {
            let a = t.tanh(id);
            let b = t.square(a);
            t.mean_all(b)
        };
        let mut t1 = Tape::new();
        let x1 = t1.input(x.clone());
        let o1 = head(&mut t1, x1);
        let g_plain = t1.backward(o1).node(x1).unwrap().clone();

        let mut t2 = Tape::new();
        let x2 = t2.input(x.clone());
        let r = t2.grad_reversal(x2, lambda);
        let o2 = head(&mut t2, r);
        assert_eq!(t2.value(r), &x); // identity forward
        let grads = t2.backward(o2);
        let g_rev = grads.node(x2).unwrap();
        if lambda == 0.0 {
            // -0.0 == 0.0 elementwise
            for v in g_rev.iter() {
                assert_eq!(*v, 0.0);
            }
        } else {
            let expect = g_plain.mapv(|v| -lambda * v);
            let diff = (g_rev - &expect).mapv(f64::abs).sum();
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.input(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
    let d = t.detach(x);
    let y = t.square(d);
    let s = t.sum_all(y);
    let grads = t.backward(s);
    assert!(grads.node(x).is_none());
}

#[test]
fn clamp_zeroes_gradient_outside() {
    let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.3, 2.0]).unwrap();
    let mut t = Tape::new();
    let xid = t.input(x);
    let c = t.clamp(xid, -1.0, 1.0);
    let s = t.sum_all(c);
    let g = t.backward(s);
    let gx = g.node(xid).unwrap();
    assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn gradient_accumulates_over_reuse() {
    // y = x + x -> dy/dx = 2
    let mut t = Tape::new();
    let x = t.input(ArrayD::from_elem(IxDyn(&[2]), 1.5));
    let y = t.add(x, x);
    let s = t.sum_all(y);
    let g = t.backward(s);
    assert_eq!(g.node(x).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
}
