//! Numerical invariant suite behind the `check` command: gradient-reversal
//! sign, orthogonality reference points, fusion weight normalization,
//! modulation identity, the fusion per-pixel oracle, and finite-difference
//! gradient checks. A test hook can corrupt the reversal sign to prove the
//! suite catches it.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decomp::orthogonality_loss;
use crate::fusion::{FusionModule, Stream};
use crate::modulation::{ModulationModule, ModulationParams};
use crate::params::ParamStore;
use crate::tensor::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn result(name: &str, pass: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass,
        detail,
    }
}

fn rand_map(rng: &mut ChaCha8Rng, dims: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(dims), |_| rng.random_range(-1.0..1.0))
}

/// Scalar head used by the reversal check.
fn head(t: &mut Tape, w: &ArrayD<f64>, x: NodeId) -> NodeId {
    let wc = t.constant(w.clone());
    let y = t.matmul(x, wc);
    let y = t.tanh(y);
    t.mean_all(y)
}

fn check_grl(corrupt: bool) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_map(&mut rng, &[3, 4]);
    let w = rand_map(&mut rng, &[4, 5]);
    let mut worst = 0.0f64;
    for lambda in [0.5, 1.0, 1.7] {
        // direct gradient of h(x)
        let mut t1 = Tape::new();
        let x1 = t1.input(x.clone());
        let o1 = head(&mut t1, &w, x1);
        let g_plain: Vec<f64> = t1.backward(o1).node(x1).unwrap().iter().copied().collect();

        // gradient through the reversal layer (the hook flips its sign)
        let signed = if corrupt { -lambda } else { lambda };
        let mut t2 = Tape::new();
        let x2 = t2.input(x.clone());
        let r = t2.grad_reversal(x2, signed);
        let o2 = head(&mut t2, &w, r);
        let g_rev: Vec<f64> = t2.backward(o2).node(x2).unwrap().iter().copied().collect();

        // contract: g_rev == -lambda * g_plain
        for (a, b) in g_rev.iter().zip(&g_plain) {
            worst = worst.max((a + lambda * b).abs());
        }

        // and -lambda * g_plain must match central finite differences of
        // h applied to the reversal's forward (identity) at 1e-4 relative
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fp = {
                let mut t = Tape::new();
                let id = t.constant(xp);
                let o = head(&mut t, &w, id);
                t.scalar(o)
            };
            let fm = {
                let mut t = Tape::new();
                let id = t.constant(xm);
                let o = head(&mut t, &w, id);
                t.scalar(o)
            };
            let fd = (fp - fm) / (2.0 * eps);
            let expect = -lambda * fd;
            let got = g_rev[i];
            let rel = (got - expect).abs() / expect.abs().max(got.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    result(
        "grl_gradient_sign",
        worst < 1e-4,
        format!("max deviation {worst:.3e} (tol 1e-4)"),
    )
}

fn check_orthogonality() -> CheckResult {
    // disjoint pixel support -> exactly 0
    let mut t = Tape::new();
    let mut s = ArrayD::zeros(IxDyn(&[1, 2, 2, 2]));
    let mut p = ArrayD::zeros(IxDyn(&[1, 2, 2, 2]));
    s[[0, 0, 0, 0]] = 1.5;
    s[[0, 1, 0, 1]] = -0.5;
    p[[0, 0, 1, 0]] = 2.0;
    p[[0, 1, 1, 1]] = 1.0;
    let sid = t.constant(s);
    let pid = t.constant(p);
    let zero = orthogonality_loss(&mut t, sid, pid).map(|l| t.scalar(l));

    // identical single unit column -> exactly 1
    let mut t2 = Tape::new();
    let mut u = ArrayD::zeros(IxDyn(&[1, 1, 2, 2]));
    u[[0, 0, 1, 0]] = 1.0;
    let a = t2.constant(u.clone());
    let b = t2.constant(u);
    let one = orthogonality_loss(&mut t2, a, b).map(|l| t2.scalar(l));

    match (zero, one) {
        (Ok(z), Ok(o)) => result(
            "orthogonality_reference",
            z.abs() < 1e-12 && (o - 1.0).abs() < 1e-12,
            format!("orthogonal case {z:.3e}, unit case {o:.12}"),
        ),
        _ => result("orthogonality_reference", false, "loss errored".into()),
    }
}

fn check_fusion_weights() -> CheckResult {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = FusionModule::new(
        &mut store,
        &mut rng,
        6,
        vec![Stream::Base, Stream::Shared, Stream::Private],
    );
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let mut t = Tape::new();
        let red = t.constant(rand_map(&mut rng, &[2, 6, 5, 5]).mapv(|v| v * 3.0));
        let w = m.fusion_weights(&mut t, &store, red);
        for n in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let s: f64 = w.iter().map(|&wi| t.value(wi)[[n, 0, y, x]]).sum();
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
    }
    result(
        "fusion_weight_normalization",
        worst < 1e-6,
        format!("max |sum-1| {worst:.3e} (tol 1e-6)"),
    )
}

fn check_modulation_identity() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut t = Tape::new();
    let p_arr = rand_map(&mut rng, &[1, 4, 3, 3]);
    let p = t.constant(p_arr.clone());
    let g = t.constant(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
    let b = t.constant(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
    let out = ModulationModule::modulate(&mut t, p, ModulationParams { gamma: g, beta: b });
    match out {
        Ok(o) => {
            let exact = t.value(o) == &p_arr;
            result(
                "modulation_identity_at_zero",
                exact,
                if exact { "bit-exact".into() } else { "differs".into() },
            )
        }
        Err(e) => result("modulation_identity_at_zero", false, e.to_string()),
    }
}

fn check_fusion_oracle() -> CheckResult {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let m = FusionModule::new(
        &mut store,
        &mut rng,
        5,
        vec![Stream::Base, Stream::Shared, Stream::Private],
    );
    let mut t = Tape::new();
    let feats: Vec<NodeId> = (0..3)
        .map(|_| t.constant(rand_map(&mut rng, &[1, 5, 4, 4])))
        .collect();
    let out = match m.fuse(&mut t, &store, &feats) {
        Ok(o) => o,
        Err(e) => return result("fusion_per_pixel_oracle", false, e.to_string()),
    };
    // scalar oracle: w.f + reduced + conv1x1(reduced), looped per pixel
    let red = t.value(out.reduced).clone();
    let wv: Vec<ArrayD<f64>> = out.weights.iter().map(|&w| t.value(w).clone()).collect();
    let cw = store.value(m.enhance.w).clone();
    let cb = store.value(m.enhance.b).clone();
    let mut worst = 0.0f64;
    for c in 0..5 {
        for y in 0..4 {
            for x in 0..4 {
                let mut expect = red[[0, c, y, x]] + cb[[c]];
                for ci in 0..5 {
                    expect += cw[[c, ci, 0, 0]] * red[[0, ci, y, x]];
                }
                for (i, w) in wv.iter().enumerate() {
                    expect += w[[0, 0, y, x]] * t.value(feats[i])[[0, c, y, x]];
                }
                worst = worst.max((t.value(out.fused)[[0, c, y, x]] - expect).abs());
            }
        }
    }
    result(
        "fusion_per_pixel_oracle",
        worst < 1e-5,
        format!("max |diff| {worst:.3e} (tol 1e-5)"),
    )
}

fn check_finite_difference_gradients() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut store = ParamStore::new();
    let m = FusionModule::new(
        &mut store,
        &mut rng,
        4,
        vec![Stream::Base, Stream::Shared, Stream::Private],
    );
    let inputs: Vec<ArrayD<f64>> = (0..3).map(|_| rand_map(&mut rng, &[1, 4, 4, 4])).collect();
    let eval = |replace: usize, x: &ArrayD<f64>| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, arr)| t.constant(if i == replace { x.clone() } else { arr.clone() }))
            .collect();
        let out = m.fuse(&mut t, &store, &ids).unwrap();
        let sq = t.square(out.fused);
        let l = t.mean_all(sq);
        t.scalar(l)
    };
    let mut worst = 0.0f64;
    for which in 0..3 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .enumerate()
            .map(|(i, arr)| {
                if i == which {
                    t.input(arr.clone())
                } else {
                    t.constant(arr.clone())
                }
            })
            .collect();
        let out = m.fuse(&mut t, &store, &ids).unwrap();
        let sq = t.square(out.fused);
        let l = t.mean_all(sq);
        let grads = t.backward(l);
        let analytic: Vec<f64> = grads.node(ids[which]).unwrap().iter().copied().collect();
        let eps = 1e-5;
        for i in 0..inputs[which].len() {
            let mut xp = inputs[which].clone();
            let mut xm = inputs[which].clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fd = (eval(which, &xp) - eval(which, &xm)) / (2.0 * eps);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    result(
        "finite_difference_gradients",
        worst < 1e-4,
        format!("max rel deviation {worst:.3e} (tol 1e-4)"),
    )
}

/// Run the whole suite. `corrupt_grl` flips the reversal sign so the first
/// check must fail (test hook for the exit-code contract).
pub fn run_self_checks(corrupt_grl: bool) -> Vec<CheckResult> {
    vec![
        check_grl(corrupt_grl),
        check_orthogonality(),
        check_fusion_weights(),
        check_modulation_identity(),
        check_fusion_oracle(),
        check_finite_difference_gradients(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_check() {
        let results = run_self_checks(false);
        assert_eq!(results.len(), 6);
        for r in &results {
            assert!(r.pass, "{} failed: {}", r.name, r.detail);
        }
    }

    #[test]
    fn corrupted_grl_sign_is_caught() {
        let results = run_self_checks(true);
        let grl = results.iter().find(|r| r.name == "grl_gradient_sign").unwrap();
        assert!(!grl.pass);
        // the corruption is local to the reversal check
        for r in results.iter().filter(|r| r.name != "grl_gradient_sign") {
            assert!(r.pass);
        }
    }

    #[test]
    fn suite_is_fast() {
        let t0 = std::time::Instant::now();
        let _ = run_self_checks(false);
        assert!(t0.elapsed().as_secs() < 60);
    }
}
