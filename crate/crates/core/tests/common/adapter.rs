//! Low-rank branch oracle for adapter gradient checks.

use std::collections::BTreeMap;

use editprobe::adapters::{AdapterConfig, AdapterSet, ProjectionShape};
use editprobe::numerics::{Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use super::grad::{FD_STEP, M, REL_FLOOR};
use super::{rel_err, rng};

/// Draws every lambda from N(0, 1) so the branch is not trivially zero.
pub fn randomize_lambdas(set: &mut AdapterSet, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = set.triplets().map(|t| t.lambda_name()).collect();
    for n in names {
        for v in set.params.get_mut(&n).unwrap().data_mut() {
            *v = r.sample::<f32, _>(StandardNormal);
        }
    }
}

/// `sum(R .* (x W + s x Q^T diag(lambda) P^T))`.
fn branch_oracle(x: &M, w: &M, r: &M, p: &M, lambda: &M, q: &M, s: f64) -> f64 {
    let h = x.mm(&q.t()).row_op(lambda, |a, l| a * l);
    let out = x.mm(w).zip(&h.mm(&p.t()), |a, b| a + s * b);
    out.dot(r)
}

/// Worst relative error of the P, lambda and Q gradients of one adapted
/// projection against central differences of the oracle.
pub fn adapter_gradient_error(seed: u64) -> f64 {
    let (din, dout, rank) = (5, 4, 3);
    let mut shapes = BTreeMap::new();
    shapes.insert("t".to_string(), ProjectionShape { input: din, output: dout });
    let mut set = AdapterSet::attach(&shapes, AdapterConfig { rank, alpha: 6.0, seed, ..AdapterConfig::default() }).unwrap();
    randomize_lambdas(&mut set, seed + 100);
    let t = set.get("t").unwrap().clone();
    let mut r = rng(seed);
    let x = Tensor::randn(&[2, din], 1.0, &mut r);
    let w = Tensor::randn(&[din, dout], 1.0, &mut r);
    let weights = Tensor::randn(&[2, dout], 1.0, &mut r);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let rv = tape.constant(weights.clone());
    let base = tape.matmul(xv, wv).unwrap();
    let out = set.apply(&mut tape, "t", xv, base, None).unwrap();
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.gradients(loss).unwrap();

    let s = set.config.scaling();
    let names = [t.p_name(), t.lambda_name(), t.q_name()];
    let point: Vec<M> = names.iter().map(|n| M::from_tensor(set.params.get(n).unwrap())).collect();
    let (xm, wm, rm) = (M::from_tensor(&x), M::from_tensor(&w), M::from_tensor(&weights));
    let f = |v: &[M]| branch_oracle(&xm, &wm, &rm, &v[0], &v[1], &v[2], s);
    assert!(rel_err(tape.value(loss).item() as f64, f(&point), 1.0) < 1e-5, "forward disagrees with oracle");

    let mut worst = 0.0f64;
    for (k, name) in names.iter().enumerate() {
        let var = tape.param(&set.params, name).unwrap();
        let analytic = grads.wrt_f64(var).unwrap();
        for j in 0..point[k].d.len() {
            let mut plus = point.clone();
            plus[k].d[j] += FD_STEP;
            let mut minus = point.clone();
            minus[k].d[j] -= FD_STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric, REL_FLOOR));
        }
    }
    worst
}
