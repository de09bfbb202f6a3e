//! Every tape op checked against central differences of an f64 oracle.

use editprobe::numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::grad::{self, check, M};

/// `(op name, worst relative gradient error)` for each op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    matmul_family_gradients(&mut out);
    elementwise_gradients(&mut out);
    broadcast_gradients(&mut out);
    normalization_gradients(&mut out);
    structural_gradients(&mut out);
    reduction_gradients(&mut out);
    composite_attention_block_gradient(&mut out);
    out
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Entries in [-1, -0.05] or [0.05, 1], away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts `out` with a fixed random weight so every output entry
/// influences the scalar loss.
fn contract(tape: &mut Tape, out: Var, w: &Tensor) -> editprobe::Result<Var> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn matmul_family_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(1);
    let (a, b, w) = (uniform(&mut r, &[3, 4]), uniform(&mut r, &[4, 5]), uniform(&mut r, &[3, 5]));
    let wm = M::from_tensor(&w);
    let err = check(
        &[a.clone(), b.clone()],
        |t, v| {
            let o = t.matmul(v[0], v[1])?;
            contract(t, o, &w)
        },
        |m| m[0].mm(&m[1]).dot(&wm),
    );
    out.push(("matmul", err));

    let bt = uniform(&mut r, &[5, 4]);
    let err = check(
        &[a.clone(), bt],
        |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            contract(t, o, &w)
        },
        |m| m[0].mm(&m[1].t()).dot(&wm),
    );
    out.push(("matmul_nt", err));

    let at = uniform(&mut r, &[4, 3]);
    let err = check(
        &[at, b],
        |t, v| {
            let o = t.matmul_tn(v[0], v[1])?;
            contract(t, o, &w)
        },
        |m| m[0].t().mm(&m[1]).dot(&wm),
    );
    out.push(("matmul_tn", err));
}

fn elementwise_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(2);
    let (a, b, w) = (uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]));
    let wm = M::from_tensor(&w);
    type Pair = (
        &'static str,
        fn(&mut Tape, Var, Var) -> editprobe::Result<Var>,
        fn(f64, f64) -> f64,
    );
    let cases: [Pair; 3] = [
        ("add", |t, x, y| t.add(x, y), |x, y| x + y),
        ("sub", |t, x, y| t.sub(x, y), |x, y| x - y),
        ("mul", |t, x, y| t.mul(x, y), |x, y| x * y),
    ];
    for (name, op, f) in cases {
        let err = check(
            &[a.clone(), b.clone()],
            |t, v| {
                let o = op(t, v[0], v[1])?;
                contract(t, o, &w)
            },
            |m| m[0].zip(&m[1], f).dot(&wm),
        );
        out.push((name, err));
    }

    let err = check(
        std::slice::from_ref(&a),
        |t, v| {
            let o = t.scale(v[0], -2.5);
            contract(t, o, &w)
        },
        |m| m[0].map(|x| -2.5 * x).dot(&wm),
    );
    out.push(("scale", err));

    let k = off_kink(&mut r, &[3, 4]);
    let err = check(
        &[k],
        |t, v| {
            let o = t.relu(v[0]);
            contract(t, o, &w)
        },
        |m| m[0].map(|x| x.max(0.0)).dot(&wm),
    );
    out.push(("relu", err));

    let err = check(
        std::slice::from_ref(&a),
        |t, v| {
            let o = t.gelu(v[0]);
            contract(t, o, &w)
        },
        |m| m[0].map(grad::gelu).dot(&wm),
    );
    out.push(("gelu", err));
}

fn broadcast_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(3);
    let (x, v, w) = (uniform(&mut r, &[4, 3]), uniform(&mut r, &[1, 3]), uniform(&mut r, &[4, 3]));
    let wm = M::from_tensor(&w);
    let err = check(
        &[x.clone(), v.clone()],
        |t, vars| {
            let o = t.add_row(vars[0], vars[1])?;
            contract(t, o, &w)
        },
        |m| m[0].row_op(&m[1], |a, b| a + b).dot(&wm),
    );
    out.push(("add_row", err));
    let err = check(
        &[x, v],
        |t, vars| {
            let o = t.mul_row(vars[0], vars[1])?;
            contract(t, o, &w)
        },
        |m| m[0].row_op(&m[1], |a, b| a * b).dot(&wm),
    );
    out.push(("mul_row", err));
}

fn normalization_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(4);
    let (x, g, b, w) = (
        uniform(&mut r, &[3, 5]),
        uniform(&mut r, &[1, 5]),
        uniform(&mut r, &[1, 5]),
        uniform(&mut r, &[3, 5]),
    );
    let wm = M::from_tensor(&w);
    let err = check(
        &[x.clone(), g, b],
        |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract(t, o, &w)
        },
        |m| grad::layer_norm(&m[0], &m[1], &m[2], 1e-5).dot(&wm),
    );
    out.push(("layer_norm", err));

    let err = check(
        &[x],
        |t, v| {
            let o = t.softmax_rows(v[0])?;
            contract(t, o, &w)
        },
        |m| grad::softmax_rows(&m[0]).dot(&wm),
    );
    out.push(("softmax_rows", err));
}

fn structural_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(5);
    let (a, b) = (uniform(&mut r, &[2, 3]), uniform(&mut r, &[3, 3]));
    let wr = uniform(&mut r, &[5, 3]);
    let wrm = M::from_tensor(&wr);
    let err = check(
        &[a.clone(), b.clone()],
        |t, v| {
            let o = t.concat_rows(&[v[0], v[1]])?;
            contract(t, o, &wr)
        },
        |m| M::vstack(&[&m[0], &m[1]]).dot(&wrm),
    );
    out.push(("concat_rows", err));

    let c = uniform(&mut r, &[2, 4]);
    let wc = uniform(&mut r, &[2, 7]);
    let wcm = M::from_tensor(&wc);
    let err = check(
        &[a.clone(), c],
        |t, v| {
            let o = t.concat_cols(&[v[0], v[1]])?;
            contract(t, o, &wc)
        },
        |m| M::hstack(&[&m[0], &m[1]]).dot(&wcm),
    );
    out.push(("concat_cols", err));

    let ws = uniform(&mut r, &[2, 3]);
    let wsm = M::from_tensor(&ws);
    let err = check(
        std::slice::from_ref(&b),
        |t, v| {
            let o = t.slice_rows(v[0], 1, 3)?;
            contract(t, o, &ws)
        },
        |m| m[0].rows(1, 3).dot(&wsm),
    );
    out.push(("slice_rows", err));

    let wsc = uniform(&mut r, &[3, 2]);
    let wscm = M::from_tensor(&wsc);
    let err = check(
        &[b],
        |t, v| {
            let o = t.slice_cols(v[0], 0, 2)?;
            contract(t, o, &wsc)
        },
        |m| m[0].cols(0, 2).dot(&wscm),
    );
    out.push(("slice_cols", err));
}

fn reduction_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = super::rng(6);
    let (a, y) = (uniform(&mut r, &[3, 4]), uniform(&mut r, &[3, 4]));
    let err = check(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])), |m| m[0].sum());
    out.push(("sum", err));
    let err = check(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])), |m| m[0].sum() / 12.0);
    out.push(("mean", err));
    let err = check(std::slice::from_ref(&a), |t, v| Ok(t.sum_squares(v[0])), |m| m[0].dot(&m[0]));
    out.push(("sum_squares", err));
    let err = check(
        &[a, y],
        |t, v| t.mse(v[0], v[1]),
        |m| {
            let d = m[0].zip(&m[1], |p, q| p - q);
            d.dot(&d) / 12.0
        },
    );
    out.push(("mse", err));
}

fn composite_attention_block_gradient(out: &mut Vec<(&'static str, f64)>) {
    // softmax(q k^T / sqrt(d)) v followed by layer norm and gelu.
    let mut r = super::rng(7);
    let (x, wq, wk, wv) = (
        uniform(&mut r, &[4, 3]),
        uniform(&mut r, &[3, 3]),
        uniform(&mut r, &[3, 3]),
        uniform(&mut r, &[3, 3]),
    );
    let (g, b, w) = (uniform(&mut r, &[1, 3]), uniform(&mut r, &[1, 3]), uniform(&mut r, &[4, 3]));
    let wm = M::from_tensor(&w);
    let s = 1.0 / 3f64.sqrt();
    let err = check(
        &[x, wq, wk, wv, g, b],
        |t, v| {
            let q = t.matmul(v[0], v[1])?;
            let k = t.matmul(v[0], v[2])?;
            let val = t.matmul(v[0], v[3])?;
            let att = t.matmul_nt(q, k)?;
            let att = t.scale(att, s);
            let att = t.softmax_rows(att)?;
            let h = t.matmul(att, val)?;
            let h = t.add(h, v[0])?;
            let h = t.layer_norm(h, v[4], v[5], 1e-5)?;
            let h = t.gelu(h);
            contract(t, h, &w)
        },
        |m| {
            let q = m[0].mm(&m[1]);
            let k = m[0].mm(&m[2]);
            let val = m[0].mm(&m[3]);
            let att = grad::softmax_rows(&q.mm(&k.t()).map(|a| a * s));
            let h = att.mm(&val).zip(&m[0], |a, b| a + b);
            grad::layer_norm(&h, &m[4], &m[5], 1e-5).map(grad::gelu).dot(&wm)
        },
    );
    out.push(("attention block", err));
}
