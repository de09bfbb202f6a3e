//! f64 matrix arithmetic and central finite differences.

use editprobe::numerics::{Tape, Tensor, Var};
use editprobe::Result;

use super::rel_err;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;

/// Denominator floor for relative errors of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(r * c, d.len());
        Self { r, c, d }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (r, c) = if t.rank() == 2 {
            (t.shape()[0], t.shape()[1])
        } else {
            (1, t.numel())
        };
        Self::new(r, c, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn t(&self) -> M {
        let mut d = Vec::with_capacity(self.d.len());
        for j in 0..self.c {
            for i in 0..self.r {
                d.push(self.at(i, j));
            }
        }
        M::new(self.c, self.r, d)
    }

    pub fn mm(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                for k in 0..self.c {
                    d[i * o.c + j] += self.at(i, k) * o.at(k, j);
                }
            }
        }
        M::new(self.r, o.c, d)
    }

    pub fn zip(&self, o: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c));
        M::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M::new(self.r, self.c, self.d.iter().map(|&v| f(v)).collect())
    }

    /// Applies `f(x_ij, v_j)` with a length-`c` vector.
    pub fn row_op(&self, v: &M, f: impl Fn(f64, f64) -> f64) -> M {
        assert_eq!(v.d.len(), self.c);
        M::new(
            self.r,
            self.c,
            self.d.iter().enumerate().map(|(i, &x)| f(x, v.d[i % self.c])).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.d.iter().sum()
    }

    /// `sum(self .* w)`.
    pub fn dot(&self, w: &M) -> f64 {
        self.zip(w, |a, b| a * b).sum()
    }

    pub fn rows(&self, start: usize, end: usize) -> M {
        M::new(end - start, self.c, self.d[start * self.c..end * self.c].to_vec())
    }

    pub fn cols(&self, start: usize, end: usize) -> M {
        let mut d = Vec::new();
        for i in 0..self.r {
            for j in start..end {
                d.push(self.at(i, j));
            }
        }
        M::new(self.r, end - start, d)
    }

    pub fn vstack(parts: &[&M]) -> M {
        let c = parts[0].c;
        let mut d = Vec::new();
        let mut r = 0;
        for p in parts {
            assert_eq!(p.c, c);
            r += p.r;
            d.extend_from_slice(&p.d);
        }
        M::new(r, c, d)
    }

    pub fn hstack(parts: &[&M]) -> M {
        let r = parts[0].r;
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(&p.d[i * p.c..(i + 1) * p.c]);
            }
        }
        M::new(r, c, d)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn layer_norm(x: &M, g: &M, b: &M, eps: f64) -> M {
    let mut d = Vec::with_capacity(x.d.len());
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let mu = row.iter().sum::<f64>() / x.c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.c as f64;
        for j in 0..x.c {
            d.push((row[j] - mu) / (var + eps).sqrt() * g.d[j] + b.d[j]);
        }
    }
    M::new(x.r, x.c, d)
}

pub fn softmax_rows(x: &M) -> M {
    let mut d = Vec::with_capacity(x.d.len());
    for i in 0..x.r {
        let row = &x.d[i * x.c..(i + 1) * x.c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        d.extend(row.iter().map(|v| v.exp() / z));
    }
    M::new(x.r, x.c, d)
}

/// Largest relative error between the tape gradient of every input and a
/// central difference of `oracle` around the same (f32-rounded) point.
pub fn check(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    oracle: impl Fn(&[M]) -> f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("forward");
    let grads = tape.gradients(loss).expect("backward");

    let base: Vec<M> = inputs.iter().map(M::from_tensor).collect();
    let forward = oracle(&base);
    assert!(
        rel_err(tape.value(loss).item() as f64, forward, 1.0) < 1e-5,
        "forward disagrees with oracle: {} vs {forward}",
        tape.value(loss).item()
    );

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt_f64(*var).expect("input gradient");
        for j in 0..base[k].d.len() {
            let mut plus = base.clone();
            plus[k].d[j] += FD_STEP;
            let mut minus = base.clone();
            minus[k].d[j] -= FD_STEP;
            let numeric = (oracle(&plus) - oracle(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric, REL_FLOOR));
        }
    }
    worst
}
