#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;

use anyseg::tensor::{Tape, Tensor, Var};
use anyseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both
/// vectors are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds `f(inputs)` on a fresh tape and returns the scalar value.
fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// Tape gradient of scalar `f` against central differences for every
/// element of every input. Returns the norm-wise relative error.
pub fn check_gradient<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let g = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.extend(g);
        for j in 0..t.numel() {
            let mut probe = inputs.to_vec();
            let mut plus = t.data().to_vec();
            plus[j] += h;
            probe[i] = Tensor::new(t.shape(), plus).unwrap();
            let fp = eval(&f, &probe);
            let mut minus = t.data().to_vec();
            minus[j] -= h;
            probe[i] = Tensor::new(t.shape(), minus).unwrap();
            let fm = eval(&f, &probe);
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Reduces a tensor-valued op to a scalar with fixed random weights so that
/// every output element contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed ^ 0xABCD), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
