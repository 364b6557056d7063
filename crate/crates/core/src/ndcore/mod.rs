//! Dense `f32` tensors and a reverse-mode tape.
//!
//! Every differentiable quantity of the model lives on a [`Tape`] for the
//! duration of one step: parameters are copied in with [`Tape::param`],
//! primitives append nodes in evaluation order, and [`Tape::backward`]
//! walks the list in reverse. Reductions accumulate in `f64`.

mod tape;
mod tensor;

pub use tape::{Elementwise, Reduce, Tape, Var, SIGMOID_CLAMP};
pub(crate) use tape::{column_norms, log_sum_exp};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;

/// `rows × cols` matrix (row-major, `f64`) whose columns are orthonormal,
/// drawn by orthonormalizing a Gaussian matrix. Requires `cols <= rows`.
pub fn random_orthonormal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in R^{rows}");
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        // Two Gram-Schmidt passes keep the basis orthogonal to machine precision.
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * cols + j] = x;
        }
    }
    out
}
