//! Fixed simplex equiangular tight frame used as the probability head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DmmError, Result};
use crate::ndcore::{log_sum_exp, random_orthonormal, Tape, Tensor, Var};

/// `N` unit vectors in `R^m` with pairwise inner product `-1/(N-1)`, stored
/// as the columns of an `m × N` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    matrix: Tensor,
    seed: u64,
}

impl EtfClassifier {
    /// `M = sqrt(N/(N-1)) · U · (I - 11ᵀ/N)` for a random `U` with
    /// orthonormal columns.
    pub fn build(n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(DmmError::Config(format!(
                "an ETF needs at least 2 classes, got {n_classes}"
            )));
        }
        if dim < n_classes {
            return Err(DmmError::Config(format!(
                "ETF with {n_classes} classes needs feature dimension >= {n_classes}, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_orthonormal(&mut rng, dim, n_classes);
        Ok(Self {
            matrix: Self::from_basis(&u, dim, n_classes),
            seed,
        })
    }

    /// Applies the centering construction to an explicit orthonormal basis
    /// (`dim × n` row-major).
    pub fn from_basis(u: &[f64], dim: usize, n: usize) -> Tensor {
        let scale = (n as f64 / (n as f64 - 1.0)).sqrt();
        let mut data = vec![0.0f32; dim * n];
        for i in 0..dim {
            let row = &u[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            for j in 0..n {
                data[i * n + j] = (scale * (row[j] - mean)) as f32;
            }
        }
        Tensor::matrix(dim, n, data).expect("consistent dims")
    }

    pub(crate) fn from_parts(matrix: Tensor, seed: u64) -> Self {
        Self { matrix, seed }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// `softmax(Mᵀh)`.
    pub fn probabilities(&self, h: &[f32]) -> Result<Vec<f32>> {
        probabilities(&self.matrix, h)
    }

    /// `-log softmax(Mᵀh)[target]`.
    pub fn cross_entropy(&self, h: &[f32], target: usize) -> Result<f32> {
        if target >= self.classes() {
            return Err(DmmError::Contract(format!(
                "target class {target} out of range for {} classes",
                self.classes()
            )));
        }
        let logits = logits(&self.matrix, h)?;
        Ok((log_sum_exp(&logits) - logits[target] as f64) as f32)
    }
}

/// `Mᵀh` for an `m × N` classifier matrix.
pub fn logits(classifier: &Tensor, h: &[f32]) -> Result<Vec<f32>> {
    let (m, n) = classifier.dims2()?;
    if h.len() != m {
        return Err(DmmError::dim(
            "etf_probabilities",
            format!("feature of length {} for a classifier over R^{m}", h.len()),
        ));
    }
    let d = classifier.data();
    Ok((0..n)
        .map(|j| (0..m).map(|i| d[i * n + j] as f64 * h[i] as f64).sum::<f64>() as f32)
        .collect())
}

pub fn probabilities(classifier: &Tensor, h: &[f32]) -> Result<Vec<f32>> {
    Ok(softmax(&logits(classifier, h)?))
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

/// Mean cross-entropy of a `B × m` feature batch against `targets`, recorded
/// on the tape. `classifier` is an `m × N` node; pass a constant for the
/// fixed frame so that it collects no gradient.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    features: Var,
    classifier: Var,
    targets: &[usize],
) -> Result<Var> {
    let logits = tape.matmul(features, classifier)?;
    let (b, n) = tape.value(logits).dims2()?;
    if targets.len() != b {
        return Err(DmmError::dim(
            "etf_cross_entropy",
            format!("{} targets for a batch of {b}", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= n) {
        return Err(DmmError::Contract(format!("target class {t} out of range for {n} classes")));
    }
    let log_p = tape.log_softmax_rows(logits)?;
    let onehot = tape.constant(Tensor::from_fn(&[b, n], |k| {
        (targets[k / n] == k % n) as u8 as f32
    }));
    let picked = tape.mul(log_p, onehot)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f32))
}
