//! Discrete codebook: nearest-code lookup, thresholded covariance penalty
//! and exponential-moving-average updates.
//!
//! Codes are stored as the columns of an `m × N` matrix. Alongside the codes
//! the codebook keeps the EMA state: a decayed assignment count `n_j` and a
//! decayed feature sum `acc_j` per code, with `c_j = acc_j / n_j`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DmmError, Result};
use crate::ndcore::{random_orthonormal, Tape, Tensor, Var};

pub const DEFAULT_KAPPA: f32 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codes: Tensor,
    counts: Vec<f32>,
    accum: Tensor,
    tau: f32,
    kappa: f32,
}

/// Threshold used by the covariance penalty for codes in `R^dim`.
pub fn default_tau(dim: usize) -> f32 {
    (0.5 / (dim as f64).sqrt()) as f32
}

impl Codebook {
    /// Random codebook of `n_codes` unit columns in `R^dim`.
    ///
    /// For `n_codes <= dim` the columns are orthonormal. Between `dim` and
    /// `2·dim` the first `dim` columns form an orthonormal basis and the rest
    /// are random unit vectors.
    pub fn init(n_codes: usize, dim: usize, kappa: f32, seed: u64) -> Result<Self> {
        if n_codes == 0 || dim == 0 {
            return Err(DmmError::Config("codebook needs at least one code and dimension".into()));
        }
        if n_codes >= 2 * dim {
            return Err(DmmError::Config(format!(
                "codebook size {n_codes} must be below twice the code dimension {dim}"
            )));
        }
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(DmmError::Config(format!("EMA decay {kappa} outside (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis_cols = n_codes.min(dim);
        let basis = random_orthonormal(&mut rng, dim, basis_cols);
        let mut data = vec![0.0f32; dim * n_codes];
        for i in 0..dim {
            for j in 0..basis_cols {
                data[i * n_codes + j] = basis[i * basis_cols + j] as f32;
            }
        }
        for j in basis_cols..n_codes {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (i, x) in v.iter().enumerate() {
                data[i * n_codes + j] = (x / norm) as f32;
            }
        }
        let codes = Tensor::matrix(dim, n_codes, data)?;
        Ok(Self {
            accum: codes.clone(),
            codes,
            counts: vec![1.0; n_codes],
            tau: default_tau(dim),
            kappa,
        })
    }

    /// Builds a codebook from explicit columns with unit EMA counts.
    pub fn from_codes(codes: Tensor, tau: f32, kappa: f32) -> Result<Self> {
        let (_, n) = codes.dims2()?;
        Ok(Self {
            accum: codes.clone(),
            codes,
            counts: vec![1.0; n],
            tau,
            kappa,
        })
    }

    pub(crate) fn from_parts(
        codes: Tensor,
        counts: Vec<f32>,
        accum: Tensor,
        tau: f32,
        kappa: f32,
    ) -> Result<Self> {
        let (m, n) = codes.dims2()?;
        if counts.len() != n || accum.shape() != [m, n] {
            return Err(DmmError::dim("codebook", "EMA state does not match codes"));
        }
        Ok(Self {
            codes,
            counts,
            accum,
            tau,
            kappa,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn kappa(&self) -> f32 {
        self.kappa
    }

    /// The `m × N` code matrix.
    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn counts(&self) -> &[f32] {
        &self.counts
    }

    pub fn accumulators(&self) -> &Tensor {
        &self.accum
    }

    pub fn code(&self, index: usize) -> Vec<f32> {
        self.codes.column(index)
    }

    /// Replaces the codes after a gradient step and rescales the accumulators
    /// so that `c_j = acc_j / n_j` keeps holding.
    pub fn set_codes(&mut self, codes: Tensor) -> Result<()> {
        if codes.shape() != self.codes.shape() {
            return Err(DmmError::dim(
                "set_codes",
                format!("{:?} vs {:?}", codes.shape(), self.codes.shape()),
            ));
        }
        let n = self.len();
        for (k, (acc, &c)) in self.accum.data_mut().iter_mut().zip(codes.data()).enumerate() {
            *acc = c * self.counts[k % n];
        }
        self.codes = codes;
        Ok(())
    }

    /// Index of the code closest to `feature` in squared Euclidean distance.
    /// Ties go to the lowest index.
    pub fn nearest(&self, feature: &[f32]) -> Result<usize> {
        let (m, n) = (self.dim(), self.len());
        if feature.len() != m {
            return Err(DmmError::dim(
                "nearest_code",
                format!("feature of length {} for codes in R^{m}", feature.len()),
            ));
        }
        let data = self.codes.data();
        let mut best = (0, f64::INFINITY);
        for j in 0..n {
            let d: f64 = (0..m)
                .map(|i| {
                    let diff = data[i * n + j] as f64 - feature[i] as f64;
                    diff * diff
                })
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        Ok(best.0)
    }

    /// Nearest code index together with a copy of the code.
    pub fn nearest_code(&self, feature: &[f32]) -> Result<(usize, Vec<f32>)> {
        let j = self.nearest(feature)?;
        Ok((j, self.code(j)))
    }

    /// Exponential-moving-average update from `(code index, feature)` pairs.
    /// Every code is decayed, including unassigned ones, whose value is
    /// therefore left unchanged.
    pub fn ema_update<F: AsRef<[f32]>>(&mut self, assignments: &[(usize, F)]) -> Result<()> {
        let (m, n) = (self.dim(), self.len());
        let mut count = vec![0.0f64; n];
        let mut sums = vec![0.0f64; m * n];
        for (j, feature) in assignments {
            let feature = feature.as_ref();
            if *j >= n {
                return Err(DmmError::Contract(format!("code index {j} out of range {n}")));
            }
            if feature.len() != m {
                return Err(DmmError::dim(
                    "ema_update",
                    format!("feature of length {} for codes in R^{m}", feature.len()),
                ));
            }
            count[*j] += 1.0;
            for (i, &x) in feature.iter().enumerate() {
                sums[i * n + j] += x as f64;
            }
        }
        let kappa = self.kappa as f64;
        for j in 0..n {
            self.counts[j] = (self.counts[j] as f64 * kappa + count[j] * (1.0 - kappa)) as f32;
        }
        let acc = self.accum.data_mut();
        for (k, a) in acc.iter_mut().enumerate() {
            *a = (*a as f64 * kappa + sums[k] * (1.0 - kappa)) as f32;
        }
        let codes = self.codes.data_mut();
        for (k, c) in codes.iter_mut().enumerate() {
            let j = k % n;
            if count[j] > 0.0 {
                *c = acc[k] / self.counts[j];
            }
        }
        // Unassigned columns keep their exact value; acc and n were scaled by
        // the same factor so the ratio is unchanged up to rounding.
        Ok(())
    }

    /// Value of the thresholded covariance penalty.
    pub fn covariance_loss(&self) -> Result<f32> {
        let mut tape = Tape::new();
        let c = tape.constant(self.codes.clone());
        let loss = covariance_loss_on_tape(&mut tape, c, self.tau)?;
        Ok(tape.value(loss).item())
    }

    /// Pairwise inner products between normalized codes, row-major `N × N`.
    pub fn normalized_gram(&self) -> Result<Vec<f64>> {
        normalized_gram(&self.codes)
    }
}

fn normalized_gram(codes: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = codes.dims2()?;
    let norms = crate::ndcore::column_norms(codes);
    if let Some(j) = norms.iter().position(|&v| v == 0.0) {
        return Err(DmmError::DegenerateCode(j));
    }
    let d = codes.data();
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let dot: f64 = (0..m).map(|i| d[i * n + a] as f64 * d[i * n + b] as f64).sum();
            let v = dot / (norms[a] * norms[b]);
            g[a * n + b] = v;
            g[b * n + a] = v;
        }
    }
    Ok(g)
}

/// Records the covariance penalty of the `m × N` code matrix `codes` on the
/// tape: normalize columns, form `C̃ᵀC̃ − I`, drop entries with magnitude at
/// most `tau`, and average the squares of the survivors. With no survivor
/// the result is a constant zero.
pub fn covariance_loss_on_tape(tape: &mut Tape, codes: Var, tau: f32) -> Result<Var> {
    let normalized = tape.normalize_cols(codes)?;
    let nt = tape.transpose(normalized)?;
    let gram = tape.matmul(nt, normalized)?;
    let n = tape.value(gram).shape()[0];
    let eye = tape.constant(Tensor::from_fn(&[n, n], |k| if k / n == k % n { 1.0 } else { 0.0 }));
    let centered = tape.sub(gram, eye)?;
    let mut survivors = 0usize;
    let mask = Tensor::from_fn(&[n, n], |k| {
        let keep = tape.value(centered).data()[k].abs() > tau;
        survivors += keep as usize;
        keep as u8 as f32
    });
    if survivors == 0 {
        return Ok(tape.scalar(0.0));
    }
    let mask = tape.constant(mask);
    let kept = tape.mul(centered, mask)?;
    let sq = tape.square(kept);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / survivors as f32))
}

/// Activity summary for one epoch: number of distinct codes used and the
/// mean `|⟨c̃_i, c̃_j⟩|` over distinct pairs of used codes.
pub fn usage_stats(assignments: &[usize], cb: &Codebook) -> Result<(usize, f64)> {
    let active: BTreeSet<usize> = assignments.iter().copied().collect();
    if active.len() < 2 {
        return Ok((active.len(), 0.0));
    }
    let gram = cb.normalized_gram()?;
    let n = cb.len();
    let active: Vec<usize> = active.into_iter().collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (k, &a) in active.iter().enumerate() {
        for &b in &active[k + 1..] {
            total += gram[a * n + b].abs();
            pairs += 1;
        }
    }
    Ok((active.len(), total / pairs as f64))
}
