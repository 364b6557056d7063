//! Reconstruction, commitment, covariance and cross-entropy terms and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{DmmError, Result};
use crate::ndcore::{Reduce, Tape, Tensor, Var, SIGMOID_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cross-entropy weight.
    pub alpha: f32,
    /// Commitment weight.
    pub beta: f32,
    /// Covariance weight.
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.25,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if !ok {
            return Err(DmmError::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub recon: T,
    pub ce: T,
    pub zreg: T,
    pub cov: T,
}

/// `recon + α·ce + β·zreg + γ·cov`, with the cross-entropy dropped during
/// warm-up.
pub fn total_loss(terms: &LossTerms<f32>, w: &LossWeights, warmup: bool) -> f32 {
    let alpha = if warmup { 0.0 } else { w.alpha };
    terms.recon + alpha * terms.ce + w.beta * terms.zreg + w.gamma * terms.cov
}

pub fn total_loss_on_tape(tape: &mut Tape, terms: LossTerms<Var>, w: &LossWeights, warmup: bool) -> Result<Var> {
    let alpha = if warmup { 0.0 } else { w.alpha };
    let ce = tape.scale(terms.ce, alpha);
    let zreg = tape.scale(terms.zreg, w.beta);
    let cov = tape.scale(terms.cov, w.gamma);
    let t = tape.add(terms.recon, ce)?;
    let t = tape.add(t, zreg)?;
    tape.add(t, cov)
}

/// Mean binary cross-entropy with predictions clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn recon_loss(y_hat: &[f32], y: &[f32]) -> Result<f32> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(DmmError::dim(
            "recon_loss",
            format!("{} predictions vs {} targets", y_hat.len(), y.len()),
        ));
    }
    let total: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP) as f64;
            -(t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / y.len() as f64) as f32)
}

/// Batched binary cross-entropy (`B × P` predictions against constant
/// targets), averaged over samples. With `log_form` every per-sample
/// cross-entropy is passed through `ln` before averaging.
pub fn recon_loss_on_tape(tape: &mut Tape, y_hat: Var, targets: &Tensor, log_form: bool) -> Result<Var> {
    if tape.value(y_hat).shape() != targets.shape() {
        return Err(DmmError::dim(
            "recon_loss",
            format!("{:?} vs {:?}", tape.value(y_hat).shape(), targets.shape()),
        ));
    }
    let p = tape.clamp(y_hat, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP);
    let one = tape.scalar(1.0);
    let q = tape.sub(one, p)?;
    let log_p = tape.log(p);
    let log_q = tape.log(q);
    let y = tape.constant(targets.clone());
    let not_y = tape.constant(Tensor::from_fn(targets.shape(), |k| 1.0 - targets.data()[k]));
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let per_sample = tape.reduce(Reduce::Mean, ll, Some(1))?;
    let per_sample = tape.scale(per_sample, -1.0);
    let per_sample = if log_form { tape.log(per_sample) } else { per_sample };
    Ok(tape.mean(per_sample))
}

/// `‖z - code‖²`.
pub fn zreg_loss(z: &[f32], code: &[f32]) -> Result<f32> {
    if z.len() != code.len() {
        return Err(DmmError::dim("zreg_loss", format!("{} vs {}", z.len(), code.len())));
    }
    Ok(z.iter()
        .zip(code)
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>() as f32)
}

/// Batched commitment term: mean over rows of `‖z_i - sg(code_i)‖²`. The
/// codes enter as a constant, so only `z` receives gradient.
pub fn zreg_on_tape(tape: &mut Tape, z: Var, codes: &Tensor) -> Result<Var> {
    if tape.value(z).shape() != codes.shape() {
        return Err(DmmError::dim(
            "zreg_loss",
            format!("{:?} vs {:?}", tape.value(z).shape(), codes.shape()),
        ));
    }
    let rows = codes.shape()[0];
    let c = tape.constant(codes.clone());
    let d = tape.sub(z, c)?;
    let sq = tape.square(d);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::LN_2;

    #[test]
    fn recon_examples() {
        let perfect = recon_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(perfect > 0.0 && perfect < 1e-6);
        assert!((recon_loss(&[0.5; 8], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap() - LN_2).abs() < 1e-6);
        assert!((recon_loss(&[0.25], &[1.0]).unwrap() - 4f32.ln()).abs() < 1e-6);
        assert!(recon_loss(&[0.5; 2], &[1.0; 3]).is_err());
    }

    #[test]
    fn recon_tape_agrees() {
        let pred = [0.2f32, 0.7, 0.9, 0.4, 0.5, 0.01];
        let tgt = [0.0f32, 1.0, 1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.param(&Tensor::matrix(2, 3, pred.to_vec()).unwrap());
        let targets = Tensor::matrix(2, 3, tgt.to_vec()).unwrap();
        let l = recon_loss_on_tape(&mut tape, p, &targets, false).unwrap();
        assert!((tape.value(l).item() - recon_loss(&pred, &tgt).unwrap()).abs() < 1e-6);

        let l = recon_loss_on_tape(&mut tape, p, &targets, true).unwrap();
        let want = (recon_loss(&pred[..3], &tgt[..3]).unwrap().ln() + recon_loss(&pred[3..], &tgt[3..]).unwrap().ln()) / 2.0;
        assert!((tape.value(l).item() - want).abs() < 1e-6);
    }

    #[test]
    fn zreg_examples() {
        assert_eq!(zreg_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(zreg_loss(&[1.0, 0.0, 0.0], &[0.0; 3]).unwrap(), 1.0);
        assert!((zreg_loss(&[0.3, 0.4], &[0.0, 0.0]).unwrap() - 0.25).abs() < 1e-7);
        assert!(zreg_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn zreg_leaves_codes_without_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(&Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let codes = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let l = zreg_on_tape(&mut tape, z, &codes).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossTerms::default(), &w, false), 0.0);

        let terms = LossTerms {
            recon: 0.5,
            ce: LN_2,
            zreg: 0.04,
            cov: 0.25,
        };
        assert!((total_loss(&terms, &w, false) - 1.2056).abs() < 1e-4);
        let diff = total_loss(&terms, &w, false) - total_loss(&terms, &w, true);
        assert!((diff - LN_2).abs() < 1e-6);
    }

    #[test]
    fn weights_must_be_nonnegative() {
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
