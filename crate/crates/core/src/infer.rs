//! Test-time prediction: probabilities over every code, threshold, decode
//! the survivors.

use crate::error::{DmmError, Result};
use crate::etf::probabilities;
use crate::image::{Image, Mask};
use crate::networks::DmmModel;

pub const DEFAULT_EPSILON: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictedMode {
    pub code: usize,
    pub probability: f32,
    pub mask: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Survivors by non-increasing probability, ties by code index.
    pub items: Vec<PredictedMode>,
    /// Head output over all codes, before thresholding.
    pub probabilities: Vec<f32>,
}

impl Prediction {
    /// Number of outputs for this input.
    pub fn n_x(&self) -> usize {
        self.items.len()
    }

    /// Copy with the survivors' probabilities rescaled to sum to 1.
    pub fn renormalized(&self) -> Prediction {
        let total: f64 = self.items.iter().map(|m| m.probability as f64).sum();
        let mut out = self.clone();
        for m in &mut out.items {
            m.probability = (m.probability as f64 / total) as f32;
        }
        out
    }

    /// Binarized masks with their probabilities.
    pub fn binarized(&self, threshold: f32) -> Vec<(Mask, f32)> {
        self.items
            .iter()
            .map(|m| (binarize(&m.mask, threshold), m.probability))
            .collect()
    }
}

/// Codes that survive the threshold, ordered by non-increasing probability
/// and then by index.
pub fn surviving_codes(probabilities: &[f32], epsilon: f32) -> Result<Vec<usize>> {
    let n = probabilities.len();
    if !(epsilon > 0.0 && (epsilon as f64) < 1.0 / n as f64) {
        return Err(DmmError::Config(format!(
            "epsilon {epsilon} must lie in (0, 1/{n})"
        )));
    }
    let mut keep: Vec<usize> = (0..n).filter(|&j| probabilities[j] >= epsilon).collect();
    keep.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    if keep.is_empty() {
        return Err(DmmError::Contract("no code reaches the probability threshold".into()));
    }
    Ok(keep)
}

/// Every code with probability at least `epsilon`, decoded from the shared
/// latent. Probabilities are reported as produced by the head.
pub fn predict(model: &DmmModel, x: &Image, epsilon: f32) -> Result<Prediction> {
    let (l, h) = model.encode_input(x)?;
    let probs = probabilities(&model.classifier, &h)?;
    let keep = surviving_codes(&probs, epsilon)?;
    let codes: Vec<Vec<f32>> = keep.iter().map(|&j| model.codebook.code(j)).collect();
    let masks = model.generate(&l, &codes)?;
    let items = keep
        .into_iter()
        .zip(masks)
        .map(|(code, mask)| PredictedMode {
            code,
            probability: probs[code],
            mask,
        })
        .collect();
    Ok(Prediction {
        items,
        probabilities: probs,
    })
}

/// Elementwise `value >= threshold`.
pub fn binarize(estimate: &Image, threshold: f32) -> Mask {
    estimate.binarize(threshold)
}
