//! Evaluation metrics: IoU, squared generalized energy distance between
//! weighted mask sets, and per-mode probability statistics.

use crate::error::{DmmError, Result};
use crate::image::Mask;

const WEIGHT_TOLERANCE: f64 = 1e-6;

/// `|a ∩ b| / |a ∪ b|`, with two empty masks scoring 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(DmmError::dim(
            "iou",
            format!("{}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Masks with probabilities summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMaskSet {
    masks: Vec<Mask>,
    weights: Vec<f64>,
}

impl WeightedMaskSet {
    pub fn new(masks: Vec<Mask>, weights: Vec<f64>) -> Result<Self> {
        if masks.is_empty() || masks.len() != weights.len() {
            return Err(DmmError::Contract(format!(
                "{} masks with {} weights",
                masks.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DmmError::Contract("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(DmmError::Contract(format!("weights sum to {total}, not 1")));
        }
        let (h, w) = (masks[0].height(), masks[0].width());
        if masks.iter().any(|m| (m.height(), m.width()) != (h, w)) {
            return Err(DmmError::dim("weighted mask set", "masks differ in shape"));
        }
        Ok(Self { masks, weights })
    }

    /// Equal weight `1 / |masks|` on every mask.
    pub fn uniform(masks: Vec<Mask>) -> Result<Self> {
        let w = 1.0 / masks.len().max(1) as f64;
        let n = masks.len();
        Self::new(masks, vec![w; n])
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// `Σ Σ p_a p_b (1 - IoU(a, b))` over all ordered pairs, self-pairs
/// included.
fn expected_distance(a: &WeightedMaskSet, b: &WeightedMaskSet) -> Result<f64> {
    let mut total = 0.0;
    for (ma, &wa) in a.masks.iter().zip(&a.weights) {
        for (mb, &wb) in b.masks.iter().zip(&b.weights) {
            total += wa * wb * (1.0 - iou(ma, mb)?);
        }
    }
    Ok(total)
}

/// Squared generalized energy distance with `d = 1 - IoU`. Not clamped;
/// it can be slightly negative for some weighted sets.
pub fn ged_squared(labels: &WeightedMaskSet, preds: &WeightedMaskSet) -> Result<f64> {
    Ok(2.0 * expected_distance(labels, preds)?
        - expected_distance(labels, labels)?
        - expected_distance(preds, preds)?)
}

/// Per-mode summary over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Probability mass assigned to each mode, one row per entry.
    pub per_entry: Vec<Vec<f64>>,
    /// Mean IoU between each predicted mask and the mode it matched.
    pub mean_matched_iou: f64,
}

/// Matches every predicted mask to the ground-truth mode of highest IoU
/// (ties to the lower mode) and accumulates its probability on that mode.
/// Modes nobody matched get 0 for that entry. Population standard
/// deviation across entries.
pub fn mode_stats(entries: &[(Vec<(Mask, f64)>, Vec<Mask>)]) -> Result<ModeStats> {
    let modes = match entries.first() {
        Some((_, m)) => m.len(),
        None => return Err(DmmError::Contract("mode_stats needs at least one entry".into())),
    };
    if modes == 0 || entries.iter().any(|(_, m)| m.len() != modes) {
        return Err(DmmError::Contract("every entry must carry the same nonzero number of modes".into()));
    }
    let mut per_entry = Vec::with_capacity(entries.len());
    let (mut iou_sum, mut matched) = (0.0, 0usize);
    for (preds, truth) in entries {
        let mut row = vec![0.0; modes];
        for (mask, p) in preds {
            let mut best = (0, f64::NEG_INFINITY);
            for (k, t) in truth.iter().enumerate() {
                let v = iou(mask, t)?;
                if v > best.1 {
                    best = (k, v);
                }
            }
            row[best.0] += p;
            iou_sum += best.1;
            matched += 1;
        }
        per_entry.push(row);
    }
    let n = entries.len() as f64;
    let mean: Vec<f64> = (0..modes).map(|k| per_entry.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std = (0..modes)
        .map(|k| (per_entry.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(ModeStats {
        mean,
        std,
        per_entry,
        mean_matched_iou: if matched == 0 { 0.0 } else { iou_sum / matched as f64 },
    })
}
