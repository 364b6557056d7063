//! Adam over a fixed list of parameter slots.

use crate::error::{DmmError, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    /// Zeroed state for parameters of the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub(crate) fn from_parts(step: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(DmmError::dim("adam", "moment buffers disagree in shape"));
        }
        Ok(Self {
            step,
            first,
            second,
            ..Self::new(&[])
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> usize {
        self.first.len()
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// Advances the step counter. Call once per optimizer step, before the
    /// slot updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected update of slot `slot`.
    pub fn update(&mut self, slot: usize, lr: f32, param: &mut [f32], grad: &[f32]) -> Result<()> {
        let (m, v) = match (self.first.get_mut(slot), self.second.get_mut(slot)) {
            (Some(m), Some(v)) => (m, v),
            _ => return Err(DmmError::Contract(format!("optimizer slot {slot} does not exist"))),
        };
        if param.len() != m.len() || grad.len() != m.len() {
            return Err(DmmError::dim(
                "adam",
                format!("slot {slot} holds {} values, got {} / {}", m.len(), param.len(), grad.len()),
            ));
        }
        if self.step == 0 {
            return Err(DmmError::Contract("begin_step must precede update".into()));
        }
        let t = self.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let step_size = (lr as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + self.eps);
        }
        Ok(())
    }
}
