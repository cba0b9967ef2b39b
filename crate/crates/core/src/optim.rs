//! Adam with a cosine learning-rate schedule and per-filter update masks.

use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.002;
pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Cosine annealing from `base_lr` to 0 over `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_iters: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_iters: usize) -> Self {
        CosineSchedule {
            base_lr,
            total_iters,
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        if self.total_iters == 0 || iter >= self.total_iters {
            return 0.0;
        }
        0.5 * self.base_lr * (1.0 + (PI * iter as f64 / self.total_iters as f64).cos())
    }
}

/// One contiguous run of parameters belonging to a filter: (tensor index, range).
pub type Segment = (usize, Range<usize>);

/// Filter index -> the segments of the parameter tensors it owns.
pub type FilterMap = Vec<Vec<Segment>>;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub schedule: CosineSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], schedule: CosineSchedule) -> Self {
        OptimizerState {
            first: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
            schedule,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, tensor: usize) -> (&[f64], &[f64]) {
        (&self.first[tensor], &self.second[tensor])
    }

    /// Clears both moments over a filter's segments.
    pub fn zero_filter(&mut self, segments: &[Segment]) {
        for (t, r) in segments {
            self.first[*t][r.clone()].iter_mut().for_each(|v| *v = 0.0);
            self.second[*t][r.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// One Adam update at schedule position `iter`, restricted to filters whose
/// mask entry is `true`. Masked-out parameters and their moments are left
/// untouched.
pub fn adam_step(
    params: &mut [&mut Tensor],
    state: &mut OptimizerState,
    iter: usize,
    filters: &FilterMap,
    mask: &[bool],
) -> Result<()> {
    if mask.len() != filters.len() {
        return Err(Error::Contract(format!(
            "update mask has {} entries for {} filters",
            mask.len(),
            filters.len()
        )));
    }
    if params.len() != state.first.len() {
        return Err(Error::Contract(
            "optimizer state does not match parameter list".into(),
        ));
    }
    state.step += 1;
    let lr = state.schedule.lr(iter);
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (segments, _) in filters.iter().zip(mask).filter(|(_, &m)| m) {
        for (t, r) in segments {
            let tensor = &mut *params[*t];
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Contract("adam_step on a tensor without gradient".into()))?
                [r.clone()]
            .to_vec();
            let m = &mut state.first[*t][r.clone()];
            let v = &mut state.second[*t][r.clone()];
            let p = &mut tensor.data_mut()[r.clone()];
            for i in 0..p.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}
