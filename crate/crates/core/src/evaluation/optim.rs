use std::collections::BTreeMap;

use crate::error::{shape_err, FgstError, Result};
use crate::numerics::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Step size that halves every `halve_every` iterations (never when `None`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub halve_every: Option<usize>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, halve_every: None }
    }

    pub fn at(&self, iteration: usize) -> f64 {
        match self.halve_every {
            Some(n) if n > 0 => self.base * 0.5f64.powi((iteration / n) as i32),
            _ => self.base,
        }
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.len()])).collect();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update. Rejects the whole step, leaving parameters
/// and state untouched, if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| FgstError::InvalidArgument(format!("no gradient for {name}")))?;
        if g.len() != t.len() || state.m.get(name).map(Vec::len) != Some(t.len()) {
            return shape_err(format!("gradient or moment size mismatch for {name}"));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(FgstError::NonFinite(format!("gradient of {name}[{bad}]")));
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
