//! Adam with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators, one vector per parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let first: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|b| vec![0.0; b.values.len()])
            .collect();
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One update: `p -= lr * wd * p`, then the bias-corrected Adam delta.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    let gblocks = grads.blocks();
    let mut pblocks = params.blocks_mut();
    if gblocks.len() != pblocks.len() || state.first.len() != pblocks.len() {
        return Err(Error::ShapeMismatch {
            expected: (pblocks.len(), 0),
            actual: (gblocks.len(), state.first.len()),
        });
    }
    for ((p, g), m) in pblocks.iter().zip(&gblocks).zip(&state.first) {
        if p.values.len() != g.values.len() || p.values.len() != m.len() {
            return Err(Error::ShapeMismatch {
                expected: p.shape,
                actual: g.shape,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(BETA1, t as f64);
    let bc2 = 1.0 - libm::pow(BETA2, t as f64);
    for (bi, (p, g)) in pblocks.iter_mut().zip(&gblocks).enumerate() {
        let m = &mut state.first[bi];
        let v = &mut state.second[bi];
        for k in 0..p.values.len() {
            let gk = g.values[k];
            let mut w = p.values[k];
            w -= learning_rate * weight_decay * w;
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            w -= learning_rate * mhat / (libm::sqrt(vhat) + EPSILON);
            p.values[k] = w;
        }
    }
    Ok(())
}
