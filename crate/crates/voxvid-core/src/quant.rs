//! Quantization: additive-noise simulation for training, hard rounding for
//! coding and eval.
//!
//! Training simulates the quantizer with per-element uniform noise
//! `u ~ U(-1/2, 1/2)`: the rate path sees `v/q + u` and the render path its
//! dequantized form `q * (v/q + u)`. Both are smooth in `v` and `q`
//! (d/dv = 1, d/dq = u for the render path), so the gradient suite can check
//! them against finite differences. Coding and eval use
//! `round(v/q)` / `q * round(v/q)`; the train/test gap this opens is the
//! standard one and is accepted.

use alloc::vec::Vec;

use crate::entropy::{ALPHABET_MAX, ALPHABET_MIN};
use crate::error::{CoreError, Result};
use crate::math::flt;

/// Rate-path simulated quantization of one value.
#[inline]
pub fn sim_quantize(v: f64, q: f64, u: f64) -> f64 {
    v / q + u
}

/// Render-path value for a simulated quantization: `q` times the rate-path
/// value.
#[inline]
pub fn dequantize_sim(q: f64, sim: f64) -> f64 {
    q * sim
}

/// Hard quantization to the coder alphabet. Rounds half away from zero.
#[inline]
pub fn quantize_hard(v: f64, q: f64) -> i32 {
    let r = flt::round(v / q);
    r.clamp(ALPHABET_MIN as f64, ALPHABET_MAX as f64) as i32
}

#[inline]
pub fn dequantize_int(i: i32, q: f64) -> f64 {
    q * i as f64
}

/// Slice form of the training-mode simulation: returns the rate-path values
/// `v/q + u` and the render-path values `q * (v/q + u)`.
pub fn simulate_quantization(
    values: &[f64],
    q: f64,
    mut noise: impl FnMut(usize) -> f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(CoreError::InvalidConfig("quantization step must be positive".into()));
    }
    let mut rate = Vec::with_capacity(values.len());
    let mut render = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let s = sim_quantize(v, q, noise(i));
        rate.push(s);
        render.push(dequantize_sim(q, s));
    }
    Ok((rate, render))
}

/// Eval-mode quantization of a slice: hard integers plus their dequantized
/// values.
pub fn quantize_hard_slice(values: &[f64], q: f64) -> Result<(Vec<i32>, Vec<f64>)> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(CoreError::InvalidConfig("quantization step must be positive".into()));
    }
    let ints: Vec<i32> = values.iter().map(|&v| quantize_hard(v, q)).collect();
    let deq = ints.iter().map(|&i| dequantize_int(i, q)).collect();
    Ok((ints, deq))
}
