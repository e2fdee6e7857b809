//! Leaky integrate-and-fire neurons unrolled over the time axis.
//!
//! Per timestep, with the membrane after reset `h[0] = 0`:
//!
//! ```text
//! v[t] = h[t-1] + x[t]                          charge
//! s[t] = Θ(v[t] - θ)                            fire (Θ(0) = 1)
//! h[t] = β v[t] - θ s[t]        (soft reset)
//!      = v[t] (1 - s[t])        (hard reset)
//! ```
//!
//! The backward pass replaces `∂s/∂v` with the rectangle surrogate
//! `(1/a)·1[|v - θ| < a/2]` and runs the full recurrence, including the
//! reset path through `s[t]`. In [`NeuronMode::Soft`] the forward output is
//! the clamped ramp `clamp((v - θ)/a + 1/2, 0, 1)`, whose derivative is the
//! same rectangle, so finite differences can check the surrogate gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Relative slack on the firing comparison. Membranes that reach the
/// threshold in exact arithmetic can land one ulp short after rounding
/// (0.6 accumulated five times with soft reset ends at 0.9999999999999999).
pub const FIRE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reset {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronMode {
    /// Heaviside forward, surrogate backward.
    #[default]
    Spike,
    /// Clamped-linear forward, exactly differentiable almost everywhere.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub beta: f64,
    pub theta: f64,
    pub reset: Reset,
    /// Surrogate window width.
    pub a: f64,
    pub mode: NeuronMode,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            theta: 1.0,
            reset: Reset::Soft,
            a: 1.0,
            mode: NeuronMode::Spike,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Parameter(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Parameter(format!("theta must be > 0, got {}", self.theta)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Parameter(format!(
                "surrogate width a must be > 0, got {}",
                self.a
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn fire(&self, v: f64) -> f64 {
        match self.mode {
            NeuronMode::Spike => {
                if v - self.theta >= -FIRE_TOLERANCE * self.theta.max(1.0) {
                    1.0
                } else {
                    0.0
                }
            }
            NeuronMode::Soft => ((v - self.theta) / self.a + 0.5).clamp(0.0, 1.0),
        }
    }

    /// Rectangle surrogate for `∂s/∂v`.
    #[inline]
    pub fn surrogate(&self, v: f64) -> f64 {
        if (v - self.theta).abs() < self.a / 2.0 {
            1.0 / self.a
        } else {
            0.0
        }
    }

    #[inline]
    fn reset(&self, v: f64, s: f64) -> f64 {
        match self.reset {
            Reset::Soft => self.beta * v - self.theta * s,
            Reset::Hard => v * (1.0 - s),
        }
    }

    /// Distance of `v` to the nearest edge of the surrogate window.
    pub fn kink_distance(&self, v: f64) -> f64 {
        ((v - self.theta).abs() - self.a / 2.0).abs()
    }
}

/// Elementwise surrogate gradient of a membrane tensor.
pub fn surrogate_grad(v: &Tensor5, params: &LifParams) -> Tensor5 {
    v.map(|x| params.surrogate(x))
}

/// Result of unrolling a LIF layer: spikes plus the pre-reset membranes
/// needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LifTrace {
    pub spikes: Tensor5,
    pub membrane: Tensor5,
}

pub fn lif_unroll(x: &Tensor5, params: &LifParams) -> Result<LifTrace> {
    let shape = x.shape();
    if shape.t == 0 {
        return Err(Error::Shape("LIF input has no timesteps".into()));
    }
    params.validate()?;
    let step = shape.step();
    let mut spikes = Tensor5::zeros(shape);
    let mut membrane = Tensor5::zeros(shape);
    let mut h = vec![0.0; step];
    let xd = x.data();
    for t in 0..shape.t {
        let range = t * step..(t + 1) * step;
        let vs = &mut membrane.data_mut()[range.clone()];
        for ((v, hv), xv) in vs.iter_mut().zip(&h).zip(&xd[range.clone()]) {
            *v = hv + xv;
        }
        let vs = &membrane.data()[range.clone()];
        let ss = &mut spikes.data_mut()[range];
        for ((s, hv), v) in ss.iter_mut().zip(h.iter_mut()).zip(vs) {
            *s = params.fire(*v);
            *hv = params.reset(*v, *s);
        }
    }
    Ok(LifTrace { spikes, membrane })
}

/// Backpropagation through time for [`lif_unroll`]: maps the spike adjoint
/// `ds` to the input adjoint.
pub fn lif_backward(trace: &LifTrace, params: &LifParams, ds: &Tensor5) -> Tensor5 {
    lif_backward_parts(&trace.spikes, &trace.membrane, params, ds)
}

pub(crate) fn lif_backward_parts(spikes: &Tensor5, membrane: &Tensor5, params: &LifParams, ds: &Tensor5) -> Tensor5 {
    let shape: Shape5 = ds.shape();
    let step = shape.step();
    let mut dx = Tensor5::zeros(shape);
    // adjoint of h[t], carried backwards
    let mut dh = vec![0.0; step];
    let v = membrane.data();
    let s = spikes.data();
    let dsd = ds.data();
    for t in (0..shape.t).rev() {
        let base = t * step;
        let dxs = &mut dx.data_mut()[base..base + step];
        for i in 0..step {
            let vi = v[base + i];
            let si = s[base + i];
            let sg = params.surrogate(vi);
            let (dh_dv, dh_ds) = match params.reset {
                Reset::Soft => (params.beta, -params.theta),
                Reset::Hard => (1.0 - si, -vi),
            };
            let dv = (dsd[base + i] + dh[i] * dh_ds) * sg + dh[i] * dh_dv;
            dxs[i] = dv;
            dh[i] = dv;
        }
    }
    dx
}
