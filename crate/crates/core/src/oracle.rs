//! Independent reference computations for gradient checks: one-hot Jacobian
//! aggregation, central finite differences, the closed-form sub-threshold
//! LIF chain and structured tensor comparison.

use serde::Serialize;

use crate::autodiff::BackwardOptions;
use crate::blocks::{Network, ProbePoint, ReadAt};
use crate::erf::{make_spatial_stimulus, make_temporal_stimulus, Grid};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronMode};
use crate::tensor::Tensor5;

/// Largest output tensor [`jacobian_aggregate`] will enumerate.
pub const MAX_ORACLE_OUTPUTS: usize = 4096;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Boundaries a Jacobian is taken between: stimulus applied at `stimulus`,
/// adjoint read at `read`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub stimulus: usize,
    pub read: usize,
}

impl Span {
    /// Network output to network input.
    pub fn whole(net: &Network) -> Self {
        Self {
            stimulus: net.probe("output").map(|p| p.boundary).unwrap_or(0),
            read: 0,
        }
    }

    pub fn for_probe(probe: &ProbePoint, read_at: ReadAt) -> Self {
        let read = match read_at {
            ReadAt::NetworkInput => 0,
            ReadAt::StageInput => probe.start,
        };
        Self {
            stimulus: probe.boundary,
            read,
        }
    }
}

/// `Σ_k stimulus[k] · ∂y[k]/∂x`, one backward pass per nonzero stimulus
/// element, accumulated in flat output order.
pub fn jacobian_aggregate(net: &Network, span: Span, stimulus: &Tensor5, input: &Tensor5) -> Result<Tensor5> {
    let fwd = net.forward(input.clone(), span.stimulus)?;
    let out = fwd.boundaries[span.stimulus];
    let read = *fwd
        .boundaries
        .get(span.read)
        .ok_or_else(|| Error::Reference(format!("read boundary {} not evaluated", span.read)))?;
    let out_shape = fwd.tape.shape(out);
    if out_shape.numel() > MAX_ORACLE_OUTPUTS {
        return Err(Error::Size(format!(
            "{} output elements exceed the oracle limit of {MAX_ORACLE_OUTPUTS}",
            out_shape.numel()
        )));
    }
    stimulus.require_shape(out_shape, "oracle stimulus")?;
    let mut acc = Tensor5::zeros(fwd.tape.shape(read));
    for (k, &weight) in stimulus.data().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let one_hot = Tensor5::one_hot(out_shape, k);
        let grads = fwd.tape.backward(&[(out, &one_hot)], BackwardOptions::default())?;
        if let Some(g) = grads.get(read) {
            acc.axpy(weight, g);
        }
    }
    Ok(acc)
}

/// Spatial map by explicit Jacobian enumeration: timestep mean, channel sum.
pub fn brute_force_spatial(net: &Network, span: Span, input: &Tensor5) -> Result<Grid> {
    let out_shape = net.boundary_shape(span.stimulus, input.shape().b);
    let g = jacobian_aggregate(net, span, &make_spatial_stimulus(out_shape), input)?;
    let s = g.shape();
    let mut data = vec![0.0; s.h * s.w];
    for (i, v) in g.data().iter().enumerate() {
        let [_, _, _, h, w] = s.unravel(i);
        data[h * s.w + w] += v;
    }
    data.iter_mut().for_each(|v| *v /= s.t as f64);
    Grid::new(s.h, s.w, data)
}

/// Temporal vector by explicit Jacobian enumeration: `values[τ]` sums the
/// input gradient at timestep `T-1-τ`.
pub fn brute_force_temporal(net: &Network, span: Span, input: &Tensor5) -> Result<Vec<f64>> {
    let out_shape = net.boundary_shape(span.stimulus, input.shape().b);
    let g = jacobian_aggregate(net, span, &make_temporal_stimulus(out_shape), input)?;
    let s = g.shape();
    let mut values = vec![0.0; s.t];
    for (i, v) in g.data().iter().enumerate() {
        values[s.t - 1 - s.unravel(i)[0]] += v;
    }
    Ok(values)
}

/// Central differences of `<stimulus, y>` with respect to every input
/// element. Requires soft-mode neurons.
pub fn finite_difference(net: &Network, span: Span, stimulus: &Tensor5, input: &Tensor5, h: f64) -> Result<Tensor5> {
    if net.ctx().lif.mode == NeuronMode::Spike {
        return Err(Error::Mode(
            "finite differences need soft-mode neurons; spike mode is piecewise constant".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("step {h} outside [1e-7, 1e-3]")));
    }
    if span.read != 0 {
        return Err(Error::Parameter(
            "finite differences perturb the network input only".into(),
        ));
    }
    let objective = |x: &Tensor5| -> Result<f64> {
        let f = net.forward(x.clone(), span.stimulus)?;
        let y = f.tape.value(f.output());
        y.require_shape(stimulus.shape(), "oracle stimulus")?;
        Ok(stimulus.dot(y))
    };
    central_difference(objective, input, h)
}

/// Central differences of a scalar function of a tensor.
pub fn central_difference(f: impl Fn(&Tensor5) -> Result<f64>, input: &Tensor5, h: f64) -> Result<Tensor5> {
    let mut grad = Tensor5::zeros(input.shape());
    let mut x = input.clone();
    for i in 0..input.len() {
        let x0 = x.data()[i];
        x.data_mut()[i] = x0 + h;
        let plus = f(&x)?;
        x.data_mut()[i] = x0 - h;
        let minus = f(&x)?;
        x.data_mut()[i] = x0;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Smallest distance of any pre-reset membrane from a point where the
/// soft-mode neuron is not differentiable.
pub fn kink_clearance(net: &Network, span: Span, input: &Tensor5) -> Result<f64> {
    let f = net.forward(input.clone(), span.stimulus)?;
    Ok(f.tape
        .membranes()
        .flat_map(|(p, m)| m.data().iter().map(move |&v| p.kink_distance(v)))
        .fold(f64::INFINITY, f64::min))
}

/// Influence of `x[T-1-τ]` on `v[T-1]` in a non-firing soft-reset chain.
pub fn lif_chain_closed_form(params: &LifParams, timesteps: usize, tau: usize) -> Result<f64> {
    if tau >= timesteps {
        return Err(Error::Domain(format!(
            "delay {tau} needs at least {} timesteps",
            tau + 1
        )));
    }
    Ok(params.beta.powi(tau as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// Location of the worst element: the worst failing element when the
    /// comparison fails, otherwise the largest absolute difference.
    pub worst_index: [usize; 5],
    pub atol: f64,
    pub rtol: f64,
    /// Every element satisfies `|a-b| <= atol` or `|a-b| / max(|a|,|b|) <= rtol`.
    pub pass: bool,
}

impl std::fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_abs={:.3e} max_rel={:.3e} worst={:?} (atol={:.0e}, rtol={:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_abs_diff,
            self.max_rel_diff,
            self.worst_index,
            self.atol,
            self.rtol
        )
    }
}

pub fn compare(a: &Tensor5, b: &Tensor5, atol: f64, rtol: f64) -> Result<ComparisonReport> {
    b.require_shape(a.shape(), "comparison operand")?;
    let s = a.shape();
    let (mut max_abs, mut max_rel, mut pass) = (0.0f64, 0.0f64, true);
    let (mut worst, mut worst_abs, mut worst_fail) = (0, -1.0, -1.0);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let d = (x - y).abs();
        let scale = x.abs().max(y.abs());
        let rel = if d == 0.0 { 0.0 } else { d / scale };
        max_abs = max_abs.max(d);
        max_rel = max_rel.max(rel);
        let ok = d <= atol || rel <= rtol;
        if !ok && d > worst_fail {
            worst_fail = d;
            worst = i;
        } else if pass && ok && d > worst_abs {
            worst_abs = d;
            worst = i;
        }
        pass &= ok;
    }
    Ok(ComparisonReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        worst_index: s.unravel(worst),
        atol,
        rtol,
        pass,
    })
}

/// [`compare`] for spatial grids.
pub fn compare_grids(a: &Grid, b: &Grid, atol: f64, rtol: f64) -> Result<ComparisonReport> {
    compare(&a.to_tensor(), &b.to_tensor(), atol, rtol)
}

/// [`compare`] for plain vectors.
pub fn compare_vectors(a: &[f64], b: &[f64], atol: f64, rtol: f64) -> Result<ComparisonReport> {
    let shape = |n| crate::tensor::Shape5::new(1, 1, 1, 1, n);
    let ta = Tensor5::from_vec(shape(a.len()), a.to_vec())?;
    let tb = Tensor5::from_vec(shape(b.len()), b.to_vec())?;
    compare(&ta, &tb, atol, rtol)
}
