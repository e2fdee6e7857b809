//! Tape-based reverse-mode differentiation over [`Tensor5`] values.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so every node's inputs have smaller ids and the reverse id order is
//! a valid topological order for the adjoint sweep. The tape is immutable
//! once recorded; any number of backward passes with different output
//! stimuli may run over it.

pub mod kernels;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::neuron::{lif_backward_parts, lif_unroll, LifParams, LifTrace};
use crate::tensor::{Shape5, Tensor5};

pub use kernels::{BnAxes, ConvGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A named weight tensor of arbitrary rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "parameter data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![value; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub type ParamRef = Arc<Param>;

/// Batch-normalization settings carried by each BN node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub eps: f64,
    pub axes: BnAxes,
    /// Propagate gradients through the batch statistics.
    pub stats_grad: bool,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            axes: BnAxes::Folded,
            stats_grad: true,
        }
    }
}

#[derive(Debug)]
pub enum Op {
    Input,
    Constant,
    Conv2d {
        geometry: ConvGeometry,
        weight: usize,
    },
    Linear {
        weight: usize,
        bias: Option<usize>,
        c_out: usize,
    },
    BatchNorm {
        config: BnConfig,
        gamma: usize,
        beta: usize,
        stats: kernels::BnStats,
    },
    Add,
    Scale(f64),
    Hadamard,
    SpatialSum,
    Lif {
        params: LifParams,
        membrane: Tensor5,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Hadamard => "hadamard",
            Op::SpatialSum => "spatial_sum",
            Op::Lif { .. } => "lif",
        }
    }
}

#[derive(Debug)]
pub struct GraphNode {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor5,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<GraphNode>,
    params: Vec<ParamRef>,
    input_ids: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&GraphNode> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Reference(format!("node {id} is not on the tape")))
    }

    pub fn value(&self, id: NodeId) -> &Tensor5 {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape5 {
        self.nodes[id.0].value.shape()
    }

    pub fn input_ids(&self) -> &[NodeId] {
        &self.input_ids
    }

    pub fn params(&self) -> &[ParamRef] {
        &self.params
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor5) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            return Err(Error::Numeric {
                node: id.0,
                message: format!("non-finite forward value in {}", op.kind()),
            });
        }
        self.nodes.push(GraphNode { id, op, inputs, value });
        Ok(id)
    }

    fn register(&mut self, p: &ParamRef) -> usize {
        if let Some(i) = self.params.iter().position(|q| Arc::ptr_eq(q, p)) {
            return i;
        }
        self.params.push(Arc::clone(p));
        self.params.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        self.node(id).map(|_| ())
    }

    /// Registers a network input; its adjoint is reported by
    /// [`backward_from_stimulus`].
    pub fn input(&mut self, value: Tensor5) -> Result<NodeId> {
        value.shape().validate()?;
        let id = self.push(Op::Input, vec![], value)?;
        self.input_ids.push(id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor5) -> Result<NodeId> {
        self.push(Op::Constant, vec![], value)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: &ParamRef,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<NodeId> {
        self.check(x)?;
        let xs = self.shape(x);
        if weight.shape.len() != 4 || weight.shape[2] != weight.shape[3] {
            return Err(Error::Dimension(format!(
                "conv weight {} must be (c_out, c_in/groups, k, k), got {:?}",
                weight.name, weight.shape
            )));
        }
        let (c_out, cig, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
        if groups == 0 || !xs.c.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(Error::Dimension(format!(
                "groups {groups} must divide input channels {} and output channels {c_out}",
                xs.c
            )));
        }
        if cig * groups != xs.c {
            return Err(Error::Dimension(format!(
                "conv weight {} expects {} input channels, input has {}",
                weight.name,
                cig * groups,
                xs.c
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("stride must be positive".into()));
        }
        let geometry = ConvGeometry {
            c_in: xs.c,
            c_out,
            kernel: k,
            stride,
            padding,
            groups,
        };
        let ys = geometry.out_shape(xs).ok_or_else(|| {
            Error::Dimension(format!(
                "conv {} with kernel {k}, stride {stride}, padding {padding} has empty output on {}x{} input",
                weight.name, xs.h, xs.w
            ))
        })?;
        let mut y = Tensor5::zeros(ys);
        kernels::conv2d_forward(&geometry, xs, self.value(x).data(), &weight.data, ys, y.data_mut());
        let w = self.register(weight);
        self.push(Op::Conv2d { geometry, weight: w }, vec![x], y)
    }

    /// Depthwise convolution: one `k x k` filter per channel, weight `(C, 1, k, k)`.
    pub fn dwconv(&mut self, x: NodeId, weight: &ParamRef, stride: usize, padding: usize) -> Result<NodeId> {
        self.check(x)?;
        let c = self.shape(x).c;
        if weight.shape.len() != 4 || weight.shape[0] != c || weight.shape[1] != 1 {
            return Err(Error::Dimension(format!(
                "depthwise weight {} must be ({c}, 1, k, k), got {:?}",
                weight.name, weight.shape
            )));
        }
        self.conv2d(x, weight, stride, padding, c)
    }

    /// Per-pixel fully connected map over channels; weight `(c_out, c_in)`.
    pub fn linear(&mut self, x: NodeId, weight: &ParamRef, bias: Option<&ParamRef>) -> Result<NodeId> {
        self.check(x)?;
        let xs = self.shape(x);
        if weight.shape.len() != 2 || weight.shape[1] != xs.c {
            return Err(Error::Dimension(format!(
                "linear weight {} must be (c_out, {}), got {:?}",
                weight.name, xs.c, weight.shape
            )));
        }
        let c_out = weight.shape[0];
        if let Some(b) = bias {
            if b.shape != [c_out] {
                return Err(Error::Dimension(format!(
                    "bias {} must have shape [{c_out}], got {:?}",
                    b.name, b.shape
                )));
            }
        }
        let ys = xs.with_channels(c_out);
        let mut y = Tensor5::zeros(ys);
        kernels::linear_forward(
            xs,
            self.value(x).data(),
            &weight.data,
            bias.map(|b| b.data.as_slice()),
            c_out,
            y.data_mut(),
        );
        let w = self.register(weight);
        let b = bias.map(|b| self.register(b));
        self.push(
            Op::Linear {
                weight: w,
                bias: b,
                c_out,
            },
            vec![x],
            y,
        )
    }

    pub fn batchnorm(&mut self, x: NodeId, gamma: &ParamRef, beta: &ParamRef, config: BnConfig) -> Result<NodeId> {
        self.check(x)?;
        if !(config.eps > 0.0) {
            return Err(Error::Parameter(format!(
                "batchnorm eps must be > 0, got {}",
                config.eps
            )));
        }
        let xs = self.shape(x);
        for p in [gamma, beta] {
            if p.shape != [xs.c] {
                return Err(Error::Dimension(format!(
                    "batchnorm parameter {} must have shape [{}], got {:?}",
                    p.name, xs.c, p.shape
                )));
            }
        }
        let xv = self.value(x).data();
        let stats = kernels::batchnorm_stats(xs, xv, config.axes, config.eps);
        let mut y = Tensor5::zeros(xs);
        kernels::batchnorm_forward(xs, xv, &stats, config.axes, &gamma.data, &beta.data, y.data_mut());
        let g = self.register(gamma);
        let b = self.register(beta);
        self.push(
            Op::BatchNorm {
                config,
                gamma: g,
                beta: b,
                stats,
            },
            vec![x],
            y,
        )
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(Op::Add, vec![a, b], y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.check(a)?;
        let y = self.value(a).map(|v| v * k);
        self.push(Op::Scale(k), vec![a], y)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "hadamard")?;
        let mut y = self.value(a).clone();
        for (u, v) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *u *= v;
        }
        self.push(Op::Hadamard, vec![a, b], y)
    }

    /// Sum over the spatial plane, broadcast back to every position.
    pub fn spatial_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let xs = self.shape(a);
        let mut y = Tensor5::zeros(xs);
        kernels::spatial_sum_broadcast(xs, self.value(a).data(), y.data_mut());
        self.push(Op::SpatialSum, vec![a], y)
    }

    /// Unrolled LIF layer over the time axis of `x`.
    pub fn lif(&mut self, x: NodeId, params: &LifParams) -> Result<NodeId> {
        self.check(x)?;
        let LifTrace { spikes, membrane } = lif_unroll(self.value(x), params)?;
        self.push(
            Op::Lif {
                params: *params,
                membrane,
            },
            vec![x],
            spikes,
        )
    }

    /// Pre-reset membranes of every LIF node, with their parameters.
    pub fn membranes(&self) -> impl Iterator<Item = (&LifParams, &Tensor5)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Lif { params, membrane } => Some((params, membrane)),
            _ => None,
        })
    }

    /// Reverse sweep from the given `(node, adjoint)` seeds.
    pub fn backward(&self, seeds: &[(NodeId, &Tensor5)], opts: BackwardOptions) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor5>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (id, g) in seeds {
            let node = self.node(*id)?;
            g.require_shape(node.value.shape(), "stimulus")?;
            match &mut adj[id.0] {
                Some(a) => a.add_assign(g),
                slot => *slot = Some((*g).clone()),
            }
            top = top.max(id.0 + 1);
        }
        let mut pgrads: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];

        for i in (0..top).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !dy.all_finite() {
                return Err(Error::Numeric {
                    node: i,
                    message: format!("non-finite adjoint at {} node", self.nodes[i].op.kind()),
                });
            }
            let node = &self.nodes[i];
            self.propagate(node, &dy, &mut adj, &mut pgrads, opts)?;
            adj[i] = Some(dy);
        }
        Ok(Gradients {
            adjoints: adj,
            params: pgrads,
        })
    }

    fn propagate(
        &self,
        node: &GraphNode,
        dy: &Tensor5,
        adj: &mut [Option<Tensor5>],
        pgrads: &mut [Option<Vec<f64>>],
        opts: BackwardOptions,
    ) -> Result<()> {
        let slot = |adj: &mut [Option<Tensor5>], id: NodeId| -> Tensor5 {
            adj[id.0].take().unwrap_or_else(|| Tensor5::zeros(self.shape(id)))
        };
        let pslot = |pgrads: &mut [Option<Vec<f64>>], p: usize| -> Vec<f64> {
            pgrads[p].take().unwrap_or_else(|| vec![0.0; self.params[p].numel()])
        };
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Conv2d { geometry, weight } => {
                let x = node.inputs[0];
                let mut dx = slot(adj, x);
                let mut dw = opts.param_grads.then(|| pslot(pgrads, *weight));
                kernels::conv2d_backward(
                    geometry,
                    self.shape(x),
                    self.value(x).data(),
                    &self.params[*weight].data,
                    dy.shape(),
                    dy.data(),
                    Some(dx.data_mut()),
                    dw.as_deref_mut(),
                );
                adj[x.0] = Some(dx);
                if let Some(dw) = dw {
                    pgrads[*weight] = Some(dw);
                }
            }
            Op::Linear { weight, bias, c_out } => {
                let x = node.inputs[0];
                let mut dx = slot(adj, x);
                let mut dw = opts.param_grads.then(|| pslot(pgrads, *weight));
                let mut db = match (opts.param_grads, bias) {
                    (true, Some(b)) => Some(pslot(pgrads, *b)),
                    _ => None,
                };
                kernels::linear_backward(
                    self.shape(x),
                    self.value(x).data(),
                    &self.params[*weight].data,
                    *c_out,
                    dy.data(),
                    Some(dx.data_mut()),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                adj[x.0] = Some(dx);
                if let Some(dw) = dw {
                    pgrads[*weight] = Some(dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    pgrads[*b] = Some(db);
                }
            }
            Op::BatchNorm {
                config,
                gamma,
                beta,
                stats,
            } => {
                let x = node.inputs[0];
                let mut dx = slot(adj, x);
                let mut dg = opts.param_grads.then(|| pslot(pgrads, *gamma));
                let mut db = opts.param_grads.then(|| pslot(pgrads, *beta));
                kernels::batchnorm_backward(
                    self.shape(x),
                    self.value(x).data(),
                    stats,
                    config.axes,
                    &self.params[*gamma].data,
                    config.stats_grad,
                    dy.data(),
                    Some(dx.data_mut()),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                adj[x.0] = Some(dx);
                if let Some(dg) = dg {
                    pgrads[*gamma] = Some(dg);
                }
                if let Some(db) = db {
                    pgrads[*beta] = Some(db);
                }
            }
            Op::Add => {
                for &x in &node.inputs {
                    let mut dx = slot(adj, x);
                    dx.add_assign(dy);
                    adj[x.0] = Some(dx);
                }
            }
            Op::Scale(k) => {
                let x = node.inputs[0];
                let mut dx = slot(adj, x);
                dx.axpy(*k, dy);
                adj[x.0] = Some(dx);
            }
            Op::Hadamard => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                // read both operands before touching the slots: a may equal b
                let ga: Vec<f64> = dy.data().iter().zip(self.value(b).data()).map(|(d, v)| d * v).collect();
                let gb: Vec<f64> = dy.data().iter().zip(self.value(a).data()).map(|(d, v)| d * v).collect();
                for (x, g) in [(a, ga), (b, gb)] {
                    let mut dx = slot(adj, x);
                    for (u, v) in dx.data_mut().iter_mut().zip(g) {
                        *u += v;
                    }
                    adj[x.0] = Some(dx);
                }
            }
            Op::SpatialSum => {
                let x = node.inputs[0];
                let mut dx = slot(adj, x);
                let p = dy.shape().plane();
                for (dxp, dyp) in dx.data_mut().chunks_mut(p).zip(dy.data().chunks(p)) {
                    let s: f64 = dyp.iter().sum();
                    dxp.iter_mut().for_each(|v| *v += s);
                }
                adj[x.0] = Some(dx);
            }
            Op::Lif { params, membrane } => {
                let x = node.inputs[0];
                let g = lif_backward_parts(&node.value, membrane, params, dy);
                let mut dx = slot(adj, x);
                dx.add_assign(&g);
                adj[x.0] = Some(dx);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Accumulate parameter gradients as well as node adjoints.
    pub param_grads: bool,
}

/// Adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor5>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` when no stimulated output depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor5> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `id`, zeros when unreached.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor5 {
        self.get(id).cloned().unwrap_or_else(|| Tensor5::zeros(tape.shape(id)))
    }

    /// Gradient of the parameter at tape index `p` (requires `param_grads`).
    pub fn param(&self, p: usize) -> Option<&[f64]> {
        self.params.get(p).and_then(|g| g.as_deref())
    }
}

/// Seeds the adjoint of `output` with `stimulus` and returns the adjoint at
/// every registered input: the gradient of `<stimulus, output>`.
pub fn backward_from_stimulus(tape: &Tape, output: NodeId, stimulus: &Tensor5) -> Result<Vec<Tensor5>> {
    let grads = tape.backward(&[(output, stimulus)], BackwardOptions::default())?;
    Ok(tape
        .input_ids()
        .iter()
        .map(|&id| grads.get_or_zeros(tape, id))
        .collect())
}
