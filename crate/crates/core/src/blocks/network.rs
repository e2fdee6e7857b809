//! Compiled networks with named probe points, parameter stores and the raw
//! weight-file format.
//!
//! Weight files are `u64` little-endian header length, a JSON header
//! `{"tensors": [{"name", "shape"}, ...]}`, then every tensor's values as
//! little-endian `f64` in header order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchSpec, Layer, LayerCtx, LayerSpec, ParamFactory};
use crate::autodiff::{BnConfig, NodeId, Param, ParamRef, Tape};
use crate::error::{Error, Result};
use crate::neuron::NeuronMode;
use crate::tensor::{Shape5, Tensor5};

/// Where the adjoint is read when a stage boundary is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadAt {
    /// Stimulus at the probed boundary, adjoint read at the network input.
    #[default]
    NetworkInput,
    /// Stimulus at the probed boundary, adjoint read at the input of the
    /// probed stage (its first section for a stage prefix).
    StageInput,
}

/// A resolved probe: a boundary index into the section list. Boundary 0 is
/// the network input, boundary `i` the output of section `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePoint {
    pub name: String,
    pub boundary: usize,
    /// Boundary where the probed stage starts.
    pub start: usize,
}

#[derive(Debug, Clone)]
struct Section {
    name: String,
    layer: Layer,
}

/// A network whose parameters are fixed after construction.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ArchSpec,
    ctx: LayerCtx,
    sections: Vec<Section>,
    params: Vec<ParamRef>,
    /// Spatial extents at every boundary, input first.
    extents: Vec<(usize, usize, usize)>,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct Forward {
    pub tape: Tape,
    /// Node at every evaluated boundary, input first.
    pub boundaries: Vec<NodeId>,
}

impl Forward {
    pub fn input(&self) -> NodeId {
        self.boundaries[0]
    }

    pub fn output(&self) -> NodeId {
        *self.boundaries.last().expect("forward has an input boundary")
    }
}

impl Network {
    /// Builds with seeded Kaiming initialization.
    pub fn build(spec: &ArchSpec) -> Result<Self> {
        Self::build_with(spec, ParamFactory::new(spec.seed))
    }

    /// Builds with parameters taken from a weight file.
    pub fn build_with_weights(spec: &ArchSpec, weights: WeightFile) -> Result<Self> {
        Self::build_with(spec, ParamFactory::new(spec.seed).with_overrides(weights.into_map()))
    }

    fn build_with(spec: &ArchSpec, mut f: ParamFactory) -> Result<Self> {
        spec.validate()?;
        let mut c = spec.input.c;
        let (mut h, mut w) = (spec.input.h, spec.input.w);
        let mut extents = vec![(c, h, w)];
        let mut sections = vec![];
        if let Some(layers) = &spec.layers {
            for (i, l) in layers.iter().enumerate() {
                let name = format!("layer{}", i + 1);
                let layer = compile_layer(&mut f, &name, l, &mut c, &mut h, &mut w)
                    .map_err(|e| Error::Config(format!("{name} ({}): {e}", l.op_name())))?;
                extents.push((c, h, w));
                sections.push(Section { name, layer });
            }
        } else {
            for (i, st) in spec.stages.iter().enumerate() {
                let d = &st.downsample;
                let mut layers = vec![f.downsample(&format!("{}.downsample", st.name), c, d, i == 0)];
                c = d.dim;
                let pad = d.kernel / 2;
                h = (h + 2 * pad - d.kernel) / d.stride + 1;
                w = (w + 2 * pad - d.kernel) / d.stride + 1;
                for (j, b) in st.blocks.iter().enumerate() {
                    let name = format!("{}.block{}", st.name, j + 1);
                    layers.push(
                        f.snn_block(&name, c, b)
                            .map_err(|e| Error::Config(format!("stage '{}': {e}", st.name)))?,
                    );
                }
                extents.push((c, h, w));
                sections.push(Section {
                    name: st.name.clone(),
                    layer: Layer::Seq(layers),
                });
            }
        }
        let params = f.finish()?;
        Ok(Self {
            spec: spec.clone(),
            ctx: LayerCtx {
                lif: spec.neuron,
                bn: BnConfig {
                    eps: spec.bn.eps,
                    axes: spec.bn.axes,
                    stats_grad: spec.bn.stats,
                },
            },
            sections,
            params,
            extents,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn ctx(&self) -> &LayerCtx {
        &self.ctx
    }

    pub fn params(&self) -> &[ParamRef] {
        &self.params
    }

    /// Toggles backpropagation through batch statistics.
    pub fn set_bn_stats(&mut self, on: bool) {
        self.ctx.bn.stats_grad = on;
        self.spec.bn.stats = on;
    }

    pub fn set_mode(&mut self, mode: NeuronMode) {
        self.ctx.lif.mode = mode;
        self.spec.neuron.mode = mode;
    }

    pub fn timesteps(&self) -> usize {
        self.spec.timesteps
    }

    /// Input shape for `batch` samples.
    pub fn input_shape(&self, batch: usize) -> Shape5 {
        let (c, h, w) = self.extents[0];
        Shape5::new(self.spec.timesteps, batch, c, h, w)
    }

    /// Shape at boundary `b` for `batch` samples.
    pub fn boundary_shape(&self, b: usize, batch: usize) -> Shape5 {
        let (c, h, w) = self.extents[b];
        Shape5::new(self.spec.timesteps, batch, c, h, w)
    }

    /// Probe names in boundary order: `input`, each section, `output`.
    pub fn probe_names(&self) -> Vec<String> {
        let mut v = vec!["input".to_string()];
        v.extend(self.sections.iter().map(|s| s.name.clone()));
        v.push("output".into());
        v
    }

    /// Resolves a probe by exact name, by `output`, or by a stage prefix
    /// (`stage1` selects the last section named `stage1.*`).
    pub fn probe(&self, name: &str) -> Result<ProbePoint> {
        let n = self.sections.len();
        let range = match name {
            "input" => Some((0, 0)),
            "output" => Some((n.saturating_sub(1), n)),
            _ => self
                .sections
                .iter()
                .position(|s| s.name == name)
                .map(|i| (i, i + 1))
                .or_else(|| {
                    let prefix = format!("{name}.");
                    let first = self.sections.iter().position(|s| s.name.starts_with(&prefix))?;
                    let last = self.sections.iter().rposition(|s| s.name.starts_with(&prefix))?;
                    Some((first, last + 1))
                }),
        };
        range
            .map(|(start, boundary)| ProbePoint {
                name: name.to_string(),
                boundary,
                start,
            })
            .ok_or_else(|| {
                Error::Reference(format!(
                    "unknown probe '{name}'; valid probes: {}",
                    self.probe_names().join(", ")
                ))
            })
    }

    /// Records a forward pass from `x` through boundary `upto`.
    pub fn forward(&self, x: Tensor5, upto: usize) -> Result<Forward> {
        x.require_shape(self.input_shape(x.shape().b), "network input")?;
        if upto > self.sections.len() {
            return Err(Error::Reference(format!(
                "boundary {upto} beyond {} sections",
                self.sections.len()
            )));
        }
        let mut tape = Tape::new();
        let mut node = tape.input(x)?;
        let mut boundaries = vec![node];
        for s in &self.sections[..upto] {
            node = s.layer.forward(&mut tape, node, &self.ctx)?;
            boundaries.push(node);
        }
        Ok(Forward { tape, boundaries })
    }

    /// Total number of parameter values, BN affine included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Number of convolution and fully connected weights.
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.ends_with(".weight"))
            .map(|p| p.numel())
            .sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn params_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamRef> + 'a {
        self.params.iter().filter(move |p| p.name.starts_with(prefix))
    }

    pub fn weight_file(&self) -> WeightFile {
        WeightFile {
            tensors: self.params.iter().map(|p| (**p).clone()).collect(),
        }
    }
}

fn compile_layer(
    f: &mut ParamFactory,
    name: &str,
    spec: &LayerSpec,
    c: &mut usize,
    h: &mut usize,
    w: &mut usize,
) -> Result<Layer> {
    Ok(match spec {
        LayerSpec::Lif => Layer::Lif,
        LayerSpec::Scale { k } => Layer::Scale(*k),
        LayerSpec::TimeBias { values } => Layer::TimeBias(values.clone()),
        LayerSpec::Conv { kernel, stride, dim } => {
            if *kernel == 0 || *stride == 0 || *dim == 0 {
                return Err(Error::Config("kernel, stride and dim must be positive".into()));
            }
            let l = f.conv(name, *c, *dim, *kernel, *stride);
            *c = *dim;
            *h = (*h - 1) / stride + 1;
            *w = (*w - 1) / stride + 1;
            l
        }
        LayerSpec::Dwconv { kernel } => {
            if *kernel == 0 {
                return Err(Error::Config("kernel must be positive".into()));
            }
            f.dwconv(name, *c, *kernel)
        }
        LayerSpec::Linear { dim, bias } => {
            if *dim == 0 {
                return Err(Error::Config("dim must be positive".into()));
            }
            let l = f.linear(name, *c, *dim, *bias);
            *c = *dim;
            l
        }
        LayerSpec::Bn => f.bn(name, *c),
        LayerSpec::Ssc => f.ssc(name, *c),
        LayerSpec::Mixer { mixer } => f.channel_mixer(name, *c, *mixer)?,
        LayerSpec::Block { block } => f.snn_block(name, *c, block)?,
        LayerSpec::Attention => f.attention(name, *c),
    })
}

impl ParamFactory {
    /// Replaces generated values by name; shapes must agree.
    pub fn with_overrides(mut self, overrides: HashMap<String, Param>) -> Self {
        self.overrides = Some(overrides);
        self
    }

    /// Returns the created parameters; errors when a supplied tensor was
    /// never consumed or did not match.
    pub fn finish(self) -> Result<Vec<ParamRef>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if let Some(rest) = &self.overrides {
            if let Some(name) = rest.keys().min() {
                return Err(Error::Reference(format!(
                    "weight file tensor '{name}' does not exist in this architecture"
                )));
            }
        }
        Ok(self.into_params())
    }
}

/// Named tensors in the raw weight format.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct WeightHeader {
    tensors: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = WeightHeader {
            tensors: self
                .tensors
                .iter()
                .map(|p| WeightEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 8 * self.tensors.iter().map(Param::numel).sum::<usize>());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.tensors {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("weight file: {m}"));
        let len = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| bad("truncated header length"))?;
        let json = bytes.get(8..8 + len).ok_or_else(|| bad("truncated header"))?;
        let header: WeightHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let mut data = bytes[8 + len..].chunks_exact(8);
        if !data.remainder().is_empty() {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut tensors = vec![];
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let vals: Vec<f64> = data
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if vals.len() != n {
                return Err(bad(&format!("payload ends inside tensor '{}'", e.name)));
            }
            tensors.push(Param::new(e.name, e.shape, vals)?);
        }
        if data.next().is_some() {
            return Err(bad("trailing payload after the last tensor"));
        }
        Ok(Self { tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the serialized file.
    pub fn sha256(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    fn into_map(self) -> HashMap<String, Param> {
        self.tensors.into_iter().map(|p| (p.name.clone(), p)).collect()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
