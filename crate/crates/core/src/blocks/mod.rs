//! Composite spiking blocks: the separable-convolution token mixer, the
//! three channel mixers, membrane-shortcut blocks, downsampling stems and a
//! spiking linear-attention stand-in.
//!
//! Blocks are assembled into a [`Layer`] tree whose forward pass records
//! onto a [`Tape`]. Every convolution and fully connected map is
//! bias-free and followed by batch normalization, except the primitive
//! `linear` layer which may carry a bias.

pub mod arch;
pub mod network;

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{BnConfig, NodeId, Param, ParamRef, Tape};
use crate::error::{Error, Result};
use crate::neuron::LifParams;
use crate::rng::NormalStream;
use crate::tensor::Tensor5;

pub use arch::{
    preset, preset_names, ArchSpec, BlockSpec, BnSettings, Downsample, InputGeometry, LayerSpec, MixerKind, MixerTag,
    StageSpec, TokenMixerKind,
};
pub use network::{hex_digest, Forward, Network, ProbePoint, ReadAt, WeightFile};

/// Depthwise kernel size of the separable-convolution token mixer.
pub const SSC_KERNEL: usize = 7;
/// Channel expansion inside the separable-convolution token mixer.
pub const SSC_RATIO: usize = 2;

/// Settings shared by every layer of one network.
#[derive(Debug, Clone, Copy)]
pub struct LayerCtx {
    pub lif: LifParams,
    pub bn: BnConfig,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        weight: ParamRef,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    Linear {
        weight: ParamRef,
        bias: Option<ParamRef>,
    },
    Bn {
        gamma: ParamRef,
        beta: ParamRef,
    },
    Lif,
    Scale(f64),
    TimeBias(Vec<f64>),
    Seq(Vec<Layer>),
    /// `x + body(x)` on real-valued feature maps.
    Residual(Box<Layer>),
    Attention(Box<Attention>),
}

impl Layer {
    pub fn forward(&self, tape: &mut Tape, x: NodeId, ctx: &LayerCtx) -> Result<NodeId> {
        match self {
            Layer::Conv {
                weight,
                stride,
                padding,
                groups,
            } => tape.conv2d(x, weight, *stride, *padding, *groups),
            Layer::Linear { weight, bias } => tape.linear(x, weight, bias.as_ref()),
            Layer::Bn { gamma, beta } => tape.batchnorm(x, gamma, beta, ctx.bn),
            Layer::Lif => tape.lif(x, &ctx.lif),
            Layer::Scale(k) => tape.scale(x, *k),
            Layer::TimeBias(values) => {
                let s = tape.shape(x);
                let mut bias = Tensor5::zeros(s);
                for (chunk, v) in bias.data_mut().chunks_mut(s.step()).zip(values) {
                    chunk.iter_mut().for_each(|e| *e = *v);
                }
                let c = tape.constant(bias)?;
                tape.add(x, c)
            }
            Layer::Seq(layers) => layers.iter().try_fold(x, |h, l| l.forward(tape, h, ctx)),
            Layer::Residual(body) => {
                let y = body.forward(tape, x, ctx)?;
                tape.add(x, y)
            }
            Layer::Attention(a) => a.forward(tape, x, ctx),
        }
    }

    /// Visits every parameter in build order.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(&'a ParamRef)) {
        match self {
            Layer::Conv { weight, .. } => f(weight),
            Layer::Linear { weight, bias } => {
                f(weight);
                if let Some(b) = bias {
                    f(b);
                }
            }
            Layer::Bn { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            Layer::Lif | Layer::Scale(_) | Layer::TimeBias(_) => {}
            Layer::Seq(ls) => ls.iter().for_each(|l| l.for_each_param(f)),
            Layer::Residual(b) => b.for_each_param(f),
            Layer::Attention(a) => {
                for p in [&a.q, &a.k, &a.v, &a.proj] {
                    p.for_each_param(f);
                }
            }
        }
    }
}

/// Spiking linear attention used where the original architecture has
/// spike-driven self-attention. Not part of the analysed method:
/// `out = BN(W_o (Q ⊙ Σ_hw (K ⊙ V)))` with `Q, K, V = SN(BN(W x))` on `x = SN(X)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Layer,
    pub k: Layer,
    pub v: Layer,
    pub proj: Layer,
}

impl Attention {
    fn forward(&self, tape: &mut Tape, x: NodeId, ctx: &LayerCtx) -> Result<NodeId> {
        let s = tape.lif(x, &ctx.lif)?;
        let q = self.q.forward(tape, s, ctx)?;
        let k = self.k.forward(tape, s, ctx)?;
        let v = self.v.forward(tape, s, ctx)?;
        let kv = tape.hadamard(k, v)?;
        let ctxsum = tape.spatial_sum(kv)?;
        let mixed = tape.hadamard(q, ctxsum)?;
        self.proj.forward(tape, mixed, ctx)
    }
}

/// Creates parameters in a fixed order from one seeded stream.
pub struct ParamFactory {
    stream: NormalStream,
    params: Vec<ParamRef>,
    overrides: Option<HashMap<String, Param>>,
    error: Option<Error>,
}

impl ParamFactory {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: NormalStream::new(seed),
            params: vec![],
            overrides: None,
            error: None,
        }
    }

    fn into_params(self) -> Vec<ParamRef> {
        self.params
    }

    fn keep(&mut self, mut p: Param) -> ParamRef {
        if let Some(map) = &mut self.overrides {
            match map.remove(&p.name) {
                Some(q) if q.shape == p.shape => p.data = q.data,
                Some(q) => {
                    self.error.get_or_insert(Error::Dimension(format!(
                        "weight '{}' has shape {:?}, architecture expects {:?}",
                        p.name, q.shape, p.shape
                    )));
                }
                None => {
                    self.error
                        .get_or_insert(Error::Reference(format!("weight file lacks tensor '{}'", p.name)));
                }
            }
        }
        let p = Arc::new(p);
        self.params.push(Arc::clone(&p));
        p
    }

    /// Kaiming-normal weight: `N(0, 2 / fan_in)`.
    pub fn kaiming(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamRef {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.stream.normal()).collect();
        self.keep(Param { name, shape, data })
    }

    pub fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamRef {
        self.keep(Param::filled(name, shape, value))
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Layer {
        Layer::Conv {
            weight: self.kaiming(format!("{name}.weight"), vec![c_out, c_in, k, k], c_in * k * k),
            stride,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn dwconv(&mut self, name: &str, c: usize, k: usize) -> Layer {
        Layer::Conv {
            weight: self.kaiming(format!("{name}.weight"), vec![c, 1, k, k], k * k),
            stride: 1,
            padding: k / 2,
            groups: c,
        }
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize, bias: bool) -> Layer {
        let weight = self.kaiming(format!("{name}.weight"), vec![c_out, c_in], c_in);
        let bias = bias.then(|| self.constant(format!("{name}.bias"), vec![c_out], 0.0));
        Layer::Linear { weight, bias }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> Layer {
        Layer::Bn {
            gamma: self.constant(format!("{name}.gamma"), vec![c], 1.0),
            beta: self.constant(format!("{name}.beta"), vec![c], 0.0),
        }
    }

    /// `PW2(SN(DW(SN(PW1(SN(X))))))`, each convolution followed by BN.
    pub fn ssc(&mut self, name: &str, c: usize) -> Layer {
        let hidden = c * SSC_RATIO;
        Layer::Seq(vec![
            Layer::Lif,
            self.conv(&format!("{name}.pw1"), c, hidden, 1, 1),
            self.bn(&format!("{name}.bn1"), hidden),
            Layer::Lif,
            self.dwconv(&format!("{name}.dw"), hidden, SSC_KERNEL),
            self.bn(&format!("{name}.bn2"), hidden),
            Layer::Lif,
            self.conv(&format!("{name}.pw2"), hidden, c, 1, 1),
            self.bn(&format!("{name}.bn3"), c),
        ])
    }

    /// `BN(op2(SN(BN(op1(SN(X))))))` with `op1: C -> εC`, `op2: εC -> C`.
    pub fn channel_mixer(&mut self, name: &str, c: usize, kind: MixerKind) -> Result<Layer> {
        let hidden = kind.hidden(c)?;
        let (up, down) = match kind.tag {
            MixerTag::ConvK3 => (
                self.conv(&format!("{name}.conv1"), c, hidden, 3, 1),
                self.conv(&format!("{name}.conv2"), hidden, c, 3, 1),
            ),
            MixerTag::Mlpixer => (
                self.linear(&format!("{name}.fc1"), c, hidden, false),
                self.linear(&format!("{name}.fc2"), hidden, c, false),
            ),
            MixerTag::Srb => (
                self.conv(&format!("{name}.conv1"), c, hidden, 1, 1),
                self.linear(&format!("{name}.fc2"), hidden, c, false),
            ),
        };
        Ok(Layer::Seq(vec![
            Layer::Lif,
            up,
            self.bn(&format!("{name}.bn1"), hidden),
            Layer::Lif,
            down,
            self.bn(&format!("{name}.bn2"), c),
        ]))
    }

    pub fn attention(&mut self, name: &str, c: usize) -> Layer {
        let mut qkv = |tag: &str| {
            Layer::Seq(vec![
                self.linear(&format!("{name}.{tag}"), c, c, false),
                self.bn(&format!("{name}.{tag}_bn"), c),
                Layer::Lif,
            ])
        };
        let (q, k, v) = (qkv("q"), qkv("k"), qkv("v"));
        let proj = Layer::Seq(vec![
            self.linear(&format!("{name}.proj"), c, c, false),
            self.bn(&format!("{name}.proj_bn"), c),
        ]);
        Layer::Attention(Box::new(Attention { q, k, v, proj }))
    }

    pub fn token_mixer(&mut self, name: &str, c: usize, kind: TokenMixerKind) -> Layer {
        match kind {
            TokenMixerKind::Ssc => self.ssc(name, c),
            TokenMixerKind::AttentionStandin => self.attention(name, c),
        }
    }

    /// `X' = X + TokenMixer(X)`, `X'' = X' + Mixer(X')`.
    pub fn snn_block(&mut self, name: &str, c: usize, spec: &BlockSpec) -> Result<Layer> {
        let token = self.token_mixer(&format!("{name}.token"), c, spec.token_mixer);
        let mixer = self.channel_mixer(&format!("{name}.mixer"), c, spec.channel_mixer)?;
        Ok(Layer::Seq(vec![
            Layer::Residual(Box::new(token)),
            Layer::Residual(Box::new(mixer)),
        ]))
    }

    /// Strided convolution + BN; every stem after the first spikes its input.
    pub fn downsample(&mut self, name: &str, c_in: usize, d: &Downsample, first: bool) -> Layer {
        let mut layers = vec![];
        if !first {
            layers.push(Layer::Lif);
        }
        layers.push(self.conv(&format!("{name}.conv"), c_in, d.dim, d.kernel, d.stride));
        layers.push(self.bn(&format!("{name}.bn"), d.dim));
        Layer::Seq(layers)
    }
}
