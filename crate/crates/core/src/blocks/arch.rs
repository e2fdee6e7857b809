//! Declarative architecture descriptions and the built-in presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::BnAxes;
use crate::error::{Error, Result};
use crate::neuron::LifParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerTag {
    /// Two 3x3 convolutions.
    ConvK3,
    /// Two pixel-wise fully connected layers.
    Mlpixer,
    /// 1x1 convolution followed by a pixel-wise fully connected layer.
    Srb,
}

impl MixerTag {
    pub const ALL: [MixerTag; 3] = [MixerTag::ConvK3, MixerTag::Mlpixer, MixerTag::Srb];

    pub fn as_str(&self) -> &'static str {
        match self {
            MixerTag::ConvK3 => "conv_k3",
            MixerTag::Mlpixer => "mlpixer",
            MixerTag::Srb => "srb",
        }
    }
}

impl fmt::Display for MixerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MixerTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv_k3" => Ok(MixerTag::ConvK3),
            "mlpixer" => Ok(MixerTag::Mlpixer),
            "srb" => Ok(MixerTag::Srb),
            other => Err(Error::Config(format!(
                "unknown channel mixer '{other}' (expected conv_k3, mlpixer or srb)"
            ))),
        }
    }
}

/// Channel mixer with expansion ratio `epsilon` (C -> epsilon*C -> C).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixerKind {
    pub tag: MixerTag,
    pub epsilon: f64,
}

impl MixerKind {
    pub fn new(tag: MixerTag, epsilon: f64) -> Self {
        Self { tag, epsilon }
    }

    /// Hidden width for `channels` inputs; errors unless `epsilon > 1` and
    /// `epsilon * channels` is a whole number.
    pub fn hidden(&self, channels: usize) -> Result<usize> {
        if !(self.epsilon > 1.0) {
            return Err(Error::Config(format!("epsilon must be > 1, got {}", self.epsilon)));
        }
        let h = self.epsilon * channels as f64;
        if (h - h.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "epsilon {} times {channels} channels is not an integer",
                self.epsilon
            )));
        }
        Ok(h.round() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixerKind {
    /// Spike-driven separable convolution (PW -> DW 7x7 -> PW).
    Ssc,
    /// Spiking linear-attention stand-in (not part of the analysed method) for the
    /// spike-driven self-attention of the original stage-3/4 blocks.
    AttentionStandin,
}

impl TokenMixerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TokenMixerKind::Ssc => "ssc",
            TokenMixerKind::AttentionStandin => "attention_standin",
        }
    }
}

impl FromStr for TokenMixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssc" => Ok(TokenMixerKind::Ssc),
            "attention_standin" | "attention" => Ok(TokenMixerKind::AttentionStandin),
            other => Err(Error::Config(format!(
                "unknown token mixer '{other}' (expected ssc or attention_standin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub token_mixer: TokenMixerKind,
    pub channel_mixer: MixerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Downsample {
    pub kernel: usize,
    pub stride: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub downsample: Downsample,
    pub blocks: Vec<BlockSpec>,
}

/// Primitive layers for hand-assembled analysis networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Lif,
    Scale {
        k: f64,
    },
    /// Adds `values[t]` to every element at timestep `t`.
    TimeBias {
        values: Vec<f64>,
    },
    Conv {
        kernel: usize,
        stride: usize,
        dim: usize,
    },
    Dwconv {
        kernel: usize,
    },
    Linear {
        dim: usize,
        bias: bool,
    },
    Bn,
    Ssc,
    Mixer {
        mixer: MixerKind,
    },
    Block {
        block: BlockSpec,
    },
    Attention,
}

impl LayerSpec {
    pub fn op_name(&self) -> &'static str {
        match self {
            LayerSpec::Lif => "lif",
            LayerSpec::Scale { .. } => "scale",
            LayerSpec::TimeBias { .. } => "time_bias",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dwconv { .. } => "dwconv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Bn => "bn",
            LayerSpec::Ssc => "ssc",
            LayerSpec::Mixer { .. } => "mixer",
            LayerSpec::Block { .. } => "block",
            LayerSpec::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnSettings {
    /// Backpropagate through batch statistics (training-mode backward).
    pub stats: bool,
    pub axes: BnAxes,
    pub eps: f64,
}

impl Default for BnSettings {
    fn default() -> Self {
        Self {
            stats: true,
            axes: BnAxes::Folded,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub timesteps: usize,
    pub input: InputGeometry,
    pub neuron: LifParams,
    pub bn: BnSettings,
    pub seed: u64,
    pub stages: Vec<StageSpec>,
    /// Flat primitive network; mutually exclusive with `stages`.
    pub layers: Option<Vec<LayerSpec>>,
}

impl ArchSpec {
    /// A stage-free network built from primitive layers. An empty list is the
    /// identity network.
    pub fn from_layers(timesteps: usize, input: InputGeometry, layers: Vec<LayerSpec>) -> Self {
        Self {
            timesteps,
            input,
            neuron: LifParams::default(),
            bn: BnSettings::default(),
            seed: 0,
            stages: vec![],
            layers: Some(layers),
        }
    }

    /// Replaces the channel mixer of every block in the first two
    /// stages (stage names `stage1*` and `stage2*`).
    pub fn with_channel_mixer(mut self, mixer: MixerKind) -> Self {
        for st in &mut self.stages {
            if is_early_stage(&st.name) {
                for b in &mut st.blocks {
                    b.channel_mixer = mixer;
                }
            }
        }
        self
    }

    /// Sets the token mixer of every block outside the first two stages.
    pub fn with_late_token_mixer(mut self, token: TokenMixerKind) -> Self {
        for st in &mut self.stages {
            if !is_early_stage(&st.name) {
                for b in &mut st.blocks {
                    b.token_mixer = token;
                }
            }
        }
        self
    }

    pub fn uses_attention_standin(&self) -> bool {
        let in_stages = self
            .stages
            .iter()
            .flat_map(|s| &s.blocks)
            .any(|b| b.token_mixer == TokenMixerKind::AttentionStandin);
        let in_layers = self.layers.iter().flatten().any(|l| match l {
            LayerSpec::Attention => true,
            LayerSpec::Block { block } => block.token_mixer == TokenMixerKind::AttentionStandin,
            _ => false,
        });
        in_stages || in_layers
    }

    /// Checks structural invariants and returns the spatial extent after
    /// every stage.
    pub fn validate(&self) -> Result<Vec<(usize, usize)>> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        let InputGeometry { c, h, w } = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input geometry {c}x{h}x{w} has a zero extent")));
        }
        self.neuron.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.bn.eps > 0.0) {
            return Err(Error::Config(format!("bn eps must be > 0, got {}", self.bn.eps)));
        }
        if let Some(layers) = &self.layers {
            if !self.stages.is_empty() {
                return Err(Error::Config("give either stages or layers, not both".into()));
            }
            for (i, l) in layers.iter().enumerate() {
                if let LayerSpec::TimeBias { values } = l {
                    if values.len() != self.timesteps {
                        return Err(Error::Config(format!(
                            "layer {i}: time_bias has {} values for {} timesteps",
                            values.len(),
                            self.timesteps
                        )));
                    }
                }
            }
            return Ok(vec![]);
        }
        if self.stages.is_empty() {
            return Err(Error::Config("architecture has no stages".into()));
        }
        let (mut hh, mut ww) = (h, w);
        let mut extents = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            let d = st.downsample;
            let ctx = |msg: String| Error::Config(format!("stage {} ('{}'): {msg}", i + 1, st.name));
            if d.kernel == 0 || d.stride == 0 || d.dim == 0 {
                return Err(ctx("downsample kernel, stride and dim must be positive".into()));
            }
            let pad = d.kernel / 2;
            let next = |n: usize| (n + 2 * pad).checked_sub(d.kernel).map(|v| v / d.stride + 1);
            match (next(hh), next(ww)) {
                (Some(a), Some(b)) if a > 0 && b > 0 && d.stride <= hh.max(1) && d.stride <= ww.max(1) => {
                    hh = a;
                    ww = b;
                }
                _ => {
                    return Err(ctx(format!(
                        "downsample kernel {} stride {} drives the {hh}x{ww} feature map to zero size",
                        d.kernel, d.stride
                    )))
                }
            }
            for (j, b) in st.blocks.iter().enumerate() {
                b.channel_mixer
                    .hidden(d.dim)
                    .map_err(|e| ctx(format!("block {}: {e}", j + 1)))?;
            }
            extents.push((hh, ww));
        }
        Ok(extents)
    }
}

fn is_early_stage(name: &str) -> bool {
    name.starts_with("stage1") || name.starts_with("stage2")
}

/// Stage widths and block counts of a Table-5 style four-stage model.
struct Family {
    name: &'static str,
    dims: [usize; 5],
}

const FAMILIES: [Family; 3] = [
    Family {
        name: "meta-sdt-tiny",
        dims: [16, 32, 64, 128, 192],
    },
    Family {
        name: "meta-sdt-medium",
        dims: [24, 48, 96, 192, 240],
    },
    Family {
        name: "meta-sdt-base",
        dims: [32, 64, 128, 256, 360],
    },
];

const STAGE_NAMES: [&str; 5] = ["stage1.1", "stage1.2", "stage2", "stage3", "stage4"];
const STAGE_KERNELS: [(usize, usize); 5] = [(7, 2), (3, 2), (3, 2), (3, 2), (3, 1)];
const STAGE_BLOCKS: [usize; 5] = [1, 1, 2, 6, 2];

/// Expansion ratio of the channel MLP in the attention stages.
pub const LATE_MLP_RATIO: f64 = 4.0;
pub const DEFAULT_EPSILON: f64 = 4.0;

fn family_spec(f: &Family, desk: bool) -> ArchSpec {
    let shrink = if desk { 2 } else { 1 };
    let side = if desk { 64 } else { 224 };
    let stages = (0..5)
        .map(|i| {
            let early = i < 3;
            let block = if early {
                BlockSpec {
                    token_mixer: TokenMixerKind::Ssc,
                    channel_mixer: MixerKind::new(MixerTag::ConvK3, DEFAULT_EPSILON),
                }
            } else {
                BlockSpec {
                    token_mixer: TokenMixerKind::AttentionStandin,
                    channel_mixer: MixerKind::new(MixerTag::Mlpixer, LATE_MLP_RATIO),
                }
            };
            StageSpec {
                name: STAGE_NAMES[i].to_string(),
                downsample: Downsample {
                    kernel: STAGE_KERNELS[i].0,
                    stride: STAGE_KERNELS[i].1,
                    dim: f.dims[i] / shrink,
                },
                blocks: vec![block; STAGE_BLOCKS[i]],
            }
        })
        .collect();
    ArchSpec {
        timesteps: 4,
        input: InputGeometry { c: 3, h: side, w: side },
        neuron: LifParams::default(),
        bn: BnSettings::default(),
        seed: 0,
        stages,
        layers: None,
    }
}

const MIXER_SUFFIXES: [(&str, MixerTag, f64); 4] = [
    ("-mlpixer6", MixerTag::Mlpixer, 6.0),
    ("-mlpixer", MixerTag::Mlpixer, 4.0),
    ("-srb", MixerTag::Srb, 4.0),
    ("-conv", MixerTag::ConvK3, 4.0),
];

/// All preset names accepted by [`preset`].
pub fn preset_names() -> Vec<String> {
    let mut out = vec![];
    for f in &FAMILIES {
        for desk in ["", "-desk"] {
            let base = format!("{}{desk}", f.name);
            out.push(base.clone());
            for (suf, _, _) in MIXER_SUFFIXES {
                out.push(format!("{base}{suf}"));
            }
        }
    }
    out
}

/// Looks up a built-in architecture such as `meta-sdt-tiny`,
/// `meta-sdt-tiny-desk` or `meta-sdt-tiny-desk-srb`.
pub fn preset(name: &str) -> Result<ArchSpec> {
    let (stem, mixer) = MIXER_SUFFIXES
        .iter()
        .find_map(|(suf, tag, eps)| name.strip_suffix(suf).map(|s| (s, Some(MixerKind::new(*tag, *eps)))))
        .unwrap_or((name, None));
    let (family, desk) = match stem.strip_suffix("-desk") {
        Some(f) => (f, true),
        None => (stem, false),
    };
    let f = FAMILIES.iter().find(|f| f.name == family).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset '{name}'; available presets: {}",
            preset_names().join(", ")
        ))
    })?;
    let spec = family_spec(f, desk);
    Ok(match mixer {
        Some(m) => spec.with_channel_mixer(m),
        None => spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_dims_follow_the_table() {
        let spec = preset("meta-sdt-tiny").unwrap();
        let dims: Vec<usize> = spec.stages.iter().map(|s| s.downsample.dim).collect();
        assert_eq!(dims, [16, 32, 64, 128, 192]);
        assert_eq!(spec.stages[0].downsample.kernel, 7);
        assert_eq!(spec.stages[0].downsample.stride, 2);
        assert_eq!(spec.stages[4].downsample.stride, 1);
        let ext = spec.validate().unwrap();
        assert_eq!(ext, vec![(112, 112), (56, 56), (28, 28), (14, 14), (14, 14)]);
    }

    #[test]
    fn mixer_swap_only_touches_first_two_stages() {
        let base = preset("meta-sdt-tiny").unwrap();
        let swapped = preset("meta-sdt-tiny-mlpixer6").unwrap();
        for (a, b) in base.stages.iter().zip(&swapped.stages) {
            assert_eq!(a.downsample, b.downsample);
            if a.name.starts_with("stage3") || a.name.starts_with("stage4") {
                assert_eq!(a, b);
            } else {
                for blk in &b.blocks {
                    assert_eq!(blk.channel_mixer, MixerKind::new(MixerTag::Mlpixer, 6.0));
                }
            }
        }
    }

    #[test]
    fn desk_preset_halves_dims() {
        let spec = preset("meta-sdt-tiny-desk").unwrap();
        let dims: Vec<usize> = spec.stages.iter().map(|s| s.downsample.dim).collect();
        assert_eq!(dims, [8, 16, 32, 64, 96]);
        assert_eq!(spec.input, InputGeometry { c: 3, h: 64, w: 64 });
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("resnet").unwrap_err().to_string();
        assert!(err.contains("meta-sdt-tiny-desk-srb"));
    }

    #[test]
    fn empty_stages_rejected() {
        let mut spec = preset("meta-sdt-tiny-desk").unwrap();
        spec.stages.clear();
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn collapsing_stride_names_the_stage() {
        let mut spec = preset("meta-sdt-tiny-desk").unwrap();
        spec.input.h = 4;
        spec.input.w = 4;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("stage"), "{err}");
    }

    #[test]
    fn hidden_width() {
        assert_eq!(MixerKind::new(MixerTag::ConvK3, 4.0).hidden(16).unwrap(), 64);
        assert_eq!(MixerKind::new(MixerTag::Mlpixer, 6.0).hidden(16).unwrap(), 96);
        assert!(MixerKind::new(MixerTag::Srb, 1.0).hidden(16).is_err());
        assert!(MixerKind::new(MixerTag::Srb, 1.3).hidden(5).is_err());
    }
}
