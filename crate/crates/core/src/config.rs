//! Architecture configuration text.
//!
//! One statement per line: `key = value`, `section {` or `}`. `#` starts a
//! comment. Top-level keys and sections:
//!
//! ```text
//! preset = meta-sdt-tiny-desk   # optional starting point
//! timesteps = 4
//! seed = 0
//! channel_mixer = srb           # stage1*/stage2* mixers (with a preset)
//! epsilon = 4
//! late_token_mixer = ssc        # token mixer of later stages
//! input { c, h, w }
//! neuron { beta, theta, reset = soft|hard, a, mode = spike|soft }
//! bn { stats = on|off, axes = folded|per_timestep, eps }
//! stage {                       # repeatable; replaces preset stages
//!   name = stage1
//!   downsample { kernel, stride, dim }
//!   block { token_mixer, channel_mixer, epsilon, count }   # repeatable
//! }
//! layers {                      # flat network instead of stages
//!   layer { op = conv, kernel, stride, dim }                # repeatable
//! }
//! ```
//!
//! Inside braces every key sits on its own line.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::BnAxes;
use crate::blocks::{
    preset, ArchSpec, BlockSpec, BnSettings, Downsample, InputGeometry, LayerSpec, MixerKind, MixerTag, StageSpec,
    TokenMixerKind,
};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronMode, Reset};

#[derive(Debug)]
enum Entry {
    Kv {
        key: String,
        value: String,
        line: usize,
    },
    Section {
        name: String,
        line: usize,
        body: Vec<Entry>,
    },
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        message: message.into(),
    }
}

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut stack: Vec<(String, usize, Vec<Entry>)> = vec![(String::new(), 0, vec![])];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if s == "}" {
            if stack.len() == 1 {
                return Err(syntax(line, "unmatched '}'"));
            }
            let (name, l, body) = stack.pop().expect("nonempty");
            stack
                .last_mut()
                .expect("root")
                .2
                .push(Entry::Section { name, line: l, body });
        } else if let Some(name) = s.strip_suffix('{') {
            let name = name.trim();
            if !is_ident(name) {
                return Err(syntax(line, format!("bad section name '{name}'")));
            }
            stack.push((name.to_string(), line, vec![]));
        } else if let Some((k, v)) = s.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            if !is_ident(k) {
                return Err(syntax(line, format!("bad key '{k}'")));
            }
            if v.is_empty() {
                return Err(syntax(line, format!("missing value for '{k}'")));
            }
            stack.last_mut().expect("root").2.push(Entry::Kv {
                key: k.to_string(),
                value: v.to_string(),
                line,
            });
        } else {
            return Err(syntax(
                line,
                format!("expected 'key = value', 'section {{' or '}}', got '{s}'"),
            ));
        }
    }
    if stack.len() > 1 {
        let (name, line, _) = stack.pop().expect("nonempty");
        return Err(syntax(line, format!("section '{name}' is never closed")));
    }
    Ok(stack.pop().expect("root").2)
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn value<T: FromStr>(v: &str, line: usize, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| syntax(line, format!("invalid value '{v}' for '{key}'")))
}

fn parse_bool(v: &str, line: usize, key: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(syntax(line, format!("'{key}' must be on or off, got '{v}'"))),
    }
}

fn named<T: FromStr<Err = Error>>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|e: Error| syntax(line, e.to_string()))
}

fn unknown(key: &str, line: usize, section: &str) -> Error {
    syntax(line, format!("unknown key '{key}' in {section}"))
}

/// Runs `f` on each `key = value` of a section; nested sections are errors.
fn kvs(body: &[Entry], section: &str, mut f: impl FnMut(&str, &str, usize) -> Result<()>) -> Result<()> {
    for e in body {
        match e {
            Entry::Kv { key, value, line } => f(key, value, *line)?,
            Entry::Section { name, line, .. } => return Err(unknown(name, *line, section)),
        }
    }
    Ok(())
}

pub fn parse_arch_config(text: &str) -> Result<ArchSpec> {
    let entries = tokenize(text)?;
    let base = entries.iter().find_map(|e| match e {
        Entry::Kv { key, value, line } if key == "preset" => Some((value.as_str(), *line)),
        _ => None,
    });
    let mut spec = match base {
        Some((name, _)) => preset(name)?,
        None => ArchSpec {
            timesteps: 4,
            input: InputGeometry { c: 3, h: 64, w: 64 },
            neuron: LifParams::default(),
            bn: BnSettings::default(),
            seed: 0,
            stages: vec![],
            layers: None,
        },
    };
    let mut stages = vec![];
    let mut mixer_tag: Option<MixerTag> = None;
    let mut mixer_eps: Option<f64> = None;
    let mut late_token: Option<TokenMixerKind> = None;
    for e in &entries {
        match e {
            Entry::Kv { key, value: v, line } => {
                let line = *line;
                match key.as_str() {
                    "preset" => {}
                    "timesteps" => spec.timesteps = value(v, line, key)?,
                    "seed" => spec.seed = value(v, line, key)?,
                    "channel_mixer" => mixer_tag = Some(named(v, line)?),
                    "epsilon" => mixer_eps = Some(value(v, line, key)?),
                    "late_token_mixer" => late_token = Some(named(v, line)?),
                    _ => return Err(unknown(key, line, "top level")),
                }
            }
            Entry::Section { name, line, body } => match name.as_str() {
                "input" => parse_input(body, &mut spec.input)?,
                "neuron" => parse_neuron(body, &mut spec.neuron)?,
                "bn" => parse_bn(body, &mut spec.bn)?,
                "stage" => stages.push(parse_stage(body, *line, stages.len())?),
                "layers" => spec.layers = Some(parse_layers(body)?),
                _ => return Err(unknown(name, *line, "top level")),
            },
        }
    }
    if !stages.is_empty() {
        spec.stages = stages;
    }
    if spec.layers.is_some() && base.is_some() {
        spec.stages.clear();
    }
    if mixer_tag.is_some() || mixer_eps.is_some() {
        let tag = mixer_tag.unwrap_or(MixerTag::ConvK3);
        let eps = mixer_eps.unwrap_or(crate::blocks::arch::DEFAULT_EPSILON);
        spec = spec.with_channel_mixer(MixerKind::new(tag, eps));
    }
    if let Some(t) = late_token {
        spec = spec.with_late_token_mixer(t);
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_input(body: &[Entry], g: &mut InputGeometry) -> Result<()> {
    kvs(body, "input", |k, v, line| {
        match k {
            "c" => g.c = value(v, line, k)?,
            "h" => g.h = value(v, line, k)?,
            "w" => g.w = value(v, line, k)?,
            _ => return Err(unknown(k, line, "input")),
        }
        Ok(())
    })
}

fn parse_neuron(body: &[Entry], p: &mut LifParams) -> Result<()> {
    kvs(body, "neuron", |k, v, line| {
        match k {
            "beta" => p.beta = value(v, line, k)?,
            "theta" => p.theta = value(v, line, k)?,
            "a" => p.a = value(v, line, k)?,
            "reset" => {
                p.reset = match v {
                    "soft" => Reset::Soft,
                    "hard" => Reset::Hard,
                    _ => return Err(syntax(line, format!("reset must be soft or hard, got '{v}'"))),
                }
            }
            "mode" => p.mode = parse_mode(v).map_err(|e| syntax(line, e.to_string()))?,
            _ => return Err(unknown(k, line, "neuron")),
        }
        Ok(())
    })
}

pub fn parse_mode(v: &str) -> Result<NeuronMode> {
    match v {
        "spike" => Ok(NeuronMode::Spike),
        "soft" => Ok(NeuronMode::Soft),
        _ => Err(Error::Config(format!("mode must be spike or soft, got '{v}'"))),
    }
}

fn parse_bn(body: &[Entry], b: &mut BnSettings) -> Result<()> {
    kvs(body, "bn", |k, v, line| {
        match k {
            "stats" => b.stats = parse_bool(v, line, k)?,
            "eps" => b.eps = value(v, line, k)?,
            "axes" => {
                b.axes = match v {
                    "folded" => BnAxes::Folded,
                    "per_timestep" => BnAxes::PerTimestep,
                    _ => return Err(syntax(line, format!("axes must be folded or per_timestep, got '{v}'"))),
                }
            }
            _ => return Err(unknown(k, line, "bn")),
        }
        Ok(())
    })
}

fn parse_stage(body: &[Entry], line: usize, index: usize) -> Result<StageSpec> {
    let mut name = format!("stage{}", index + 1);
    let mut down: Option<Downsample> = None;
    let mut blocks = vec![];
    for e in body {
        match e {
            Entry::Kv { key, value, line } if key == "name" => {
                if !value
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
                {
                    return Err(syntax(*line, format!("bad stage name '{value}'")));
                }
                name = value.clone();
            }
            Entry::Kv { key, line, .. } => return Err(unknown(key, *line, "stage")),
            Entry::Section { name: s, body, .. } if s == "downsample" => {
                let mut d = Downsample {
                    kernel: 3,
                    stride: 2,
                    dim: 0,
                };
                kvs(body, "downsample", |k, v, line| {
                    match k {
                        "kernel" => d.kernel = value(v, line, k)?,
                        "stride" => d.stride = value(v, line, k)?,
                        "dim" => d.dim = value(v, line, k)?,
                        _ => return Err(unknown(k, line, "downsample")),
                    }
                    Ok(())
                })?;
                down = Some(d);
            }
            Entry::Section { name: s, body, .. } if s == "block" => {
                let (b, count) = parse_block(body)?;
                blocks.extend(std::iter::repeat_n(b, count));
            }
            Entry::Section { name: s, line, .. } => return Err(unknown(s, *line, "stage")),
        }
    }
    let downsample = down.ok_or_else(|| Error::Config(format!("stage '{name}' (line {line}) has no downsample")))?;
    Ok(StageSpec {
        name,
        downsample,
        blocks,
    })
}

fn parse_block(body: &[Entry]) -> Result<(BlockSpec, usize)> {
    let mut b = BlockSpec {
        token_mixer: TokenMixerKind::Ssc,
        channel_mixer: MixerKind::new(MixerTag::ConvK3, crate::blocks::arch::DEFAULT_EPSILON),
    };
    let mut count = 1;
    kvs(body, "block", |k, v, line| {
        match k {
            "token_mixer" => b.token_mixer = named(v, line)?,
            "channel_mixer" => b.channel_mixer.tag = named(v, line)?,
            "epsilon" => b.channel_mixer.epsilon = value(v, line, k)?,
            "count" => count = value(v, line, k)?,
            _ => return Err(unknown(k, line, "block")),
        }
        Ok(())
    })?;
    Ok((b, count))
}

fn parse_layers(body: &[Entry]) -> Result<Vec<LayerSpec>> {
    let mut out = vec![];
    for e in body {
        let (body, line) = match e {
            Entry::Section { name, body, line } if name == "layer" => (body, *line),
            Entry::Section { name: key, line, .. } | Entry::Kv { key, line, .. } => {
                return Err(unknown(key, *line, "layers"))
            }
        };
        out.push(parse_layer(body, line)?);
    }
    Ok(out)
}

fn parse_layer(body: &[Entry], line: usize) -> Result<LayerSpec> {
    let mut fields: Vec<(String, String, usize)> = vec![];
    kvs(body, "layer", |k, v, l| {
        fields.push((k.into(), v.into(), l));
        Ok(())
    })?;
    let get = |key: &str| {
        fields
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    };
    let op = get("op").ok_or_else(|| syntax(line, "layer needs an 'op'"))?.0;
    let allowed: &[&str] = match op {
        "lif" | "bn" | "ssc" | "attention" => &[],
        "scale" => &["k"],
        "time_bias" => &["values"],
        "conv" => &["kernel", "stride", "dim"],
        "dwconv" => &["kernel"],
        "linear" => &["dim", "bias"],
        "mixer" => &["channel_mixer", "epsilon"],
        "block" => &["token_mixer", "channel_mixer", "epsilon"],
        other => return Err(syntax(line, format!("unknown layer op '{other}'"))),
    };
    for (k, _, l) in &fields {
        if k != "op" && !allowed.contains(&k.as_str()) {
            return Err(unknown(k, *l, &format!("{op} layer")));
        }
    }
    let num = |key: &str, default: usize| -> Result<usize> { get(key).map_or(Ok(default), |(v, l)| value(v, l, key)) };
    let mixer = || -> Result<MixerKind> {
        let tag = get("channel_mixer").map_or(Ok(MixerTag::ConvK3), |(v, l)| named(v, l))?;
        let eps = get("epsilon").map_or(Ok(crate::blocks::arch::DEFAULT_EPSILON), |(v, l)| {
            value(v, l, "epsilon")
        })?;
        Ok(MixerKind::new(tag, eps))
    };
    Ok(match op {
        "lif" => LayerSpec::Lif,
        "bn" => LayerSpec::Bn,
        "ssc" => LayerSpec::Ssc,
        "attention" => LayerSpec::Attention,
        "scale" => LayerSpec::Scale {
            k: get("k").map_or(Ok(1.0), |(v, l)| value(v, l, "k"))?,
        },
        "time_bias" => {
            let (v, l) = get("values").ok_or_else(|| syntax(line, "time_bias needs 'values'"))?;
            LayerSpec::TimeBias {
                values: v
                    .split(',')
                    .map(|x| value(x.trim(), l, "values"))
                    .collect::<Result<_>>()?,
            }
        }
        "conv" => LayerSpec::Conv {
            kernel: num("kernel", 3)?,
            stride: num("stride", 1)?,
            dim: get("dim").map_or(Ok(0), |(v, l)| value(v, l, "dim"))?,
        },
        "dwconv" => LayerSpec::Dwconv {
            kernel: num("kernel", 3)?,
        },
        "linear" => LayerSpec::Linear {
            dim: num("dim", 0)?,
            bias: get("bias").map_or(Ok(false), |(v, l)| parse_bool(v, l, "bias"))?,
        },
        "mixer" => LayerSpec::Mixer { mixer: mixer()? },
        _ => LayerSpec::Block {
            block: BlockSpec {
                token_mixer: get("token_mixer").map_or(Ok(TokenMixerKind::Ssc), |(v, l)| named(v, l))?,
                channel_mixer: mixer()?,
            },
        },
    })
}

/// Canonical text for `spec`; [`parse_arch_config`] reads it back to an
/// equal value.
pub fn serialize_arch(spec: &ArchSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "timesteps = {}", spec.timesteps);
    let _ = writeln!(s, "seed = {}", spec.seed);
    let InputGeometry { c, h, w } = spec.input;
    let _ = writeln!(s, "input {{\n  c = {c}\n  h = {h}\n  w = {w}\n}}");
    let n = &spec.neuron;
    let reset = match n.reset {
        Reset::Soft => "soft",
        Reset::Hard => "hard",
    };
    let mode = match n.mode {
        NeuronMode::Spike => "spike",
        NeuronMode::Soft => "soft",
    };
    let _ = writeln!(
        s,
        "neuron {{\n  beta = {:?}\n  theta = {:?}\n  reset = {reset}\n  a = {:?}\n  mode = {mode}\n}}",
        n.beta, n.theta, n.a
    );
    let axes = match spec.bn.axes {
        BnAxes::Folded => "folded",
        BnAxes::PerTimestep => "per_timestep",
    };
    let _ = writeln!(
        s,
        "bn {{\n  stats = {}\n  axes = {axes}\n  eps = {:?}\n}}",
        if spec.bn.stats { "on" } else { "off" },
        spec.bn.eps
    );
    for st in &spec.stages {
        let d = st.downsample;
        let _ = writeln!(s, "stage {{\n  name = {}", st.name);
        let _ = writeln!(
            s,
            "  downsample {{\n    kernel = {}\n    stride = {}\n    dim = {}\n  }}",
            d.kernel, d.stride, d.dim
        );
        for b in &st.blocks {
            let _ = writeln!(
                s,
                "  block {{\n    token_mixer = {}\n    channel_mixer = {}\n    epsilon = {:?}\n  }}",
                b.token_mixer.as_str(),
                b.channel_mixer.tag,
                b.channel_mixer.epsilon
            );
        }
        let _ = writeln!(s, "}}");
    }
    if let Some(layers) = &spec.layers {
        let _ = writeln!(s, "layers {{");
        for l in layers {
            let _ = writeln!(s, "  layer {{\n    op = {}", l.op_name());
            let mut kv = |k: &str, v: String| {
                let _ = writeln!(s, "    {k} = {v}");
            };
            match l {
                LayerSpec::Scale { k } => kv("k", format!("{k:?}")),
                LayerSpec::TimeBias { values } => kv(
                    "values",
                    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", "),
                ),
                LayerSpec::Conv { kernel, stride, dim } => {
                    kv("kernel", kernel.to_string());
                    kv("stride", stride.to_string());
                    kv("dim", dim.to_string());
                }
                LayerSpec::Dwconv { kernel } => kv("kernel", kernel.to_string()),
                LayerSpec::Linear { dim, bias } => {
                    kv("dim", dim.to_string());
                    kv("bias", if *bias { "on" } else { "off" }.into());
                }
                LayerSpec::Mixer { mixer } => {
                    kv("channel_mixer", mixer.tag.to_string());
                    kv("epsilon", format!("{:?}", mixer.epsilon));
                }
                LayerSpec::Block { block } => {
                    kv("token_mixer", block.token_mixer.as_str().into());
                    kv("channel_mixer", block.channel_mixer.tag.to_string());
                    kv("epsilon", format!("{:?}", block.channel_mixer.epsilon));
                }
                LayerSpec::Lif | LayerSpec::Bn | LayerSpec::Ssc | LayerSpec::Attention => {}
            }
            let _ = writeln!(s, "  }}");
        }
        let _ = writeln!(s, "}}");
    }
    s
}

/// A preset name or a path to a config file.
pub fn load_arch(arg: &str) -> Result<ArchSpec> {
    let path = std::path::Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_arch_config(&text)
    } else {
        preset(arg)
    }
}
