//! Randomized oracle checks shared by `sterf verify` and the test suites.

use serde::Serialize;

use crate::blocks::{ArchSpec, BlockSpec, InputGeometry, LayerSpec, MixerKind, MixerTag, Network, TokenMixerKind};
use crate::erf::{sample_input, spatial_erf, temporal_erf, ErfOptions};
use crate::error::Result;
use crate::neuron::{NeuronMode, Reset};
use crate::oracle::{
    brute_force_spatial, brute_force_temporal, compare, compare_grids, compare_vectors, finite_difference,
    jacobian_aggregate, kink_clearance, lif_chain_closed_form, ComparisonReport, Span, FD_STEP,
};
use crate::rng::NormalStream;
use crate::tensor::Tensor5;

/// Tolerance of the single-pass versus one-hot aggregation checks.
pub const EQUIVALENCE_ATOL: f64 = 1e-10;
/// Relative tolerance of tape versus finite-difference gradients.
pub const FD_RTOL: f64 = 1e-5;
/// Absolute floor for gradients whose magnitude is at the level of
/// finite-difference rounding noise.
pub const FD_ATOL: f64 = 1e-8;
/// Minimum distance of every membrane from a soft-mode kink.
pub const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub report: ComparisonReport,
}

struct Picker(NormalStream);

impl Picker {
    fn below(&mut self, n: usize) -> usize {
        ((self.0.uniform() * n as f64) as usize).min(n - 1)
    }

    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.below(xs.len())]
    }
}

/// A small random layer network: at most four layers, `T <= 3`, at most
/// 16x16, with one channel mixer of kind `mixer`.
pub fn random_arch(seed: u64, mixer: MixerTag, mode: NeuronMode, max_side: usize) -> ArchSpec {
    let mut p = Picker(NormalStream::new(seed));
    let t = 1 + p.below(3);
    let c = 1 + p.below(3);
    let side = p.pick(&[4, 6, 8, 12, 16]).min(max_side);
    let eps = p.pick(&[2.0, 4.0]);
    let kind = MixerKind::new(mixer, eps);
    let mut layers = vec![];
    let n = 1 + p.below(4);
    let mixer_at = p.below(n);
    for i in 0..n {
        let l = if i == mixer_at {
            if p.below(2) == 0 {
                LayerSpec::Mixer { mixer: kind }
            } else {
                LayerSpec::Block {
                    block: BlockSpec {
                        token_mixer: TokenMixerKind::Ssc,
                        channel_mixer: kind,
                    },
                }
            }
        } else {
            match p.below(5) {
                0 => LayerSpec::Conv {
                    kernel: p.pick(&[1, 3, 5]),
                    stride: 1,
                    dim: c,
                },
                1 => LayerSpec::Bn,
                2 => LayerSpec::Lif,
                3 => LayerSpec::Dwconv { kernel: 3 },
                _ => LayerSpec::Ssc,
            }
        };
        layers.push(l);
    }
    let mut spec = ArchSpec::from_layers(t, InputGeometry { c, h: side, w: side }, layers);
    spec.seed = seed;
    spec.neuron.mode = mode;
    spec.neuron.reset = if p.below(2) == 0 { Reset::Soft } else { Reset::Hard };
    spec.bn.stats = p.below(4) != 0;
    spec
}

/// Single-pass spatial and temporal ERFs against one-hot aggregation.
pub fn equivalence_checks(name: &str, spec: &ArchSpec, seed: u64) -> Result<Vec<Check>> {
    let net = Network::build(spec)?;
    let opts = ErfOptions {
        samples: 1,
        seed,
        threads: Some(1),
        ..ErfOptions::default()
    };
    let x = sample_input(&net, seed, 0)?;
    let span = Span::whole(&net);
    let s = spatial_erf(&net, "output", &opts)?;
    let bs = brute_force_spatial(&net, span, &x)?;
    let t = temporal_erf(&net, "output", &opts)?;
    let bt = brute_force_temporal(&net, span, &x)?;
    Ok(vec![
        Check {
            name: format!("{name} spatial"),
            report: compare_grids(&s.grid, &bs, EQUIVALENCE_ATOL, 0.0)?,
        },
        Check {
            name: format!("{name} temporal"),
            report: compare_vectors(&t.values, &bt, EQUIVALENCE_ATOL, 0.0)?,
        },
    ])
}

/// Tape gradient of `<stimulus, output>` against central differences, on
/// the first input sub-stream whose membranes clear every kink. Batch
/// statistics are always differentiated here: detached statistics still
/// move in the forward pass, which finite differences would see.
pub fn fd_check(name: &str, spec: &ArchSpec, seed: u64) -> Result<Check> {
    let mut spec = spec.clone();
    spec.bn.stats = true;
    let net = Network::build(&spec)?;
    let span = Span::whole(&net);
    let mut index = 0;
    let x = loop {
        let x = sample_input(&net, seed, index)?;
        if kink_clearance(&net, span, &x)? > KINK_CLEARANCE || index >= 200 {
            break x;
        }
        index += 1;
    };
    let stim = Tensor5::randn_from(
        net.boundary_shape(span.stimulus, 1),
        &mut NormalStream::substream(seed ^ 0x5eed, 0),
    )?;
    let tape = jacobian_aggregate(&net, span, &stim, &x)?;
    let fd = finite_difference(&net, span, &stim, &x, FD_STEP)?;
    Ok(Check {
        name: name.to_string(),
        report: compare(&tape, &fd, FD_ATOL, FD_RTOL)?,
    })
}

/// A sub-threshold soft-reset LIF chain: inputs scaled far below threshold,
/// with a final-step bias that lifts only the last membrane into the
/// surrogate window.
pub fn lif_chain_arch(beta: f64, timesteps: usize) -> ArchSpec {
    let mut bias = vec![0.0; timesteps];
    bias[timesteps - 1] = 1.0;
    let mut spec = ArchSpec::from_layers(
        timesteps,
        InputGeometry { c: 1, h: 4, w: 4 },
        vec![
            LayerSpec::Scale { k: 1e-3 },
            LayerSpec::TimeBias { values: bias },
            LayerSpec::Lif,
        ],
    );
    spec.neuron.beta = beta;
    spec.neuron.mode = NeuronMode::Soft;
    spec.neuron.reset = Reset::Soft;
    spec
}

/// `ERF^T(τ) / ERF^T(0)` against `β^τ`.
pub fn lif_decay_check(beta: f64, timesteps: usize) -> Result<Check> {
    let spec = lif_chain_arch(beta, timesteps);
    let net = Network::build(&spec)?;
    let opts = ErfOptions {
        samples: 4,
        seed: 7,
        threads: Some(1),
        ..ErfOptions::default()
    };
    let t = temporal_erf(&net, "output", &opts)?;
    let ratios: Vec<f64> = t.values.iter().map(|v| v / t.values[0]).collect();
    let want = (0..timesteps)
        .map(|tau| lif_chain_closed_form(&spec.neuron, timesteps, tau))
        .collect::<Result<Vec<_>>>()?;
    Ok(Check {
        name: format!("lif decay beta={beta} T={timesteps}"),
        report: compare_vectors(&ratios, &want, 1e-9, 0.0)?,
    })
}

/// The full oracle suite run by `sterf verify`.
pub fn run_suite(networks: usize) -> Result<Vec<Check>> {
    let mut out = vec![];
    for i in 0..networks {
        let tag = MixerTag::ALL[i % 3];
        let spec = random_arch(1000 + i as u64, tag, NeuronMode::Spike, 16);
        out.extend(equivalence_checks(
            &format!("net{i:02} ({tag}, spike)"),
            &spec,
            i as u64,
        )?);
    }
    for i in 0..networks.min(10) {
        let tag = MixerTag::ALL[i % 3];
        let spec = random_arch(2000 + i as u64, tag, NeuronMode::Soft, 6);
        out.push(fd_check(&format!("fd net{i:02} ({tag}, soft)"), &spec, i as u64)?);
    }
    for beta in [0.3, 0.5, 0.9] {
        out.push(lif_decay_check(beta, 5)?);
    }
    let stim_one = {
        let spec = random_arch(3000, MixerTag::Srb, NeuronMode::Spike, 6);
        let net = Network::build(&spec)?;
        let x = sample_input(&net, 1, 0)?;
        let span = Span::whole(&net);
        let shape = net.boundary_shape(span.stimulus, 1);
        let agg = jacobian_aggregate(&net, span, &Tensor5::one_hot(shape, shape.numel() / 2), &x)?;
        let single = crate::erf::stimulus_gradient(&net, span, x, |s| Tensor5::one_hot(s, s.numel() / 2))?;
        compare(&agg, &single, 0.0, 0.0)?
    };
    out.push(Check {
        name: "single-element stimulus".into(),
        report: stim_one,
    });
    Ok(out)
}
