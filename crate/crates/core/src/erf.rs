//! Spatio-temporal effective receptive fields by gradient stimulus.
//!
//! A unit adjoint is placed on the probed feature map (the spatial centre at
//! every timestep and channel, or every position at the last timestep), one
//! backward pass runs, and the input adjoint is reduced to an `H x W` map or
//! a per-delay vector. Samples draw `N(0, 1)` inputs from per-sample
//! sub-streams and may run concurrently; results are reduced in sample
//! order so thread count never changes the output bits.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::BackwardOptions;
use crate::blocks::{Network, ReadAt};
use crate::error::{Error, Result};
use crate::oracle::Span;
use crate::rng::NormalStream;
use crate::tensor::{Shape5, Tensor5};

pub const DEFAULT_SAMPLES: usize = 60;
pub const DEFAULT_GAMMA: f64 = 0.5;
/// Environment variable capping sample parallelism.
pub const THREADS_ENV: &str = "STERF_THREADS";

/// Row-major `H x W` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!("{} values for a {h}x{w} grid", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn to_tensor(&self) -> Tensor5 {
        Tensor5::from_vec(Shape5::new(1, 1, 1, self.h, self.w), self.data.clone()).expect("grid size")
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelAgg {
    #[default]
    Sum,
    Mean,
    /// Sum for the main grid, plus one grid per input channel.
    PerChannel,
}

impl FromStr for ChannelAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ChannelAgg::Sum),
            "mean" => Ok(ChannelAgg::Mean),
            "per-channel" | "per_channel" => Ok(ChannelAgg::PerChannel),
            other => Err(Error::Config(format!(
                "unknown channel aggregation '{other}' (expected sum, mean or per-channel)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErfOptions {
    pub samples: usize,
    pub seed: u64,
    pub channels: ChannelAgg,
    pub read_at: ReadAt,
    /// Worker threads; `None` reads [`THREADS_ENV`], else all cores.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for ErfOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            channels: ChannelAgg::Sum,
            read_at: ReadAt::NetworkInput,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusKind {
    Spatial,
    Temporal,
}

impl StimulusKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StimulusKind::Spatial => "spatial",
            StimulusKind::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfMeta {
    pub samples: usize,
    pub seed: u64,
    pub probe: String,
    pub timesteps: usize,
    pub stimulus: StimulusKind,
    pub read_at: ReadAt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfSpatial {
    /// Signed map: timestep mean, channel aggregate, sample mean.
    pub grid: Grid,
    /// Per-input-channel maps when requested.
    pub per_channel: Option<Vec<Grid>>,
    pub meta: ErfMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfTemporal {
    /// `values[τ]`: summed input gradient at timestep `T-1-τ`.
    pub values: Vec<f64>,
    pub meta: ErfMeta,
}

/// Unit adjoint at `(⌊H/2⌋, ⌊W/2⌋)` for every timestep, batch entry and
/// channel.
pub fn make_spatial_stimulus(shape: Shape5) -> Tensor5 {
    let mut s = Tensor5::zeros(shape);
    let (ch, cw) = (shape.h / 2, shape.w / 2);
    for t in 0..shape.t {
        for b in 0..shape.b {
            for c in 0..shape.c {
                s.set(t, b, c, ch, cw, 1.0);
            }
        }
    }
    s
}

/// Unit adjoint at every position of the last timestep.
pub fn make_temporal_stimulus(shape: Shape5) -> Tensor5 {
    let mut s = Tensor5::zeros(shape);
    let step = shape.step();
    let n = s.len();
    s.data_mut()[n - step..].iter_mut().for_each(|v| *v = 1.0);
    s
}

/// The `index`-th analysis input: i.i.d. `N(0, 1)` from sub-stream `index`.
pub fn sample_input(net: &Network, seed: u64, index: usize) -> Result<Tensor5> {
    Tensor5::randn_from(net.input_shape(1), &mut NormalStream::substream(seed, index as u64))
}

/// Input adjoint for one stimulus and one input.
pub fn stimulus_gradient(
    net: &Network,
    span: Span,
    input: Tensor5,
    make: impl Fn(Shape5) -> Tensor5,
) -> Result<Tensor5> {
    let f = net.forward(input, span.stimulus)?;
    let out = f.boundaries[span.stimulus];
    let stim = make(f.tape.shape(out));
    let read = f.boundaries[span.read];
    let grads = f.tape.backward(&[(out, &stim)], BackwardOptions::default())?;
    Ok(grads.get_or_zeros(&f.tape, read))
}

/// Per-channel `H x W` maps of the timestep-mean adjoint (batch summed).
fn channel_maps(g: &Tensor5) -> Vec<Grid> {
    let s = g.shape();
    let plane = s.plane();
    let mut maps = vec![Grid::zeros(s.h, s.w); s.c];
    for t in 0..s.t {
        for b in 0..s.b {
            for (c, m) in maps.iter_mut().enumerate() {
                let o = s.offset(t, b, c, 0, 0);
                for (acc, v) in m.data.iter_mut().zip(&g.data()[o..o + plane]) {
                    *acc += v;
                }
            }
        }
    }
    for m in &mut maps {
        m.data.iter_mut().for_each(|v| *v /= s.t as f64);
    }
    maps
}

fn combine(maps: &[Grid], agg: ChannelAgg) -> Grid {
    let mut g = Grid::zeros(maps[0].h, maps[0].w);
    for m in maps {
        for (a, v) in g.data.iter_mut().zip(&m.data) {
            *a += v;
        }
    }
    if agg == ChannelAgg::Mean {
        let n = maps.len() as f64;
        g.data.iter_mut().for_each(|v| *v /= n);
    }
    g
}

fn temporal_values(g: &Tensor5) -> Vec<f64> {
    let s = g.shape();
    let step = s.step();
    (0..s.t)
        .map(|tau| g.data()[(s.t - 1 - tau) * step..(s.t - tau) * step].iter().sum())
        .collect()
}

/// Thread count from the option, then [`THREADS_ENV`], then all cores.
pub fn resolve_threads(threads: Option<usize>) -> Result<usize> {
    if let Some(n) = threads {
        return Ok(n.max(1));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|n| n.max(1))
            .map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a positive integer"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Evaluates `f(i)` for `i in 0..n` on a bounded pool, results in index order.
fn map_samples<T: Send>(n: usize, threads: Option<usize>, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let threads = resolve_threads(threads)?;
    if threads == 1 || n == 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

fn resolve(net: &Network, probe: &str, opts: &ErfOptions) -> Result<Span> {
    if opts.samples == 0 {
        return Err(Error::Parameter("samples must be >= 1".into()));
    }
    Ok(Span::for_probe(&net.probe(probe)?, opts.read_at))
}

fn meta(net: &Network, probe: &str, opts: &ErfOptions, stimulus: StimulusKind) -> ErfMeta {
    ErfMeta {
        samples: opts.samples,
        seed: opts.seed,
        probe: probe.to_string(),
        timesteps: net.timesteps(),
        stimulus,
        read_at: opts.read_at,
    }
}

/// Per-channel spatial maps of sample `index`.
pub fn spatial_sample(net: &Network, span: Span, seed: u64, index: usize) -> Result<Vec<Grid>> {
    let x = sample_input(net, seed, index)?;
    Ok(channel_maps(&stimulus_gradient(net, span, x, make_spatial_stimulus)?))
}

/// Temporal vector of sample `index`.
pub fn temporal_sample(net: &Network, span: Span, seed: u64, index: usize) -> Result<Vec<f64>> {
    let x = sample_input(net, seed, index)?;
    Ok(temporal_values(&stimulus_gradient(
        net,
        span,
        x,
        make_temporal_stimulus,
    )?))
}

pub fn spatial_erf(net: &Network, probe: &str, opts: &ErfOptions) -> Result<ErfSpatial> {
    let span = resolve(net, probe, opts)?;
    let per_sample = map_samples(opts.samples, opts.threads, |i| spatial_sample(net, span, opts.seed, i))?;
    let n = opts.samples as f64;
    let mut maps = per_sample[0].clone();
    for m in &mut maps {
        m.data.iter_mut().for_each(|v| *v = 0.0);
    }
    for sample in &per_sample {
        for (acc, m) in maps.iter_mut().zip(sample) {
            for (a, v) in acc.data.iter_mut().zip(&m.data) {
                *a += v;
            }
        }
    }
    for m in &mut maps {
        m.data.iter_mut().for_each(|v| *v /= n);
    }
    let grid = combine(&maps, opts.channels);
    if !grid.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            node: 0,
            message: "non-finite spatial ERF".into(),
        });
    }
    Ok(ErfSpatial {
        grid,
        per_channel: (opts.channels == ChannelAgg::PerChannel).then_some(maps),
        meta: meta(net, probe, opts, StimulusKind::Spatial),
    })
}

pub fn temporal_erf(net: &Network, probe: &str, opts: &ErfOptions) -> Result<ErfTemporal> {
    let span = resolve(net, probe, opts)?;
    let per_sample = map_samples(opts.samples, opts.threads, |i| temporal_sample(net, span, opts.seed, i))?;
    let mut values = vec![0.0; net.timesteps()];
    for s in &per_sample {
        for (a, v) in values.iter_mut().zip(s) {
            *a += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= opts.samples as f64);
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            node: 0,
            message: "non-finite temporal ERF".into(),
        });
    }
    Ok(ErfTemporal {
        values,
        meta: meta(net, probe, opts, StimulusKind::Temporal),
    })
}

/// Scalar summaries of an ERF map's absolute mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadReport {
    /// Smallest radius about the centroid holding at least 95% of the mass.
    pub r95: f64,
    /// Mass-weighted `(row, col)`.
    pub centroid: (f64, f64),
    /// Shannon entropy (nats) of the normalized mass.
    pub mass_entropy: f64,
    pub zero_mass: bool,
}

/// Fraction of mass [`SpreadReport::r95`] must enclose.
pub const SPREAD_FRACTION: f64 = 0.95;

pub fn spread_metrics(grid: &Grid) -> SpreadReport {
    let total: f64 = grid.data.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return SpreadReport {
            r95: 0.0,
            centroid: ((grid.h / 2) as f64, (grid.w / 2) as f64),
            mass_entropy: 0.0,
            zero_mass: true,
        };
    }
    let mass: Vec<f64> = grid.data.iter().map(|v| v.abs() / total).collect();
    let (mut cr, mut cc, mut entropy) = (0.0, 0.0, 0.0);
    for (i, &p) in mass.iter().enumerate() {
        cr += p * (i / grid.w) as f64;
        cc += p * (i % grid.w) as f64;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    let mut by_dist: Vec<(f64, f64)> = mass
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let dr = (i / grid.w) as f64 - cr;
            let dc = (i % grid.w) as f64 - cc;
            ((dr * dr + dc * dc).sqrt(), p)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut r95 = 0.0;
    for (d, p) in by_dist {
        acc += p;
        r95 = d;
        if acc >= SPREAD_FRACTION - 1e-12 {
            break;
        }
    }
    // a point mass sits at its own centroid up to rounding
    if r95 < 1e-9 {
        r95 = 0.0;
    }
    SpreadReport {
        r95,
        centroid: (cr, cc),
        mass_entropy: entropy.max(0.0),
        zero_mass: false,
    }
}

/// `(|g| / max|g|)^gamma`; all zeros for an all-zero grid.
pub fn normalize_for_viz(grid: &Grid, gamma: f64) -> Result<Grid> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma must be > 0, got {gamma}")));
    }
    let max = grid.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let data = if max == 0.0 {
        vec![0.0; grid.data.len()]
    } else {
        grid.data.iter().map(|v| (v.abs() / max).powf(gamma)).collect()
    };
    Grid::new(grid.h, grid.w, data)
}

#[cfg(test)]
mod tests;
