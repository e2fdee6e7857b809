//! The `sterf` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
//! (non-finite values, failed oracle checks, irreproducible re-runs).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::blocks::{ArchSpec, MixerKind, MixerTag, Network, ReadAt, WeightFile};
use crate::config::load_arch;
use crate::erf::{
    normalize_for_viz, spatial_erf, spread_metrics, temporal_erf, ChannelAgg, ErfOptions, DEFAULT_GAMMA,
    DEFAULT_SAMPLES,
};
use crate::error::{Error, Result};
use crate::io::{
    file_sha256, write_grid_csv, write_json, write_pgm, write_table_csv, write_temporal_csv, write_text, ManifestArch,
    OutputFile, RunManifest, WeightSource, MANIFEST_VERSION,
};
use crate::neuron::NeuronMode;
use crate::verify::run_suite;

#[derive(Debug, Parser)]
#[command(
    name = "sterf",
    version,
    about = "Spatio-temporal effective receptive fields of spiking networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Spatial ERF map of one probe.
    Spatial(AnalysisArgs),
    /// Temporal ERF vector of one probe.
    Temporal(AnalysisArgs),
    /// Spread metrics of several architectures at every stage probe.
    Compare(CompareArgs),
    /// Run the oracle suite and print comparison reports.
    Verify(VerifyArgs),
    /// Re-run a manifest and check every output hash.
    Rerun(RerunArgs),
    /// List built-in presets.
    Presets,
    /// Write the initial weights of an architecture to a weight file.
    Weights(WeightsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Spike,
    Soft,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ChannelArg {
    Sum,
    Mean,
    PerChannel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReadAtArg {
    NetworkInput,
    StageInput,
}

#[derive(Debug, Clone, Args)]
struct NetArgs {
    /// Channel mixer of stage1*/stage2* blocks.
    #[arg(long, value_parser = ["conv_k3", "mlpixer", "srb"])]
    mixer: Option<String>,
    /// Channel-mixer expansion ratio (with --mixer).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Backpropagate through batch statistics.
    #[arg(long, value_enum)]
    bn_stats: Option<OnOff>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Raw weight file instead of seeded initialization.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct ProtocolArgs {
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "sum")]
    channels: ChannelArg,
    #[arg(long, value_enum, default_value = "network-input")]
    read_at: ReadAtArg,
    /// Heatmap exponent in (0, 1].
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Worker threads (default: STERF_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct AnalysisArgs {
    /// Config file or preset name.
    #[arg(long)]
    arch: String,
    #[arg(long, default_value = "output")]
    probe: String,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Debug, Clone, Args)]
struct CompareArgs {
    /// Config files or preset names (at least two).
    #[arg(long, required = true)]
    arch: Vec<String>,
    /// Probes to compare (default: every stage boundary).
    #[arg(long)]
    probe: Vec<String>,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    /// Number of randomized networks.
    #[arg(long, default_value_t = 25)]
    networks: usize,
}

#[derive(Debug, Clone, Args)]
struct RerunArgs {
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct WeightsArgs {
    #[arg(long)]
    arch: String,
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Everything a run depends on; rebuilt verbatim from a manifest.
#[derive(Debug, Clone)]
pub struct Plan {
    pub command: String,
    pub archs: Vec<ManifestArch>,
    pub probes: Vec<String>,
    pub opts: ErfOptions,
    pub gamma: f64,
}

fn apply_net_args(mut spec: ArchSpec, a: &NetArgs) -> Result<ArchSpec> {
    if a.mixer.is_some() || a.epsilon.is_some() {
        let tag: MixerTag = a.mixer.as_deref().unwrap_or("conv_k3").parse()?;
        spec = spec.with_channel_mixer(MixerKind::new(
            tag,
            a.epsilon.unwrap_or(crate::blocks::arch::DEFAULT_EPSILON),
        ));
    }
    if let Some(b) = a.bn_stats {
        spec.bn.stats = matches!(b, OnOff::On);
    }
    if let Some(m) = a.mode {
        spec.neuron.mode = match m {
            ModeArg::Spike => NeuronMode::Spike,
            ModeArg::Soft => NeuronMode::Soft,
        };
    }
    spec.validate()?;
    Ok(spec)
}

fn weight_source(path: Option<&Path>) -> Result<WeightSource> {
    match path {
        None => Ok(WeightSource::random()),
        Some(p) => Ok(WeightSource::File {
            path: p.to_path_buf(),
            sha256: file_sha256(p)?,
        }),
    }
}

fn label_for(arch: &str, net: &NetArgs) -> String {
    let stem = Path::new(arch)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(arch)
        .to_string();
    match &net.mixer {
        Some(m) => format!("{stem}+{m}"),
        None => stem,
    }
}

fn manifest_arch(arch: &str, net: &NetArgs) -> Result<ManifestArch> {
    let spec = apply_net_args(load_arch(arch)?, net)?;
    let mut standins = vec![];
    if spec.uses_attention_standin() {
        standins.push("attention_standin".into());
    }
    Ok(ManifestArch {
        label: label_for(arch, net),
        arch: spec,
        weights: weight_source(net.weights.as_deref())?,
        standin_components: standins,
    })
}

fn erf_options(p: &ProtocolArgs) -> ErfOptions {
    ErfOptions {
        samples: p.samples,
        seed: p.seed,
        channels: match p.channels {
            ChannelArg::Sum => ChannelAgg::Sum,
            ChannelArg::Mean => ChannelAgg::Mean,
            ChannelArg::PerChannel => ChannelAgg::PerChannel,
        },
        read_at: match p.read_at {
            ReadAtArg::NetworkInput => ReadAt::NetworkInput,
            ReadAtArg::StageInput => ReadAt::StageInput,
        },
        threads: p.threads,
    }
}

fn build(a: &ManifestArch) -> Result<Network> {
    match &a.weights {
        WeightSource::RandomInit(_) => Network::build(&a.arch),
        WeightSource::File { path, sha256 } => {
            let actual = file_sha256(path)?;
            if &actual != sha256 {
                return Err(Error::Config(format!(
                    "weight file {} has hash {actual}, expected {sha256}",
                    path.display()
                )));
            }
            Network::build_with_weights(&a.arch, WeightFile::read(path)?)
        }
    }
}

fn unique_labels(archs: &mut [ManifestArch]) {
    let labels: Vec<String> = archs.iter().map(|a| a.label.clone()).collect();
    for (i, a) in archs.iter_mut().enumerate() {
        if labels.iter().filter(|l| **l == a.label).count() > 1 {
            a.label = format!("{}-{}", a.label, i + 1);
        }
    }
}

/// Runs a plan, writing every output under `out`; returns the written
/// files in a fixed order.
pub fn execute(plan: &Plan, out: &Path, log: &mut dyn FnMut(String)) -> Result<Vec<OutputFile>> {
    if !(plan.gamma > 0.0 && plan.gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must be in (0, 1], got {}", plan.gamma)));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for a in plan.archs.iter().filter(|a| !a.standin_components.is_empty()) {
        log(format!(
            "note: '{}' uses stand-in components: {}",
            a.label,
            a.standin_components.join(", ")
        ));
    }
    let mut files = vec![];
    match plan.command.as_str() {
        "spatial" => {
            let net = build(&plan.archs[0])?;
            let probe = &plan.probes[0];
            let e = spatial_erf(&net, probe, &plan.opts)?;
            files.push(write_grid_csv(out, "grid.csv", &e.grid)?);
            files.push(write_pgm(out, "heatmap.pgm", &normalize_for_viz(&e.grid, plan.gamma)?)?);
            let spread = spread_metrics(&e.grid);
            files.push(write_json(out, "spread.json", &spread)?);
            if let Some(maps) = &e.per_channel {
                for (c, m) in maps.iter().enumerate() {
                    files.push(write_grid_csv(out, &format!("grid_c{c}.csv"), m)?);
                }
            }
            log(format!(
                "spatial ERF at '{probe}': {}x{} grid, r95 = {:.3}, entropy = {:.3}",
                e.grid.h, e.grid.w, spread.r95, spread.mass_entropy
            ));
        }
        "temporal" => {
            let net = build(&plan.archs[0])?;
            let probe = &plan.probes[0];
            let e = temporal_erf(&net, probe, &plan.opts)?;
            files.push(write_temporal_csv(out, "temporal.csv", &e.values)?);
            log(format!("temporal ERF at '{probe}': {:?}", e.values));
        }
        "compare" => files.extend(execute_compare(plan, out, log)?),
        other => return Err(Error::Config(format!("unknown command '{other}' in plan"))),
    }
    Ok(files)
}

fn execute_compare(plan: &Plan, out: &Path, log: &mut dyn FnMut(String)) -> Result<Vec<OutputFile>> {
    if plan.archs.len() < 2 {
        return Err(Error::Config("compare needs at least two architectures".into()));
    }
    let nets = plan.archs.iter().map(build).collect::<Result<Vec<_>>>()?;
    let shape0 = nets[0].input_shape(1);
    for (a, n) in plan.archs.iter().zip(&nets).skip(1) {
        if n.input_shape(1) != shape0 {
            return Err(Error::Config(format!(
                "'{}' has input shape {}, '{}' has {shape0}",
                a.label,
                n.input_shape(1),
                plan.archs[0].label
            )));
        }
    }
    let mut files = vec![];
    let mut rows = vec![];
    for (a, net) in plan.archs.iter().zip(&nets) {
        for probe in &plan.probes {
            let e = spatial_erf(net, probe, &plan.opts)?;
            let s = spread_metrics(&e.grid);
            files.push(write_grid_csv(out, &format!("{}/{probe}.csv", a.label), &e.grid)?);
            files.push(write_pgm(
                out,
                &format!("{}/{probe}.pgm", a.label),
                &normalize_for_viz(&e.grid, plan.gamma)?,
            )?);
            rows.push(vec![
                a.label.clone(),
                probe.clone(),
                crate::io::fmt_f64(s.r95),
                crate::io::fmt_f64(s.mass_entropy),
                crate::io::fmt_f64(s.centroid.0),
                crate::io::fmt_f64(s.centroid.1),
                s.zero_mass.to_string(),
            ]);
        }
    }
    let header = [
        "config",
        "probe",
        "r95",
        "mass_entropy",
        "centroid_row",
        "centroid_col",
        "zero_mass",
    ];
    files.push(write_table_csv(out, "compare.csv", &header, &rows)?);
    let width = rows.iter().map(|r| r[0].len()).max().unwrap_or(6).max(6);
    let mut table = format!(
        "{:<width$}  {:<10}  {:>10}  {:>10}\n",
        "config", "probe", "r95", "entropy"
    );
    for r in &rows {
        let num = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        table.push_str(&format!(
            "{:<width$}  {:<10}  {:>10.4}  {:>10.4}\n",
            r[0],
            r[1],
            num(&r[2]),
            num(&r[3])
        ));
    }
    files.push(write_text(out, "compare.txt", &table)?);
    log(table.trim_end().to_string());
    Ok(files)
}

fn stage_probes(net: &Network) -> Vec<String> {
    let names = net.probe_names();
    let inner = &names[1..names.len() - 1];
    if inner.is_empty() {
        vec!["output".into()]
    } else {
        inner.to_vec()
    }
}

fn write_manifest(plan: &Plan, out: &Path, outputs: Vec<OutputFile>, started: Instant) -> Result<()> {
    let m = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool: "sterf".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: plan.command.clone(),
        archs: plan.archs.clone(),
        seed: plan.opts.seed,
        samples: plan.opts.samples,
        stimulus: if plan.command == "temporal" {
            "temporal"
        } else {
            "spatial"
        }
        .into(),
        input_distribution: "normal(0,1)".into(),
        stimulus_value: 1.0,
        probes: plan.probes.clone(),
        read_at: plan.opts.read_at,
        channels: plan.opts.channels,
        gamma: plan.gamma,
        outputs,
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(out, "manifest.json", &m)?;
    Ok(())
}

/// Rebuilds the plan recorded in a manifest.
pub fn plan_from_manifest(m: &RunManifest, threads: Option<usize>) -> Plan {
    Plan {
        command: m.command.clone(),
        archs: m.archs.clone(),
        probes: m.probes.clone(),
        opts: ErfOptions {
            samples: m.samples,
            seed: m.seed,
            channels: m.channels,
            read_at: m.read_at,
            threads,
        },
        gamma: m.gamma,
    }
}

fn run_command(cmd: Command, log: &mut dyn FnMut(String)) -> Result<()> {
    let started = Instant::now();
    match cmd {
        Command::Spatial(a) => analysis("spatial", a, started, log),
        Command::Temporal(a) => analysis("temporal", a, started, log),
        Command::Compare(c) => {
            if c.arch.len() < 2 {
                return Err(Error::Config("compare needs at least two --arch values".into()));
            }
            let mut archs = c
                .arch
                .iter()
                .map(|a| manifest_arch(a, &c.net))
                .collect::<Result<Vec<_>>>()?;
            unique_labels(&mut archs);
            let probes = if c.probe.is_empty() {
                stage_probes(&build(&archs[0])?)
            } else {
                c.probe.clone()
            };
            let plan = Plan {
                command: "compare".into(),
                archs,
                probes,
                opts: erf_options(&c.protocol),
                gamma: c.protocol.gamma,
            };
            let files = execute(&plan, &c.protocol.out, log)?;
            write_manifest(&plan, &c.protocol.out, files, started)
        }
        Command::Verify(v) => {
            let checks = run_suite(v.networks)?;
            let mut failed = 0;
            for c in &checks {
                if !c.report.pass {
                    failed += 1;
                }
                log(format!("{:<40} {}", c.name, c.report));
            }
            log(format!("{} checks, {failed} failed", checks.len()));
            if failed > 0 {
                return Err(Error::Numeric {
                    node: 0,
                    message: format!("{failed} oracle checks failed"),
                });
            }
            Ok(())
        }
        Command::Rerun(r) => {
            let m = RunManifest::read(&r.manifest)?;
            let plan = plan_from_manifest(&m, r.threads);
            let files = execute(&plan, &r.out, log)?;
            write_manifest(&plan, &r.out, files.clone(), started)?;
            let mismatched: Vec<_> = m
                .outputs
                .iter()
                .filter(|o| !files.contains(o))
                .map(|o| o.path.clone())
                .collect();
            if mismatched.is_empty() && files.len() == m.outputs.len() {
                log(format!("{} outputs reproduced bit for bit", files.len()));
                Ok(())
            } else {
                Err(Error::Numeric {
                    node: 0,
                    message: format!("outputs differ from manifest: {}", mismatched.join(", ")),
                })
            }
        }
        Command::Presets => {
            for p in crate::blocks::preset_names() {
                log(p);
            }
            Ok(())
        }
        Command::Weights(w) => {
            let a = manifest_arch(&w.arch, &w.net)?;
            let wf = build(&a)?.weight_file();
            wf.write(&w.out)?;
            log(format!(
                "wrote {} tensors to {} (sha256 {})",
                wf.tensors.len(),
                w.out.display(),
                wf.sha256()
            ));
            Ok(())
        }
    }
}

fn analysis(command: &str, a: AnalysisArgs, started: Instant, log: &mut dyn FnMut(String)) -> Result<()> {
    let arch = manifest_arch(&a.arch, &a.net)?;
    let plan = Plan {
        command: command.into(),
        archs: vec![arch],
        probes: vec![a.probe.clone()],
        opts: erf_options(&a.protocol),
        gamma: a.protocol.gamma,
    };
    let files = execute(&plan, &a.protocol.out, log)?;
    write_manifest(&plan, &a.protocol.out, files, started)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output lines go to `log`, errors to stderr.
pub fn run<I, T>(args: I, log: &mut dyn FnMut(String)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_command(cli.command, log) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
