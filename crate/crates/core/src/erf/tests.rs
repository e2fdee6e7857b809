use super::*;
use crate::autodiff::Param;
use crate::blocks::{ArchSpec, InputGeometry, LayerSpec, MixerKind, MixerTag, WeightFile};
use crate::oracle::{brute_force_spatial, brute_force_temporal};

fn flat(t: usize, c: usize, h: usize, layers: Vec<LayerSpec>) -> ArchSpec {
    let mut spec = ArchSpec::from_layers(t, InputGeometry { c, h, w: h }, layers);
    spec.seed = 21;
    spec
}

fn opts(samples: usize, seed: u64) -> ErfOptions {
    ErfOptions {
        samples,
        seed,
        threads: Some(1),
        ..ErfOptions::default()
    }
}

#[test]
fn spatial_stimulus_marks_centre() {
    let s = make_spatial_stimulus(Shape5::new(4, 1, 2, 8, 8));
    assert_eq!(s.sum(), 8.0);
    for t in 0..4 {
        for c in 0..2 {
            assert_eq!(s.get(t, 0, c, 4, 4), 1.0);
        }
    }
    assert_eq!(make_spatial_stimulus(Shape5::new(1, 1, 1, 1, 1)).data(), &[1.0]);
    assert_eq!(make_spatial_stimulus(Shape5::new(3, 2, 5, 4, 7)).sum(), 30.0);
}

#[test]
fn temporal_stimulus_marks_last_step() {
    let s = make_temporal_stimulus(Shape5::new(4, 1, 1, 4, 4));
    assert_eq!(s.sum(), 16.0);
    assert!(s.data()[16 * 3..].iter().all(|&v| v == 1.0));
    let one = make_temporal_stimulus(Shape5::new(1, 2, 3, 2, 2));
    assert!(one.data().iter().all(|&v| v == 1.0));
    assert_eq!(one.sum(), 24.0);
}

#[test]
fn identity_network() {
    let net = Network::build(&flat(3, 1, 5, vec![])).unwrap();
    let e = spatial_erf(&net, "input", &opts(2, 1)).unwrap();
    let mut want = Grid::zeros(5, 5);
    want.data[12] = 1.0;
    assert_eq!(e.grid, want);
    let net = Network::build(&flat(1, 3, 4, vec![])).unwrap();
    let t = temporal_erf(&net, "output", &opts(1, 1)).unwrap();
    assert_eq!(t.values, vec![48.0]);
}

#[test]
fn single_conv_reproduces_kernel() {
    let spec = flat(
        1,
        1,
        7,
        vec![LayerSpec::Conv {
            kernel: 3,
            stride: 1,
            dim: 1,
        }],
    );
    let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
    let wf = WeightFile {
        tensors: vec![Param::new("layer1.weight", vec![1, 1, 3, 3], kernel.clone()).unwrap()],
    };
    let net = Network::build_with_weights(&spec, wf).unwrap();
    let e = spatial_erf(&net, "output", &opts(1, 0)).unwrap();
    let oracle = brute_force_spatial(&net, Span::whole(&net), &sample_input(&net, 0, 0).unwrap()).unwrap();
    assert_eq!(e.grid, oracle);
    // cross-correlation: the centre output reads input (3+i, 3+j) with weight k[i+1][j+1]
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(e.grid.get(2 + i, 2 + j), kernel[i * 3 + j]);
        }
    }
    assert_eq!(e.grid.data.iter().filter(|&&v| v != 0.0).count(), 9);
}

#[test]
fn stage_input_reads_only_the_probed_layer() {
    let conv = LayerSpec::Conv {
        kernel: 3,
        stride: 1,
        dim: 1,
    };
    let spec = flat(1, 1, 9, vec![conv.clone(), conv]);
    let k1: Vec<f64> = vec![0.0, 0.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0];
    let k2: Vec<f64> = (1..=9).map(f64::from).collect();
    let wf = WeightFile {
        tensors: vec![
            Param::new("layer1.weight", vec![1, 1, 3, 3], k1).unwrap(),
            Param::new("layer2.weight", vec![1, 1, 3, 3], k2.clone()).unwrap(),
        ],
    };
    let net = Network::build_with_weights(&spec, wf).unwrap();
    let stage = ErfOptions {
        read_at: ReadAt::StageInput,
        ..opts(1, 0)
    };
    let e = spatial_erf(&net, "layer2", &stage).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(e.grid.get(3 + i, 3 + j), k2[i * 3 + j]);
        }
    }
    let whole = spatial_erf(&net, "layer2", &opts(1, 0)).unwrap();
    assert_eq!(whole.grid.data.iter().filter(|&&v| v != 0.0).count(), 12);
}

#[test]
fn single_sample_matches_brute_force() {
    let layers = vec![
        LayerSpec::Conv {
            kernel: 3,
            stride: 1,
            dim: 2,
        },
        LayerSpec::Bn,
        LayerSpec::Lif,
        LayerSpec::Mixer {
            mixer: MixerKind::new(MixerTag::Srb, 2.0),
        },
    ];
    let net = Network::build(&flat(2, 2, 6, layers)).unwrap();
    let x = sample_input(&net, 9, 0).unwrap();
    let span = Span::whole(&net);
    let e = spatial_erf(&net, "output", &opts(1, 9)).unwrap();
    assert!(e.grid.max_abs_diff(&brute_force_spatial(&net, span, &x).unwrap()) <= 1e-10);
    let t = temporal_erf(&net, "output", &opts(1, 9)).unwrap();
    let bt = brute_force_temporal(&net, span, &x).unwrap();
    assert!(t.values.iter().zip(&bt).all(|(a, b)| (a - b).abs() <= 1e-10));
}

#[test]
fn sample_mean_is_mean_of_single_runs() {
    let layers = vec![
        LayerSpec::Conv {
            kernel: 3,
            stride: 2,
            dim: 2,
        },
        LayerSpec::Bn,
        LayerSpec::Lif,
    ];
    let net = Network::build(&flat(2, 1, 8, layers)).unwrap();
    let span = Span::whole(&net);
    let e = spatial_erf(&net, "output", &opts(5, 3)).unwrap();
    let mut mean = Grid::zeros(8, 8);
    for i in 0..5 {
        let g = &spatial_sample(&net, span, 3, i).unwrap()[0];
        for (a, v) in mean.data.iter_mut().zip(&g.data) {
            *a += v / 5.0;
        }
    }
    assert!(e.grid.max_abs_diff(&mean) <= 1e-12);
}

#[test]
fn thread_count_does_not_change_bits() {
    let layers = vec![
        LayerSpec::Ssc,
        LayerSpec::Mixer {
            mixer: MixerKind::new(MixerTag::Mlpixer, 2.0),
        },
    ];
    let net = Network::build(&flat(2, 2, 8, layers)).unwrap();
    let a = spatial_erf(&net, "output", &opts(6, 4)).unwrap();
    let b = spatial_erf(
        &net,
        "output",
        &ErfOptions {
            threads: Some(4),
            ..opts(6, 4)
        },
    )
    .unwrap();
    assert_eq!(a, b);
    let ta = temporal_erf(&net, "output", &opts(6, 4)).unwrap();
    let tb = temporal_erf(
        &net,
        "output",
        &ErfOptions {
            threads: Some(3),
            ..opts(6, 4)
        },
    )
    .unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn convolutional_support_is_local() {
    let mut spec = flat(
        2,
        1,
        12,
        vec![
            LayerSpec::Conv {
                kernel: 3,
                stride: 1,
                dim: 2,
            },
            LayerSpec::Bn,
            LayerSpec::Lif,
            LayerSpec::Conv {
                kernel: 5,
                stride: 1,
                dim: 1,
            },
        ],
    );
    spec.bn.stats = false;
    let net = Network::build(&spec).unwrap();
    let e = spatial_erf(&net, "output", &opts(3, 2)).unwrap();
    for r in 0..12usize {
        for c in 0..12usize {
            if r.abs_diff(6).max(c.abs_diff(6)) > 3 {
                assert_eq!(e.grid.get(r, c), 0.0, "({r}, {c})");
            }
        }
    }
}

#[test]
fn interior_translation_symmetry() {
    let spec = flat(
        1,
        1,
        12,
        vec![
            LayerSpec::Conv {
                kernel: 3,
                stride: 1,
                dim: 2,
            },
            LayerSpec::Conv {
                kernel: 3,
                stride: 1,
                dim: 1,
            },
        ],
    );
    let net = Network::build(&spec).unwrap();
    let at = |r: usize, c: usize| {
        let x = sample_input(&net, 0, 0).unwrap();
        stimulus_gradient(&net, Span::whole(&net), x, |s| {
            let mut t = Tensor5::zeros(s);
            t.set(0, 0, 0, r, c, 1.0);
            t
        })
        .unwrap()
    };
    let a = at(6, 6);
    let b = at(5, 8);
    for dr in 0..5 {
        for dc in 0..5 {
            assert_eq!(a.get(0, 0, 0, 4 + dr, 4 + dc), b.get(0, 0, 0, 3 + dr, 6 + dc));
        }
    }
}

#[test]
fn no_gradient_flows_backwards_in_time() {
    let mut spec = flat(
        4,
        1,
        4,
        vec![
            LayerSpec::Conv {
                kernel: 3,
                stride: 1,
                dim: 2,
            },
            LayerSpec::Bn,
            LayerSpec::Lif,
        ],
    );
    spec.bn.stats = false;
    let net = Network::build(&spec).unwrap();
    let x = sample_input(&net, 1, 0).unwrap();
    let g = stimulus_gradient(&net, Span::whole(&net), x, |s| {
        let mut t = Tensor5::zeros(s);
        let step = s.step();
        t.data_mut()[step..2 * step].iter_mut().for_each(|v| *v = 1.0);
        t
    })
    .unwrap();
    let step = g.shape().step();
    assert!(g.data()[2 * step..].iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_probe_is_reference_error() {
    let net = Network::build(&flat(1, 1, 2, vec![LayerSpec::Lif])).unwrap();
    assert!(matches!(
        spatial_erf(&net, "nope", &opts(1, 0)),
        Err(Error::Reference(_))
    ));
    assert!(matches!(
        spatial_erf(&net, "output", &opts(0, 0)),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn per_channel_and_mean_aggregation() {
    let net = Network::build(&flat(1, 3, 3, vec![])).unwrap();
    let per = spatial_erf(
        &net,
        "output",
        &ErfOptions {
            channels: ChannelAgg::PerChannel,
            ..opts(1, 0)
        },
    )
    .unwrap();
    assert_eq!(per.per_channel.as_ref().unwrap().len(), 3);
    assert_eq!(per.grid.get(1, 1), 3.0);
    let mean = spatial_erf(
        &net,
        "output",
        &ErfOptions {
            channels: ChannelAgg::Mean,
            ..opts(1, 0)
        },
    )
    .unwrap();
    assert_eq!(mean.grid.get(1, 1), 1.0);
}

/// Smallest radius on a 0.001 px lattice enclosing 95% of the mass.
fn enumerated_r95(g: &Grid, centroid: (f64, f64)) -> f64 {
    let total: f64 = g.data.iter().map(|v| v.abs()).sum();
    let mut r = 0.0;
    loop {
        let mut m = 0.0;
        for i in 0..g.h {
            for j in 0..g.w {
                let d = ((i as f64 - centroid.0).powi(2) + (j as f64 - centroid.1).powi(2)).sqrt();
                if d <= r + 1e-12 {
                    m += g.get(i, j).abs();
                }
            }
        }
        if m / total >= 0.95 - 1e-12 {
            return r;
        }
        r += 0.001;
    }
}

#[test]
fn spread_of_delta_and_zero() {
    let mut g = Grid::zeros(5, 5);
    g.data[7] = -2.0;
    let r = spread_metrics(&g);
    assert_eq!((r.r95, r.mass_entropy, r.zero_mass), (0.0, 0.0, false));
    assert_eq!(r.centroid, (1.0, 2.0));
    let z = spread_metrics(&Grid::zeros(4, 4));
    assert!(z.zero_mass);
    assert_eq!((z.r95, z.centroid, z.mass_entropy), (0.0, (2.0, 2.0), 0.0));
}

#[test]
fn spread_of_uniform_grid() {
    let g = Grid::new(8, 8, vec![1.0; 64]).unwrap();
    let r = spread_metrics(&g);
    assert!((r.mass_entropy - 64f64.ln()).abs() < 1e-12);
    assert_eq!(r.centroid, (3.5, 3.5));
    assert!((r.r95 - enumerated_r95(&g, r.centroid)).abs() <= 1e-3);
    assert!(r.r95 <= (2.0f64 * 64.0).sqrt() / 2.0);
}

#[test]
fn spread_of_gaussian_grid() {
    let n = 17;
    let data = (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as f64 - 8.0, (i % n) as f64 - 8.0);
            (-(r * r + c * c) / 8.0).exp()
        })
        .collect();
    let g = Grid::new(n, n, data).unwrap();
    let r = spread_metrics(&g);
    assert!((r.r95 - enumerated_r95(&g, r.centroid)).abs() <= 0.5);
    // continuous 2-D Gaussian: r95 = σ·sqrt(-2 ln 0.05) ≈ 4.9
    assert!((r.r95 - 2.0 * (-2.0 * 0.05f64.ln()).sqrt()).abs() <= 0.5, "{}", r.r95);
    assert!(r.mass_entropy > 0.0 && r.mass_entropy <= (n as f64 * n as f64).ln());
}

#[test]
fn viz_normalization() {
    let g = Grid::new(1, 3, vec![-4.0, 1.0, 0.16]).unwrap();
    let v = normalize_for_viz(&g, 1.0).unwrap();
    assert_eq!(v.data, vec![1.0, 0.25, 0.04]);
    let h = Grid::new(1, 2, vec![1.0, 0.04]).unwrap();
    let v = normalize_for_viz(&h, 0.5).unwrap();
    assert_eq!(v.data[0], 1.0);
    assert!((v.data[1] - 0.2).abs() < 1e-15);
    assert_eq!(normalize_for_viz(&Grid::zeros(2, 2), 0.5).unwrap().data, vec![0.0; 4]);
    assert!(normalize_for_viz(&h, 0.0).is_err());
}
