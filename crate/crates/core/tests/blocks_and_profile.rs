//! Block-level contracts and whole-network profiling.

use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use spikenet_core::conv::ConvLayer;
use spikenet_core::graph::{
    fetch_shared_conv, fetch_site_norm, load_config, parse_config, random_weights, BoundGraph,
    ConvNorm, ConvParams, CspBlock, CspDownBlock, EncoderBlock, ForwardOptions, NormOp,
    SiteNorm, Trace, WeightRecord, WeightStore,
};
use spikenet_core::norm::StepBn;
use spikenet_core::profile::profile_with_store;
use spikenet_core::tensor::{FloatTensor, Shape, SpikeTensor, Tensor};

fn reference_graph() -> spikenet_core::graph::NetGraph {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.cfg");
    load_config(&path).unwrap()
}

#[test]
fn encoder_fires_every_second_step_at_half_charge() {
    // Zero scale and beta = 0.5 pin the normalized activation to exactly
    // 0.5 everywhere: membranes run 0.5, 1.0 (fire), 0.5, 1.0 (fire).
    let graph = parse_config(
        "tsteps=4\nnode enc ENCODER out_ch=1 k=1 stride=1 pad=0\n",
    )
    .unwrap();
    let mut store = random_weights(&graph, 0).unwrap();
    for (name, value) in [("enc.conv.bn.gamma", 0.0f32), ("enc.conv.bn.beta", 0.5)] {
        let rec = store.get(name).unwrap();
        store.upsert(WeightRecord::new(
            name,
            rec.dims.clone(),
            vec![value; rec.data.len()],
        ));
    }
    let bound = BoundGraph::bind(&graph, &store).unwrap();
    let image = FloatTensor::zeros(Shape::new(1, 3, 2, 2).unwrap());
    let opts = ForwardOptions::default();
    let (outputs, _) = bound.forward(&image, &opts).unwrap();
    let Tensor::Spike(spikes) = &outputs[0] else {
        panic!("encoder output is spikes");
    };
    assert_eq!(spikes.shape(), Shape::new(4, 1, 2, 2).unwrap());
    for y in 0..2 {
        for x in 0..2 {
            let train: Vec<u8> = (0..4).map(|t| spikes.get(t, 0, y, x)).collect();
            assert_eq!(train, vec![0, 1, 0, 1]);
        }
    }
}

#[test]
fn zero_weights_give_zero_predictions() {
    let graph = reference_graph();
    let store = random_weights(&graph, 6).unwrap();
    // Zero every conv weight/bias and every normalizer scale/shift; keep
    // variances so nothing divides by zero.
    let mut zeroed = WeightStore::new();
    for rec in store.iter() {
        let mut r = rec.clone();
        if !r.name.ends_with(".var") {
            r.data.iter_mut().for_each(|v| *v = 0.0);
        }
        zeroed.insert(r).unwrap();
    }
    let bound = BoundGraph::bind(&graph, &zeroed).unwrap();
    let mut rng = StdRng::seed_from_u64(60);
    let data: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect();
    let image = FloatTensor::from_vec(Shape::new(1, 3, 32, 32).unwrap(), data).unwrap();
    let (outputs, _) = bound.forward(&image, &ForwardOptions::default()).unwrap();
    for out in outputs {
        let Tensor::Float(f) = out else {
            panic!("expected float predictions")
        };
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}

fn conv_norm(
    store: &WeightStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    norm: SiteNorm,
    t_steps: usize,
) -> ConvNorm {
    let site = spikenet_core::graph::ConvSite {
        name: name.to_string(),
        in_ch,
        out_ch,
        k: 3,
        stride,
        pad: 1,
        norm,
    };
    ConvNorm {
        params: ConvParams::Shared(fetch_shared_conv(store, &site).unwrap()),
        norm: fetch_site_norm(store, &site, t_steps).unwrap(),
        site,
    }
}

#[test]
fn downsample_block_with_dead_shortcut_equals_fusion_block() {
    // Zeroing the shortcut conv and its normalizer (gamma = beta = 0)
    // makes the residual summand exactly zero; with stride 1 everywhere
    // the two block varieties must agree spike for spike.
    let text = "tsteps=2
node enc ENCODER out_ch=8
node blk SUBLOCK2 out_ch=8 inputs=enc
node head DETECTHEAD classes=1 inputs=blk,blk
";
    let graph = parse_config(text).unwrap();
    let store = random_weights(&graph, 42).unwrap();

    let mk_zero_norm = |out_ch: usize| {
        let mut bn = StepBn::new(2, out_ch, 2).unwrap();
        bn.gamma.iter_mut().for_each(|v| *v = 0.0);
        bn.stats_ready = true;
        NormOp::Step(bn)
    };

    let a = conv_norm(&store, "blk.conv_a", 8, 8, 1, SiteNorm::Step { n: 1 }, 2);
    let b = conv_norm(&store, "blk.conv_b", 4, 4, 1, SiteNorm::Step { n: 1 }, 2);
    let a2 = conv_norm(&store, "blk.conv_a", 8, 8, 1, SiteNorm::Step { n: 1 }, 2);
    let b2 = conv_norm(&store, "blk.conv_b", 4, 4, 1, SiteNorm::Step { n: 1 }, 2);

    let down = CspDownBlock {
        id: "down".to_string(),
        conv_a: a,
        conv_b: b,
        conv_s: ConvNorm {
            site: spikenet_core::graph::ConvSite {
                name: "dead".to_string(),
                in_ch: 8,
                out_ch: 4,
                k: 3,
                stride: 1,
                pad: 1,
                norm: SiteNorm::Step { n: 2 },
            },
            params: ConvParams::Shared(ConvLayer::zeroed(8, 4, 3, 3, 1, 1).unwrap()),
            norm: mk_zero_norm(4),
        },
        out_ch: 8,
    };
    let fusion = CspBlock {
        id: "plain".to_string(),
        conv_a: a2,
        conv_b: b2,
        out_ch: 8,
    };

    let mut rng = StdRng::seed_from_u64(21);
    let shape = Shape::new(2, 8, 6, 6).unwrap();
    let data: Vec<u8> = (0..shape.len()).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let spikes = SpikeTensor::from_vec(shape, data).unwrap();
    let mut t1 = Trace::default();
    let mut t2 = Trace::default();
    let from_down = down.forward(&spikes, &mut t1).unwrap();
    let from_fusion = fusion.forward(&spikes, &mut t2).unwrap();
    assert_eq!(from_down.data(), from_fusion.data());
}

#[test]
fn downsample_block_sites_carry_branch_divisor_two() {
    // Both summands of the in-block residual end in a normalizer scaled
    // for a two-way sum.
    let sites = spikenet_core::graph::NetGraph::new(
        2,
        vec![
            (
                "enc".to_string(),
                spikenet_core::graph::NodeKind::Encoder {
                    out_ch: 8,
                    k: 3,
                    stride: 1,
                    pad: 1,
                },
                vec![],
            ),
            (
                "b".to_string(),
                spikenet_core::graph::NodeKind::SuBlock1 { out_ch: 8 },
                vec!["enc".to_string()],
            ),
        ],
    )
    .unwrap()
    .sites()
    .unwrap()
    .0;
    for name in ["b.conv_b", "b.conv_s"] {
        let site = sites.iter().find(|s| s.name == name).unwrap();
        assert_eq!(site.norm, SiteNorm::Step { n: 2 }, "{name}");
    }
    let site = sites.iter().find(|s| s.name == "b.conv_a").unwrap();
    assert_eq!(site.norm, SiteNorm::Step { n: 1 });
}

#[test]
fn encoder_block_rejects_bad_images() {
    let site = spikenet_core::graph::ConvSite {
        name: "e.conv".to_string(),
        in_ch: 3,
        out_ch: 2,
        k: 3,
        stride: 1,
        pad: 1,
        norm: SiteNorm::None,
    };
    let enc = EncoderBlock {
        id: "e".to_string(),
        conv: ConvLayer::zeroed(3, 2, 3, 3, 1, 1).unwrap(),
        norm: NormOp::Identity,
        t_steps: 2,
        site,
    };
    let mut trace = Trace::default();
    let two_channel = FloatTensor::zeros(Shape::new(1, 2, 4, 4).unwrap());
    assert!(enc.forward(&two_channel, &mut trace).is_err());

    // Out-of-range values clamp and are counted rather than failing.
    let shape = Shape::new(1, 3, 2, 2).unwrap();
    let hot = FloatTensor::from_vec(shape, vec![2.0; shape.len()]).unwrap();
    enc.forward(&hot, &mut trace).unwrap();
    assert_eq!(trace.clamped_pixels, shape.len() as u64);
}

#[test]
fn zero_image_bills_only_encoder_flops_and_bias_floor() {
    let graph = reference_graph();
    let store = random_weights(&graph, 77).unwrap();
    // Center the whole network so a zero image propagates as zero: no
    // conv biases, no normalizer shifts, no running means. Scales and
    // variances stay random.
    let mut centered = WeightStore::new();
    for rec in store.iter() {
        let mut r = rec.clone();
        if r.name.ends_with(".b") || r.name.ends_with(".beta") || r.name.ends_with(".mean") {
            r.data.iter_mut().for_each(|v| *v = 0.0);
        }
        centered.insert(r).unwrap();
    }
    let image = FloatTensor::zeros(Shape::new(1, 3, 320, 320).unwrap());
    let report = profile_with_store(&graph, &centered, &image).unwrap();

    let enc = report.layers.iter().find(|l| l.name == "enc.conv").unwrap();
    assert_eq!(enc.kind, "conv-float");
    // 3 * 3 * 3 * 32 * 320 * 320.
    assert_eq!(enc.flops, 88_473_600.0);

    for layer in &report.layers {
        if layer.kind == "conv-spike" {
            assert_eq!(layer.mean_rate, Some(0.0), "{}", layer.name);
            // Bias floor: one add per output element per time step.
            assert!(layer.sops > 0.0, "{}", layer.name);
        }
        if layer.kind == "denoise" {
            assert_eq!(layer.sops, 0.0); // nothing fired, nothing summed
        }
    }
    let floor: f64 = report
        .layers
        .iter()
        .filter(|l| l.kind == "conv-spike")
        .map(|l| l.sops)
        .sum();
    let acc: f64 = report
        .layers
        .iter()
        .filter(|l| l.kind == "accumulate")
        .map(|l| l.sops)
        .sum();
    assert_eq!(report.total_sops, floor + acc);
    assert!(report.total_params > 0);
    assert_eq!(report.total_flops, enc.flops);
}

#[test]
fn profile_report_totals_are_layer_sums() {
    let graph = reference_graph();
    let store = random_weights(&graph, 10).unwrap();
    let mut rng = StdRng::seed_from_u64(9);
    let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let image = FloatTensor::from_vec(Shape::new(1, 3, 64, 64).unwrap(), data).unwrap();
    let report = profile_with_store(&graph, &store, &image).unwrap();
    let flops: f64 = report.layers.iter().map(|l| l.flops).sum();
    let sops: f64 = report.layers.iter().map(|l| l.sops).sum();
    assert_eq!(report.total_flops, flops);
    assert_eq!(report.total_sops, sops);
    assert!(report.energy_mj > 0.0);
    for f in &report.firing {
        assert!((0.0..=1.0).contains(&f.overall), "{}", f.name);
    }
}
