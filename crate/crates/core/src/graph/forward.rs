//! Graph binding and execution.

use crate::denoise::{spike_denoise_metered, DenoiseConfig, Downsample};
use crate::error::{Error, Result};
use crate::neuron::{if_run, NeuronConfig, NeuronMode};
use crate::tensor::{FloatTensor, SpikeTensor, Tensor};

use super::blocks::{
    ConvNorm, CspBlock, CspDownBlock, EncoderBlock, HeadBlock, HeadBranch, HeadScale, NormOp,
    SppBlock,
};
use super::ops::{add_floats, concat_floats, concat_spikes, max_pool_float, max_pool_spike,
    upsample_nearest};
use super::sites::{encoder_site, head_scale_sites, spp_sites, sublock1_sites, sublock2_sites,
    ConvSite};
use super::weights::{fetch_conv_params, fetch_shared_conv, fetch_site_norm,
    fetch_standalone_norm, WeightStore};
use super::{NetGraph, NodeKind};

/// Everything measured during one forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    pub t_steps: usize,
    pub conv_sites: Vec<ConvSiteTrace>,
    pub if_sites: Vec<IfSiteTrace>,
    pub denoise_sites: Vec<DenoiseSiteTrace>,
    pub acc_sites: Vec<AccSiteTrace>,
    /// Input pixels clamped into [0, 1] by the encoder.
    pub clamped_pixels: u64,
    /// Spike-valued node outputs, retained when feature dumps are on.
    pub features: Vec<FeatureDump>,
    retain_features: bool,
}

/// Cost-relevant facts about one executed convolution site.
#[derive(Debug, Clone)]
pub struct ConvSiteTrace {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Float input (encoder): billed as dense multiply-accumulates.
    pub float_input: bool,
    /// Upstream firing rate per time step; empty for float input.
    pub rates: Vec<f64>,
    /// Exact accumulations performed, bias adds included; 0 for float
    /// input.
    pub adds: u64,
}

#[derive(Debug, Clone)]
pub struct IfSiteTrace {
    pub name: String,
    /// Output firing rate per time step.
    pub rates: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone)]
pub struct DenoiseSiteTrace {
    pub name: String,
    /// Integer additions across all kernel passes.
    pub adds: u64,
}

#[derive(Debug, Clone)]
pub struct AccSiteTrace {
    pub name: String,
    /// Float additions charged into the readout membranes.
    pub adds: u64,
}

#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub name: String,
    pub spikes: SpikeTensor,
}

impl Trace {
    fn new(t_steps: usize, retain_features: bool) -> Self {
        Trace {
            t_steps,
            retain_features,
            ..Trace::default()
        }
    }

    pub(crate) fn record_conv(
        &mut self,
        site: &ConvSite,
        float_input: bool,
        rates: Vec<f64>,
        adds: u64,
        out_hw: (usize, usize),
    ) {
        self.conv_sites.push(ConvSiteTrace {
            name: site.name.clone(),
            in_ch: site.in_ch,
            out_ch: site.out_ch,
            k: site.k,
            h_out: out_hw.0,
            w_out: out_hw.1,
            float_input,
            rates,
            adds,
        });
    }

    pub(crate) fn record_if(&mut self, name: &str, spikes: &SpikeTensor) {
        let shape = spikes.shape();
        let per_step = (shape.c * shape.h * shape.w) as f64;
        let rates: Vec<f64> = (0..shape.t)
            .map(|t| {
                (0..shape.c)
                    .map(|c| spikes.plane_count_ones(t, c))
                    .sum::<usize>() as f64
                    / per_step
            })
            .collect();
        self.if_sites.push(IfSiteTrace {
            name: name.to_string(),
            overall: spikes.firing_rate(),
            rates,
        });
    }

    pub(crate) fn record_denoise(&mut self, name: &str, adds: u64) {
        self.denoise_sites.push(DenoiseSiteTrace {
            name: name.to_string(),
            adds,
        });
    }

    pub(crate) fn record_acc(&mut self, name: &str, adds: u64) {
        self.acc_sites.push(AccSiteTrace {
            name: name.to_string(),
            adds,
        });
    }

    fn maybe_feature(&mut self, name: &str, spikes: &SpikeTensor) {
        if self.retain_features {
            self.features.push(FeatureDump {
                name: name.to_string(),
                spikes: spikes.clone(),
            });
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Re-scan every spike-typed edge for stray non-binary bytes.
    pub verify_spikes: bool,
    /// Keep spike-valued node outputs in the trace for feature dumps.
    pub retain_features: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            verify_spikes: cfg!(debug_assertions),
            retain_features: false,
        }
    }
}

enum BoundNode {
    Encoder(EncoderBlock),
    Denoise {
        cfg: DenoiseConfig,
        enabled: bool,
    },
    Conv(ConvNorm),
    SeBn(NormOp),
    If(NeuronConfig),
    SuBlock1(CspDownBlock),
    SuBlock2(CspBlock),
    SpikeSpp(SppBlock),
    MaxPool {
        k: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    Add,
    DetectHead(HeadBlock),
}

#[derive(Debug, Clone)]
enum Value {
    Spike(SpikeTensor),
    Float(FloatTensor),
    Multi(Vec<FloatTensor>),
}

/// A graph with every parameter resolved against a weight store.
pub struct BoundGraph {
    graph: NetGraph,
    nodes: Vec<BoundNode>,
}

impl BoundGraph {
    pub fn t_steps(&self) -> usize {
        self.graph.t_steps
    }

    pub fn graph(&self) -> &NetGraph {
        &self.graph
    }

    /// Resolves every node's parameters by name.
    pub fn bind(graph: &NetGraph, store: &WeightStore) -> Result<BoundGraph> {
        let channels = graph.infer_channels()?;
        let t_steps = graph.t_steps;
        let mut nodes = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let in_ch = node.inputs.first().map(|&s| channels[s]).unwrap_or(0);
            let bound = match node.kind {
                NodeKind::Encoder {
                    out_ch,
                    k,
                    stride,
                    pad,
                } => {
                    let site = encoder_site(&node.id, out_ch, k, stride, pad);
                    let conv = fetch_shared_conv(store, &site)?;
                    let norm = fetch_site_norm(store, &site, t_steps)?;
                    BoundNode::Encoder(EncoderBlock {
                        id: node.id.clone(),
                        site,
                        conv,
                        norm,
                        t_steps,
                    })
                }
                NodeKind::Denoise {
                    downsample,
                    enabled,
                } => BoundNode::Denoise {
                    cfg: DenoiseConfig { downsample },
                    enabled,
                },
                NodeKind::Conv {
                    out_ch,
                    k,
                    stride,
                    pad,
                } => {
                    let site = ConvSite {
                        name: node.id.clone(),
                        in_ch,
                        out_ch,
                        k,
                        stride,
                        pad,
                        norm: super::sites::SiteNorm::None,
                    };
                    let params = fetch_conv_params(store, &site, t_steps)?;
                    BoundNode::Conv(ConvNorm {
                        site,
                        params,
                        norm: NormOp::Identity,
                    })
                }
                NodeKind::SeBn { n } => {
                    BoundNode::SeBn(fetch_standalone_norm(store, &node.id, in_ch, n, t_steps)?)
                }
                NodeKind::If { v_th } => BoundNode::If(NeuronConfig {
                    v_th,
                    v_rst: 0.0,
                    mode: NeuronMode::Firing,
                }),
                NodeKind::SuBlock1 { out_ch } => {
                    let [a, b, s] = sublock1_sites(&node.id, in_ch, out_ch);
                    BoundNode::SuBlock1(CspDownBlock {
                        id: node.id.clone(),
                        conv_a: bind_conv_norm(store, a, t_steps)?,
                        conv_b: bind_conv_norm(store, b, t_steps)?,
                        conv_s: bind_conv_norm(store, s, t_steps)?,
                        out_ch,
                    })
                }
                NodeKind::SuBlock2 { out_ch } => {
                    let [a, b] = sublock2_sites(&node.id, in_ch, out_ch);
                    BoundNode::SuBlock2(CspBlock {
                        id: node.id.clone(),
                        conv_a: bind_conv_norm(store, a, t_steps)?,
                        conv_b: bind_conv_norm(store, b, t_steps)?,
                        out_ch,
                    })
                }
                NodeKind::SpikeSpp {
                    mid_ch,
                    out_ch,
                    pool_k,
                } => {
                    let [a, b] = spp_sites(&node.id, in_ch, mid_ch, out_ch);
                    BoundNode::SpikeSpp(SppBlock {
                        id: node.id.clone(),
                        conv_a: bind_conv_norm(store, a, t_steps)?,
                        conv_b: bind_conv_norm(store, b, t_steps)?,
                        pool_k,
                    })
                }
                NodeKind::MaxPool { k, stride } => BoundNode::MaxPool { k, stride },
                NodeKind::Upsample { factor } => BoundNode::Upsample { factor },
                NodeKind::Concat => BoundNode::Concat,
                NodeKind::Add => BoundNode::Add,
                NodeKind::DetectHead { classes } => {
                    let mut scales = Vec::new();
                    for (scale, &src) in node.inputs.iter().enumerate() {
                        let [c1, c2, b1, b2] = head_scale_sites(
                            &node.id,
                            scale,
                            channels[src],
                            classes,
                            t_steps,
                        );
                        scales.push(HeadScale {
                            cls: HeadBranch {
                                conv1: bind_conv_norm(store, c1, t_steps)?,
                                conv2: bind_conv_norm(store, c2, t_steps)?,
                            },
                            boxes: HeadBranch {
                                conv1: bind_conv_norm(store, b1, t_steps)?,
                                conv2: bind_conv_norm(store, b2, t_steps)?,
                            },
                        });
                    }
                    BoundNode::DetectHead(HeadBlock { scales })
                }
            };
            nodes.push(bound);
        }
        Ok(BoundGraph {
            graph: graph.clone(),
            nodes,
        })
    }

    /// Executes the graph on one image, returning sink-node outputs in
    /// definition order plus the trace.
    pub fn forward(
        &self,
        image: &FloatTensor,
        opts: &ForwardOptions,
    ) -> Result<(Vec<Tensor>, Trace)> {
        let mut trace = Trace::new(self.graph.t_steps, opts.retain_features);
        let mut values: Vec<Option<Value>> = vec![None; self.graph.nodes.len()];

        for &i in self.graph.topo_order() {
            let node = &self.graph.nodes[i];
            let spike_in = |j: usize| -> Result<&SpikeTensor> {
                match values[node.inputs[j]].as_ref() {
                    Some(Value::Spike(s)) => Ok(s),
                    _ => Err(Error::Internal(format!(
                        "node '{}' expected a spike input",
                        node.id
                    ))),
                }
            };
            let float_in = |j: usize| -> Result<&FloatTensor> {
                match values[node.inputs[j]].as_ref() {
                    Some(Value::Float(f)) => Ok(f),
                    _ => Err(Error::Internal(format!(
                        "node '{}' expected a float input",
                        node.id
                    ))),
                }
            };

            let value = match &self.nodes[i] {
                BoundNode::Encoder(enc) => Value::Spike(enc.forward(image, &mut trace)?),
                BoundNode::Denoise { cfg, enabled } => {
                    let x = spike_in(0)?;
                    if *enabled {
                        let (out, adds) = spike_denoise_metered(x, cfg)?;
                        trace.record_denoise(&node.id, adds);
                        Value::Spike(out)
                    } else {
                        // Downsampling is structural; it applies even with
                        // the kernel passes disabled.
                        let out = match cfg.downsample {
                            Downsample::None => x.clone(),
                            Downsample::MaxPool2 => max_pool_spike(x, 2, 2, 0)?,
                        };
                        trace.record_denoise(&node.id, 0);
                        Value::Spike(out)
                    }
                }
                BoundNode::Conv(conv) => Value::Float(conv.forward(spike_in(0)?, &mut trace)?),
                BoundNode::SeBn(norm) => Value::Float(norm.forward_eval(float_in(0)?)?),
                BoundNode::If(cfg) => {
                    let spikes = if_run(float_in(0)?, cfg)?;
                    trace.record_if(&node.id, &spikes);
                    Value::Spike(spikes)
                }
                BoundNode::SuBlock1(block) => {
                    Value::Spike(block.forward(spike_in(0)?, &mut trace)?)
                }
                BoundNode::SuBlock2(block) => {
                    Value::Spike(block.forward(spike_in(0)?, &mut trace)?)
                }
                BoundNode::SpikeSpp(block) => {
                    Value::Spike(block.forward(spike_in(0)?, &mut trace)?)
                }
                BoundNode::MaxPool { k, stride } => {
                    match values[node.inputs[0]].as_ref() {
                        Some(Value::Spike(s)) => {
                            Value::Spike(max_pool_spike(s, *k, *stride, 0)?)
                        }
                        Some(Value::Float(f)) => {
                            Value::Float(max_pool_float(f, *k, *stride, 0)?)
                        }
                        _ => {
                            return Err(Error::Internal(format!(
                                "node '{}' has no input value",
                                node.id
                            )))
                        }
                    }
                }
                BoundNode::Upsample { factor } => {
                    Value::Spike(upsample_nearest(spike_in(0)?, *factor)?)
                }
                BoundNode::Concat => match values[node.inputs[0]].as_ref() {
                    Some(Value::Spike(_)) => {
                        let parts = node
                            .inputs
                            .iter()
                            .enumerate()
                            .map(|(j, _)| spike_in(j))
                            .collect::<Result<Vec<_>>>()?;
                        Value::Spike(concat_spikes(&parts)?)
                    }
                    _ => {
                        let parts = node
                            .inputs
                            .iter()
                            .enumerate()
                            .map(|(j, _)| float_in(j))
                            .collect::<Result<Vec<_>>>()?;
                        Value::Float(concat_floats(&parts)?)
                    }
                },
                BoundNode::Add => {
                    let parts = node
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(j, _)| float_in(j))
                        .collect::<Result<Vec<_>>>()?;
                    Value::Float(add_floats(&parts)?)
                }
                BoundNode::DetectHead(head) => {
                    let parts = node
                        .inputs
                        .iter()
                        .enumerate()
                        .map(|(j, _)| spike_in(j))
                        .collect::<Result<Vec<_>>>()?;
                    Value::Multi(head.forward(&parts, &mut trace)?)
                }
            };

            if let Value::Spike(s) = &value {
                if opts.verify_spikes && s.data().iter().any(|&v| v > 1) {
                    return Err(Error::Internal(format!(
                        "non-binary value on spike edge '{}'",
                        node.id
                    )));
                }
                trace.maybe_feature(&node.id, s);
            }
            if let Value::Float(f) = &value {
                f.check_finite(&format!("node '{}'", node.id))?;
            }
            values[i] = Some(value);
        }

        let mut outputs = Vec::new();
        for sink in self.graph.sinks() {
            match values[sink].take() {
                Some(Value::Multi(list)) => {
                    outputs.extend(list.into_iter().map(Tensor::Float))
                }
                Some(Value::Float(f)) => outputs.push(Tensor::Float(f)),
                Some(Value::Spike(s)) => outputs.push(Tensor::Spike(s)),
                None => {
                    return Err(Error::Internal(format!(
                        "sink '{}' was never evaluated",
                        self.graph.nodes[sink].id
                    )))
                }
            }
        }
        Ok((outputs, trace))
    }
}

fn bind_conv_norm(store: &WeightStore, site: ConvSite, t_steps: usize) -> Result<ConvNorm> {
    let params = fetch_conv_params(store, &site, t_steps)?;
    let norm = match params {
        super::blocks::ConvParams::PerStep(_) => NormOp::Identity,
        _ => fetch_site_norm(store, &site, t_steps)?,
    };
    Ok(ConvNorm {
        site,
        params,
        norm,
    })
}
