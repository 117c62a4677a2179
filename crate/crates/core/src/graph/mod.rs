//! Declarative layer graphs.
//!
//! A network is a list of nodes loaded from a plain-text config:
//!
//! ```text
//! tsteps=4
//! node enc ENCODER out_ch=32 k=3 stride=1 pad=1
//! node dn DENOISE downsample=maxpool2 inputs=enc
//! node b1 SUBLOCK1 out_ch=64 inputs=dn
//! ...
//! node head DETECTHEAD classes=4 inputs=n1,n2
//! ```
//!
//! Everything is validated up front: ids resolve, the graph is acyclic
//! with exactly one ENCODER source, every edge's tensor kind matches the
//! consumer, and ADD nodes push their branch count into the `n` of any
//! normalization node feeding them so that n-way membrane sums keep unit
//! variance.

mod blocks;
mod config;
mod forward;
mod ops;
mod sites;
mod weights;

pub use blocks::{ConvNorm, ConvParams, CspBlock, CspDownBlock, EncoderBlock, NormOp, SppBlock};
pub use config::{load_config, parse_config};
pub use forward::{
    BoundGraph, ConvSiteTrace, ForwardOptions, IfSiteTrace, Trace,
};
pub use ops::{
    add_floats, concat_floats, concat_spikes, max_pool_float, max_pool_spike, split_channels,
    upsample_nearest,
};
pub use sites::{ConvSite, NormSite, SiteNorm};
pub use weights::{
    fetch_conv_params, fetch_shared_conv, fetch_site_norm, fuse_weights, random_weights,
    read_weights, write_weights, WeightRecord, WeightStore, WEIGHTS_MAGIC,
};

use std::collections::HashMap;

use crate::denoise::Downsample;
use crate::error::{Error, Result};

/// Tensor kind carried on a graph edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    Spike,
    Float,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Encoder {
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Denoise {
        downsample: Downsample,
        enabled: bool,
    },
    Conv {
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    SeBn {
        n: u32,
    },
    If {
        v_th: f32,
    },
    SuBlock1 {
        out_ch: usize,
    },
    SuBlock2 {
        out_ch: usize,
    },
    SpikeSpp {
        mid_ch: usize,
        out_ch: usize,
        pool_k: usize,
    },
    MaxPool {
        k: usize,
        stride: usize,
    },
    Upsample {
        factor: usize,
    },
    Concat,
    Add,
    DetectHead {
        classes: usize,
    },
}

impl NodeKind {
    pub fn token(&self) -> &'static str {
        match self {
            NodeKind::Encoder { .. } => "ENCODER",
            NodeKind::Denoise { .. } => "DENOISE",
            NodeKind::Conv { .. } => "CONV",
            NodeKind::SeBn { .. } => "SEBN",
            NodeKind::If { .. } => "IF",
            NodeKind::SuBlock1 { .. } => "SUBLOCK1",
            NodeKind::SuBlock2 { .. } => "SUBLOCK2",
            NodeKind::SpikeSpp { .. } => "SPIKESPP",
            NodeKind::MaxPool { .. } => "MAXPOOL",
            NodeKind::Upsample { .. } => "UPSAMPLE",
            NodeKind::Concat => "CONCAT",
            NodeKind::Add => "ADD",
            NodeKind::DetectHead { .. } => "DETECTHEAD",
        }
    }

    fn input_arity(&self) -> (usize, usize) {
        match self {
            NodeKind::Encoder { .. } => (0, 0),
            NodeKind::Concat | NodeKind::Add => (2, usize::MAX),
            NodeKind::DetectHead { .. } => (2, 2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    /// Indices into `NetGraph::nodes`.
    pub inputs: Vec<usize>,
}

/// Validated network graph.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub t_steps: usize,
    pub nodes: Vec<Node>,
    topo: Vec<usize>,
}

impl NetGraph {
    /// Builds and validates a graph from nodes whose inputs are id strings.
    pub fn new(t_steps: usize, raw: Vec<(String, NodeKind, Vec<String>)>) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("tsteps must be >= 1".to_string()));
        }
        if raw.is_empty() {
            return Err(Error::Config("graph has no nodes".to_string()));
        }
        let mut index = HashMap::new();
        for (i, (id, _, _)) in raw.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate node id '{id}'")));
            }
        }
        let mut nodes = Vec::with_capacity(raw.len());
        for (id, kind, input_ids) in raw {
            let (min, max) = kind.input_arity();
            if input_ids.len() < min || input_ids.len() > max {
                return Err(Error::Config(format!(
                    "node '{id}' ({}) takes {} input(s), got {}",
                    kind.token(),
                    if min == max {
                        min.to_string()
                    } else {
                        format!("{min}+")
                    },
                    input_ids.len()
                )));
            }
            let mut inputs = Vec::with_capacity(input_ids.len());
            for input in &input_ids {
                let idx = *index.get(input).ok_or_else(|| {
                    Error::Config(format!("node '{id}' references unknown input '{input}'"))
                })?;
                inputs.push(idx);
            }
            nodes.push(Node { id, kind, inputs });
        }

        let encoders = nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Encoder { .. }))
            .count();
        if encoders != 1 {
            return Err(Error::Config(format!(
                "graph needs exactly one ENCODER source, found {encoders}"
            )));
        }

        let mut graph = NetGraph {
            t_steps,
            nodes,
            topo: Vec::new(),
        };
        graph.topo = graph.topo_sort()?;
        graph.apply_branch_divisors();
        graph.check_edge_types()?;
        graph.infer_channels()?; // validates channel arithmetic
        Ok(graph)
    }

    /// Node evaluation order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn encoder_index(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| matches!(n.kind, NodeKind::Encoder { .. }))
            .expect("validated graph has an encoder")
    }

    /// Indices of nodes nothing consumes, in definition order.
    pub fn sinks(&self) -> Vec<usize> {
        let mut consumed = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                consumed[i] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !consumed[i]).collect()
    }

    /// Same graph with a different number of time steps.
    pub fn with_t_steps(&self, t_steps: usize) -> Result<NetGraph> {
        if t_steps == 0 {
            return Err(Error::Config("tsteps must be >= 1".to_string()));
        }
        let mut g = self.clone();
        g.t_steps = t_steps;
        Ok(g)
    }

    fn topo_sort(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut in_deg = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            in_deg[i] = node.inputs.len();
            for &src in &node.inputs {
                if src == i {
                    return Err(Error::Config(format!(
                        "node '{}' feeds itself",
                        node.id
                    )));
                }
                consumers[src].push(i);
            }
        }
        // Smallest ready index first, so traces list nodes in definition
        // order wherever the topology allows.
        let mut frontier: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| in_deg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = frontier.iter().next() {
            frontier.remove(&i);
            order.push(i);
            for &c in &consumers[i] {
                in_deg[c] -= 1;
                if in_deg[c] == 0 {
                    frontier.insert(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("graph contains a cycle".to_string()));
        }
        Ok(order)
    }

    /// Sets `n` on every normalization node that feeds an ADD to the ADD's
    /// branch count, so each branch is scaled toward N(0, 1/n) before the
    /// sum.
    fn apply_branch_divisors(&mut self) {
        let mut updates = Vec::new();
        for node in &self.nodes {
            if node.kind == NodeKind::Add {
                let branches = node.inputs.len() as u32;
                for &src in &node.inputs {
                    if matches!(self.nodes[src].kind, NodeKind::SeBn { .. }) {
                        updates.push((src, branches));
                    }
                }
            }
        }
        for (idx, n) in updates {
            self.nodes[idx].kind = NodeKind::SeBn { n };
        }
    }

    /// Tensor kind produced by each node (`None` marks the detect head,
    /// whose outputs leave the spiking domain as a list of float maps).
    pub fn edge_types(&self) -> Vec<Option<EdgeType>> {
        let mut out: Vec<Option<EdgeType>> = vec![None; self.nodes.len()];
        for &i in &self.topo {
            let node = &self.nodes[i];
            out[i] = match node.kind {
                NodeKind::Encoder { .. } => Some(EdgeType::Spike),
                NodeKind::Denoise { .. } => Some(EdgeType::Spike),
                NodeKind::Conv { .. } => Some(EdgeType::Float),
                NodeKind::SeBn { .. } => Some(EdgeType::Float),
                NodeKind::If { .. } => Some(EdgeType::Spike),
                NodeKind::SuBlock1 { .. }
                | NodeKind::SuBlock2 { .. }
                | NodeKind::SpikeSpp { .. } => Some(EdgeType::Spike),
                NodeKind::MaxPool { .. } => out[node.inputs[0]],
                NodeKind::Upsample { .. } => Some(EdgeType::Spike),
                NodeKind::Concat => out[node.inputs[0]],
                NodeKind::Add => Some(EdgeType::Float),
                NodeKind::DetectHead { .. } => None,
            };
        }
        out
    }

    fn check_edge_types(&self) -> Result<()> {
        let types = self.edge_types();
        let want = |idx: usize, expected: EdgeType, ctx: &Node| -> Result<()> {
            match types[idx] {
                Some(t) if t == expected => Ok(()),
                Some(t) => Err(Error::Config(format!(
                    "node '{}' ({}) expects {:?} input but '{}' produces {:?}",
                    ctx.id,
                    ctx.kind.token(),
                    expected,
                    self.nodes[idx].id,
                    t
                ))),
                None => Err(Error::Config(format!(
                    "node '{}' consumes detect-head output '{}'",
                    ctx.id, self.nodes[idx].id
                ))),
            }
        };
        for node in &self.nodes {
            match node.kind {
                NodeKind::Encoder { .. } => {}
                NodeKind::Denoise { .. }
                | NodeKind::Conv { .. }
                | NodeKind::SuBlock1 { .. }
                | NodeKind::SuBlock2 { .. }
                | NodeKind::SpikeSpp { .. }
                | NodeKind::Upsample { .. } => want(node.inputs[0], EdgeType::Spike, node)?,
                NodeKind::SeBn { .. } | NodeKind::If { .. } => {
                    want(node.inputs[0], EdgeType::Float, node)?
                }
                NodeKind::MaxPool { .. } => {
                    if types[node.inputs[0]].is_none() {
                        return Err(Error::Config(format!(
                            "node '{}' consumes detect-head output",
                            node.id
                        )));
                    }
                }
                NodeKind::Concat => {
                    let first = types[node.inputs[0]];
                    if first.is_none() {
                        return Err(Error::Config(format!(
                            "node '{}' consumes detect-head output",
                            node.id
                        )));
                    }
                    for &src in &node.inputs[1..] {
                        if types[src] != first {
                            return Err(Error::Config(format!(
                                "node '{}' concatenates mixed tensor kinds",
                                node.id
                            )));
                        }
                    }
                }
                NodeKind::Add => {
                    for &src in &node.inputs {
                        want(src, EdgeType::Float, node)?;
                    }
                }
                NodeKind::DetectHead { .. } => {
                    for &src in &node.inputs {
                        want(src, EdgeType::Spike, node)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Output channel count per node. The detect head entry is the
    /// per-scale prediction channel count.
    pub fn infer_channels(&self) -> Result<Vec<usize>> {
        let mut ch = vec![0usize; self.nodes.len()];
        for &i in &self.topo {
            let node = &self.nodes[i];
            let in_ch = |j: usize| ch[node.inputs[j]];
            ch[i] = match node.kind {
                NodeKind::Encoder { out_ch, .. } => out_ch,
                NodeKind::Denoise { .. } => in_ch(0),
                NodeKind::Conv { out_ch, .. } => out_ch,
                NodeKind::SeBn { .. } | NodeKind::If { .. } => in_ch(0),
                NodeKind::SuBlock1 { out_ch } | NodeKind::SuBlock2 { out_ch } => {
                    if out_ch % 2 != 0 {
                        return Err(Error::Config(format!(
                            "node '{}': channel split needs an even out_ch, got {out_ch}",
                            node.id
                        )));
                    }
                    out_ch
                }
                NodeKind::SpikeSpp { out_ch, .. } => out_ch,
                NodeKind::MaxPool { .. } | NodeKind::Upsample { .. } => in_ch(0),
                NodeKind::Concat => node.inputs.iter().map(|&s| ch[s]).sum(),
                NodeKind::Add => {
                    let first = in_ch(0);
                    for &src in &node.inputs[1..] {
                        if ch[src] != first {
                            return Err(Error::Config(format!(
                                "node '{}' adds tensors with differing channels",
                                node.id
                            )));
                        }
                    }
                    first
                }
                NodeKind::DetectHead { classes } => classes + 4,
            };
        }
        Ok(ch)
    }

    /// Expands every node into its convolution and normalization sites;
    /// drives weight naming, random init, folding and profiling.
    pub fn sites(&self) -> Result<(Vec<ConvSite>, Vec<NormSite>)> {
        sites::expand(self)
    }

    /// Spatial extents per node for a given input image size. The detect
    /// head entry holds one `(h, w)` per scale.
    pub fn infer_spatial(&self, h: usize, w: usize) -> Result<Vec<Vec<(usize, usize)>>> {
        let mut hw: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.nodes.len()];
        let pool_out = |extent: usize, k: usize, stride: usize, id: &str| -> Result<usize> {
            if extent < k {
                return Err(Error::Shape(format!(
                    "node '{id}': pooling window {k} does not fit extent {extent}"
                )));
            }
            Ok((extent - k) / stride + 1)
        };
        for &i in &self.topo {
            let node = &self.nodes[i];
            let input_hw = |j: usize| hw[node.inputs[j]][0];
            hw[i] = match node.kind {
                NodeKind::Encoder { k, stride, pad, .. } => {
                    let c = crate::conv::ConvLayer::zeroed(3, 1, k, k, stride, pad)?;
                    vec![c.out_hw(h, w)?]
                }
                NodeKind::Denoise { downsample, .. } => {
                    let (ih, iw) = input_hw(0);
                    match downsample {
                        Downsample::None => vec![(ih, iw)],
                        Downsample::MaxPool2 => {
                            vec![(pool_out(ih, 2, 2, &node.id)?, pool_out(iw, 2, 2, &node.id)?)]
                        }
                    }
                }
                NodeKind::Conv { k, stride, pad, .. } => {
                    let (ih, iw) = input_hw(0);
                    let c = crate::conv::ConvLayer::zeroed(1, 1, k, k, stride, pad)?;
                    vec![c.out_hw(ih, iw)?]
                }
                NodeKind::SeBn { .. } | NodeKind::If { .. } => vec![input_hw(0)],
                NodeKind::SuBlock1 { .. } => {
                    let (ih, iw) = input_hw(0);
                    let c = crate::conv::ConvLayer::zeroed(1, 1, 3, 3, 2, 1)?;
                    vec![c.out_hw(ih, iw)?]
                }
                NodeKind::SuBlock2 { .. } => vec![input_hw(0)],
                NodeKind::SpikeSpp { pool_k, .. } => {
                    let (ih, iw) = input_hw(0);
                    if ih + 2 * (pool_k / 2) < pool_k || iw + 2 * (pool_k / 2) < pool_k {
                        return Err(Error::Shape(format!(
                            "node '{}': pooling window {pool_k} does not fit ({ih}, {iw})",
                            node.id
                        )));
                    }
                    vec![(ih, iw)]
                }
                NodeKind::MaxPool { k, stride } => {
                    let (ih, iw) = input_hw(0);
                    vec![(
                        pool_out(ih, k, stride, &node.id)?,
                        pool_out(iw, k, stride, &node.id)?,
                    )]
                }
                NodeKind::Upsample { factor } => {
                    let (ih, iw) = input_hw(0);
                    vec![(ih * factor, iw * factor)]
                }
                NodeKind::Concat | NodeKind::Add => {
                    let first = input_hw(0);
                    for j in 1..node.inputs.len() {
                        if input_hw(j) != first {
                            return Err(Error::Shape(format!(
                                "node '{}' combines differing spatial extents",
                                node.id
                            )));
                        }
                    }
                    vec![first]
                }
                NodeKind::DetectHead { .. } => {
                    (0..node.inputs.len()).map(input_hw).collect()
                }
            };
        }
        Ok(hw)
    }
}
