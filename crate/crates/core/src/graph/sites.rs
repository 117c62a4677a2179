//! Expansion of graph nodes into convolution and normalization sites.
//!
//! A site is one physical parameter set. Weight records, random
//! initialization, folding and the profiler all walk the same expansion,
//! so naming stays consistent everywhere:
//!
//! * standalone CONV `c3` owns `c3.w` / `c3.b`
//! * a block's internal convs are `<id>.conv_a` etc., each with an
//!   attached normalizer at `<name>.bn.{gamma,beta,mean,var}`
//! * standalone SEBN `s1` owns `s1.{gamma,beta,mean,var}`

use crate::error::Result;
use crate::graph::{NetGraph, NodeKind};

/// How a convolution site is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteNorm {
    /// Per-(time step, channel) normalization with branch divisor `n`.
    Step { n: u32 },
    /// Conventional per-channel normalization (encoder only).
    Plain,
    /// Bare convolution; any normalization is a separate graph node.
    None,
}

/// One convolution parameter set.
#[derive(Debug, Clone)]
pub struct ConvSite {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub norm: SiteNorm,
}

impl ConvSite {
    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.k * self.k
    }
}

/// One standalone normalization parameter set (a SEBN graph node).
#[derive(Debug, Clone)]
pub struct NormSite {
    pub name: String,
    pub channels: usize,
    pub n: u32,
}

/// Internal conv layout of one SUBLOCK1 node.
pub fn sublock1_sites(id: &str, in_ch: usize, out_ch: usize) -> [ConvSite; 3] {
    let half = out_ch / 2;
    [
        ConvSite {
            name: format!("{id}.conv_a"),
            in_ch,
            out_ch,
            k: 3,
            stride: 2,
            pad: 1,
            norm: SiteNorm::Step { n: 1 },
        },
        ConvSite {
            name: format!("{id}.conv_b"),
            in_ch: half,
            out_ch: half,
            k: 3,
            stride: 1,
            pad: 1,
            norm: SiteNorm::Step { n: 2 },
        },
        // Shortcut from the block input; strided to match the conv_b path.
        ConvSite {
            name: format!("{id}.conv_s"),
            in_ch,
            out_ch: half,
            k: 3,
            stride: 2,
            pad: 1,
            norm: SiteNorm::Step { n: 2 },
        },
    ]
}

/// Internal conv layout of one SUBLOCK2 node.
pub fn sublock2_sites(id: &str, in_ch: usize, out_ch: usize) -> [ConvSite; 2] {
    let half = out_ch / 2;
    [
        ConvSite {
            name: format!("{id}.conv_a"),
            in_ch,
            out_ch,
            k: 3,
            stride: 1,
            pad: 1,
            norm: SiteNorm::Step { n: 1 },
        },
        ConvSite {
            name: format!("{id}.conv_b"),
            in_ch: half,
            out_ch: half,
            k: 3,
            stride: 1,
            pad: 1,
            norm: SiteNorm::Step { n: 1 },
        },
    ]
}

/// Internal conv layout of one SPIKESPP node.
pub fn spp_sites(id: &str, in_ch: usize, mid_ch: usize, out_ch: usize) -> [ConvSite; 2] {
    [
        ConvSite {
            name: format!("{id}.conv_a"),
            in_ch,
            out_ch: mid_ch,
            k: 1,
            stride: 1,
            pad: 0,
            norm: SiteNorm::Step { n: 1 },
        },
        ConvSite {
            name: format!("{id}.conv_b"),
            in_ch: 3 * mid_ch,
            out_ch,
            k: 1,
            stride: 1,
            pad: 0,
            norm: SiteNorm::Step { n: 1 },
        },
    ]
}

/// Decoupled head sites for one scale. All normalizers use `n = t_steps`
/// because their outputs are summed over the T steps by the accumulators.
pub fn head_scale_sites(
    id: &str,
    scale: usize,
    in_ch: usize,
    classes: usize,
    t_steps: usize,
) -> [ConvSite; 4] {
    let n = t_steps as u32;
    let mk = |branch: &str, stage: usize, out_ch: usize, k: usize| ConvSite {
        name: format!("{id}.s{scale}.{branch}{stage}"),
        in_ch,
        out_ch,
        k,
        stride: 1,
        pad: k / 2,
        norm: SiteNorm::Step { n },
    };
    [
        mk("cls", 1, in_ch, 3),
        mk("cls", 2, classes, 1),
        mk("box", 1, in_ch, 3),
        mk("box", 2, 4, 1),
    ]
}

pub fn encoder_site(id: &str, out_ch: usize, k: usize, stride: usize, pad: usize) -> ConvSite {
    ConvSite {
        name: format!("{id}.conv"),
        in_ch: 3,
        out_ch,
        k,
        stride,
        pad,
        norm: SiteNorm::Plain,
    }
}

/// All convolution and standalone normalization sites of a graph, in
/// topological order.
pub fn expand(graph: &NetGraph) -> Result<(Vec<ConvSite>, Vec<NormSite>)> {
    let channels = graph.infer_channels()?;
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    for &i in graph.topo_order() {
        let node = &graph.nodes[i];
        let in_ch = node.inputs.first().map(|&s| channels[s]).unwrap_or(0);
        match node.kind {
            NodeKind::Encoder {
                out_ch,
                k,
                stride,
                pad,
            } => convs.push(encoder_site(&node.id, out_ch, k, stride, pad)),
            NodeKind::Conv {
                out_ch,
                k,
                stride,
                pad,
            } => convs.push(ConvSite {
                name: node.id.clone(),
                in_ch,
                out_ch,
                k,
                stride,
                pad,
                norm: SiteNorm::None,
            }),
            NodeKind::SeBn { n } => norms.push(NormSite {
                name: node.id.clone(),
                channels: in_ch,
                n,
            }),
            NodeKind::SuBlock1 { out_ch } => {
                convs.extend(sublock1_sites(&node.id, in_ch, out_ch))
            }
            NodeKind::SuBlock2 { out_ch } => {
                convs.extend(sublock2_sites(&node.id, in_ch, out_ch))
            }
            NodeKind::SpikeSpp { mid_ch, out_ch, .. } => {
                convs.extend(spp_sites(&node.id, in_ch, mid_ch, out_ch))
            }
            NodeKind::DetectHead { classes } => {
                for (scale, &src) in node.inputs.iter().enumerate() {
                    convs.extend(head_scale_sites(
                        &node.id,
                        scale,
                        channels[src],
                        classes,
                        graph.t_steps,
                    ));
                }
            }
            _ => {}
        }
    }
    Ok((convs, norms))
}
