//! Runtime layer blocks built from bound weights.

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::neuron::{accumulate_run, if_run, NeuronConfig};
use crate::norm::{BatchNorm, StepBn};
use crate::tensor::{FloatTensor, SpikeTensor};

use super::forward::Trace;
use super::ops::{
    add_floats, concat_floats, max_pool_float, replicate_time, split_channels,
};
use super::sites::ConvSite;

/// Convolution weights for one site: one shared layer, or one layer per
/// time step after normalization has been folded in.
#[derive(Debug)]
pub enum ConvParams {
    Shared(ConvLayer),
    PerStep(Vec<ConvLayer>),
}

impl ConvParams {
    pub fn forward_spikes_metered(&self, x: &SpikeTensor, adds: &mut u64) -> Result<FloatTensor> {
        match self {
            ConvParams::Shared(layer) => layer.forward_spikes_metered(x, adds),
            ConvParams::PerStep(layers) => {
                let t_steps = x.shape().t;
                if layers.len() < t_steps {
                    return Err(Error::Weights(format!(
                        "need {} per-step weight sets, have {}",
                        t_steps,
                        layers.len()
                    )));
                }
                let mut slices = Vec::with_capacity(t_steps);
                for t in 0..t_steps {
                    slices.push(layers[t].forward_spikes_metered(&x.time_slice(t), adds)?);
                }
                FloatTensor::stack_time(&slices)
            }
        }
    }

    pub fn first(&self) -> &ConvLayer {
        match self {
            ConvParams::Shared(layer) => layer,
            ConvParams::PerStep(layers) => &layers[0],
        }
    }

    pub fn param_count(&self) -> usize {
        // Folded per-step sets still describe one logical convolution.
        let layer = self.first();
        layer.weight_count() + layer.bias.len()
    }
}

/// Inference-time normalization at a conv site.
#[derive(Debug)]
pub enum NormOp {
    Step(StepBn),
    Plain(BatchNorm),
    /// No-op: either the site has no normalizer or it was folded into the
    /// convolution weights.
    Identity,
}

impl NormOp {
    pub fn forward_eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
        match self {
            NormOp::Step(bn) => bn.forward_eval(x),
            NormOp::Plain(bn) => bn.forward_eval(x),
            NormOp::Identity => Ok(x.clone()),
        }
    }
}

/// A convolution site plus its normalizer, traced as one unit.
#[derive(Debug)]
pub struct ConvNorm {
    pub site: ConvSite,
    pub params: ConvParams,
    pub norm: NormOp,
}

impl ConvNorm {
    /// Spike-input forward: records the upstream firing rates this site
    /// saw together with the exact accumulation count.
    pub fn forward(&self, x: &SpikeTensor, trace: &mut Trace) -> Result<FloatTensor> {
        let rates = per_step_rates(x);
        let mut adds = 0u64;
        let y = self.params.forward_spikes_metered(x, &mut adds)?;
        let out = self.norm.forward_eval(&y)?;
        let os = y.shape();
        trace.record_conv(&self.site, false, rates, adds, (os.h, os.w));
        Ok(out)
    }
}

fn per_step_rates(x: &SpikeTensor) -> Vec<f64> {
    let shape = x.shape();
    let per_step = (shape.c * shape.h * shape.w) as f64;
    (0..shape.t)
        .map(|t| {
            (0..shape.c)
                .map(|c| x.plane_count_ones(t, c))
                .sum::<usize>() as f64
                / per_step
        })
        .collect()
}

/// Image-to-spike front end: float convolution, conventional
/// normalization, T-fold replication, then IF firing.
#[derive(Debug)]
pub struct EncoderBlock {
    pub id: String,
    pub site: ConvSite,
    pub conv: ConvLayer,
    pub norm: NormOp,
    pub t_steps: usize,
}

impl EncoderBlock {
    /// `image` is a single `(1, 3, h, w)` float tensor with values in
    /// [0, 1]; out-of-range values are clamped and counted in the trace.
    pub fn forward(&self, image: &FloatTensor, trace: &mut Trace) -> Result<SpikeTensor> {
        let shape = image.shape();
        if shape.t != 1 || shape.c != 3 {
            return Err(Error::Shape(format!(
                "encoder wants a (1, 3, h, w) image, got {shape}"
            )));
        }
        let mut clamped = 0u64;
        let data: Vec<f32> = image
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=1.0).contains(&v) {
                    v
                } else {
                    clamped += 1;
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        trace.clamped_pixels += clamped;
        let image = FloatTensor::from_vec(shape, data)?;
        let z = self.conv.forward_floats(&image)?;
        let os = z.shape();
        trace.record_conv(&self.site, true, Vec::new(), 0, (os.h, os.w));
        let z = self.norm.forward_eval(&z)?;
        let rep = replicate_time(&z, self.t_steps)?;
        let spikes = if_run(&rep, &NeuronConfig::default())?;
        trace.record_if(&format!("{}.if", self.id), &spikes);
        Ok(spikes)
    }
}

/// Downsampling CSP residual block: a strided conv expands channels, the
/// tensor splits in half, one half takes an extra conv joined by a strided
/// shortcut from the block input, and the halves re-concatenate before the
/// output neurons.
#[derive(Debug)]
pub struct CspDownBlock {
    pub id: String,
    pub conv_a: ConvNorm,
    pub conv_b: ConvNorm,
    pub conv_s: ConvNorm,
    pub out_ch: usize,
}

impl CspDownBlock {
    pub fn forward(&self, x: &SpikeTensor, trace: &mut Trace) -> Result<SpikeTensor> {
        let cfg = NeuronConfig::default();
        let y = self.conv_a.forward(x, trace)?;
        let (x1, x2) = split_channels(&y, self.out_ch / 2)?;
        let s2 = if_run(&x2, &cfg)?;
        trace.record_if(&format!("{}.if_split", self.id), &s2);
        let path = self.conv_b.forward(&s2, trace)?;
        let shortcut = self.conv_s.forward(x, trace)?;
        let joined = add_floats(&[&path, &shortcut])?;
        let pre_act = concat_floats(&[&x1, &joined])?;
        let out = if_run(&pre_act, &cfg)?;
        trace.record_if(&format!("{}.if_out", self.id), &out);
        Ok(out)
    }
}

/// Shape-preserving CSP block used for feature fusion; no shortcut.
#[derive(Debug)]
pub struct CspBlock {
    pub id: String,
    pub conv_a: ConvNorm,
    pub conv_b: ConvNorm,
    pub out_ch: usize,
}

impl CspBlock {
    pub fn forward(&self, x: &SpikeTensor, trace: &mut Trace) -> Result<SpikeTensor> {
        self.forward_parts(x, trace).map(|(_, _, out)| out)
    }

    /// Same as [`forward`](Self::forward) but also returns the untouched
    /// half and the pre-activation concat for structural tests.
    pub fn forward_parts(
        &self,
        x: &SpikeTensor,
        trace: &mut Trace,
    ) -> Result<(FloatTensor, FloatTensor, SpikeTensor)> {
        let cfg = NeuronConfig::default();
        let y = self.conv_a.forward(x, trace)?;
        let (x1, x2) = split_channels(&y, self.out_ch / 2)?;
        let s2 = if_run(&x2, &cfg)?;
        trace.record_if(&format!("{}.if_split", self.id), &s2);
        let path = self.conv_b.forward(&s2, trace)?;
        let pre_act = concat_floats(&[&x1, &path])?;
        let out = if_run(&pre_act, &cfg)?;
        trace.record_if(&format!("{}.if_out", self.id), &out);
        Ok((x1, pre_act, out))
    }
}

/// Pyramid pooling on membrane potentials: two chained max-pools run on
/// the conv output *before* the firing nonlinearity, so repeated pooling
/// sees graded values instead of saturating binary maps.
#[derive(Debug)]
pub struct SppBlock {
    pub id: String,
    pub conv_a: ConvNorm,
    pub conv_b: ConvNorm,
    pub pool_k: usize,
}

impl SppBlock {
    pub fn forward(&self, x: &SpikeTensor, trace: &mut Trace) -> Result<SpikeTensor> {
        let cfg = NeuronConfig::default();
        let x1 = self.conv_a.forward(x, trace)?;
        let pad = self.pool_k / 2;
        let x2 = max_pool_float(&x1, self.pool_k, 1, pad)?;
        let x3 = max_pool_float(&x2, self.pool_k, 1, pad)?;
        let cat = concat_floats(&[&x1, &x2, &x3])?;
        let mid = if_run(&cat, &cfg)?;
        trace.record_if(&format!("{}.if_mid", self.id), &mid);
        let y = self.conv_b.forward(&mid, trace)?;
        let out = if_run(&y, &cfg)?;
        trace.record_if(&format!("{}.if_out", self.id), &out);
        Ok(out)
    }
}

/// One decoupled prediction branch: conv, fire, conv, then accumulate the
/// per-step outputs into a single float map.
#[derive(Debug)]
pub struct HeadBranch {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
}

impl HeadBranch {
    fn forward(&self, x: &SpikeTensor, trace: &mut Trace) -> Result<FloatTensor> {
        let m1 = self.conv1.forward(x, trace)?;
        let s1 = if_run(&m1, &NeuronConfig::default())?;
        trace.record_if(&format!("{}.if", self.conv1.site.name), &s1);
        let m2 = self.conv2.forward(&s1, trace)?;
        // The final neurons never fire: with an unreachable threshold the
        // membrane just sums its charge, and we read it out directly.
        let acc = accumulate_run(&m2)?;
        trace.record_acc(&self.conv2.site.name, m2.shape().len() as u64);
        Ok(acc)
    }
}

/// Two-scale decoupled detection head producing raw per-scale prediction
/// maps (classes first, then 4 box channels); no decoding.
#[derive(Debug)]
pub struct HeadBlock {
    pub scales: Vec<HeadScale>,
}

#[derive(Debug)]
pub struct HeadScale {
    pub cls: HeadBranch,
    pub boxes: HeadBranch,
}

impl HeadBlock {
    pub fn forward(
        &self,
        inputs: &[&SpikeTensor],
        trace: &mut Trace,
    ) -> Result<Vec<FloatTensor>> {
        if inputs.len() != self.scales.len() {
            return Err(Error::Shape(format!(
                "head has {} scales but got {} inputs",
                self.scales.len(),
                inputs.len()
            )));
        }
        let mut outs = Vec::with_capacity(inputs.len());
        for (scale, x) in self.scales.iter().zip(inputs) {
            let cls = scale.cls.forward(x, trace)?;
            let boxes = scale.boxes.forward(x, trace)?;
            outs.push(concat_floats(&[&cls, &boxes])?);
        }
        Ok(outs)
    }
}
