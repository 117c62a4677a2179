//! Integrate-and-fire neuron dynamics.
//!
//! The membrane integrates its input each step and fires once it reaches
//! the threshold (spike at exact equality), then hard-resets to the reset
//! potential. There is no leak. An accumulate mode with an unreachable
//! threshold simply sums inputs over time; the detection head reads that
//! membrane out as the prediction.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape, SpikeTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronMode {
    /// Threshold, spike, hard reset.
    Firing,
    /// Integrate only; never spikes.
    Accumulate,
}

#[derive(Debug, Clone, Copy)]
pub struct NeuronConfig {
    pub v_th: f32,
    pub v_rst: f32,
    pub mode: NeuronMode,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            v_th: 1.0,
            v_rst: 0.0,
            mode: NeuronMode::Firing,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == NeuronMode::Firing && !(self.v_th > self.v_rst) {
            return Err(Error::Config(format!(
                "firing neuron needs v_th > v_rst, got v_th={} v_rst={}",
                self.v_th, self.v_rst
            )));
        }
        Ok(())
    }
}

/// Per-neuron membrane potentials at the current step (`t = 1`).
#[derive(Debug, Clone)]
pub struct MembraneState {
    pub v: FloatTensor,
}

impl MembraneState {
    /// All membranes at the reset potential.
    pub fn resting(shape: Shape, cfg: &NeuronConfig) -> Result<Self> {
        let shape = shape.with_t(1)?;
        let data = vec![cfg.v_rst; shape.len()];
        Ok(MembraneState {
            v: FloatTensor::from_vec(shape, data)?,
        })
    }
}

/// One integrate-and-fire step.
///
/// The membrane becomes `v + input`; every neuron at or above `v_th` emits
/// a spike and is reset to `v_rst`, the rest keep the accumulated value.
pub fn if_step(
    state: &MembraneState,
    input: &FloatTensor,
    cfg: &NeuronConfig,
) -> Result<(SpikeTensor, MembraneState)> {
    cfg.validate()?;
    if cfg.mode != NeuronMode::Firing {
        return Err(Error::Config(
            "if_step requires a firing-mode neuron".to_string(),
        ));
    }
    let shape = state.v.shape();
    if input.shape() != shape {
        return Err(Error::Shape(format!(
            "membrane {} vs input {}",
            shape,
            input.shape()
        )));
    }
    let mut spikes = vec![0u8; shape.len()];
    let mut v_next = vec![0f32; shape.len()];
    for (i, (v, x)) in state.v.data().iter().zip(input.data()).enumerate() {
        let charged = v + x;
        if charged >= cfg.v_th {
            spikes[i] = 1;
            v_next[i] = cfg.v_rst;
        } else {
            v_next[i] = charged;
        }
    }
    let spikes = SpikeTensor::from_vec_unchecked(shape, spikes);
    let state = MembraneState {
        v: FloatTensor::from_vec(shape, v_next)?,
    };
    Ok((spikes, state))
}

/// Runs IF dynamics over all time slices of `inputs`, starting from a
/// resting membrane, and stacks the per-step spikes.
///
/// ```
/// use spikenet_core::neuron::{if_run, NeuronConfig};
/// use spikenet_core::tensor::{FloatTensor, Shape};
///
/// // One neuron charged 0.4 per step reaches the threshold at step 3.
/// let charge = FloatTensor::from_vec(
///     Shape::new(4, 1, 1, 1).unwrap(),
///     vec![0.4; 4],
/// ).unwrap();
/// let spikes = if_run(&charge, &NeuronConfig::default()).unwrap();
/// assert_eq!(spikes.data(), &[0, 0, 1, 0]);
/// ```
pub fn if_run(inputs: &FloatTensor, cfg: &NeuronConfig) -> Result<SpikeTensor> {
    let t_steps = inputs.shape().t;
    let mut state = MembraneState::resting(inputs.shape(), cfg)?;
    let mut slices = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let (spikes, next) = if_step(&state, &inputs.time_slice(t), cfg)?;
        state = next;
        slices.push(spikes);
    }
    SpikeTensor::stack_time(&slices)
}

/// Sums inputs over the time dimension (accumulate mode readout).
///
/// The per-element sum runs in f64 and is stored back as f32.
pub fn accumulate_run(inputs: &FloatTensor) -> Result<FloatTensor> {
    let shape = inputs.shape();
    let out_shape = shape.with_t(1)?;
    let step = out_shape.len();
    let mut acc = vec![0f64; step];
    for t in 0..shape.t {
        let base = t * step;
        for (a, x) in acc.iter_mut().zip(&inputs.data()[base..base + step]) {
            *a += *x as f64;
        }
    }
    FloatTensor::from_vec(out_shape, acc.iter().map(|&a| a as f32).collect())
}

/// Surrogate derivative used in place of the Heaviside derivative.
#[derive(Debug, Clone, Copy)]
pub enum SurrogateKind {
    ArcTan,
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    /// Width parameter; larger is sharper.
    pub alpha: f32,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: SurrogateKind::ArcTan,
            alpha: 2.0,
        }
    }
}

impl SurrogateConfig {
    /// d/dx of the relaxed spike function:
    /// `(alpha/2) / (1 + (pi*alpha*x/2)^2)`.
    #[inline]
    pub fn grad(&self, x: f32) -> f32 {
        match self.kind {
            SurrogateKind::ArcTan => {
                let z = std::f32::consts::PI * self.alpha * x / 2.0;
                (self.alpha / 2.0) / (1.0 + z * z)
            }
        }
    }

    /// The relaxed spike function itself:
    /// `(1/pi) * atan(pi*alpha*x/2) + 1/2`, a smooth step in (0, 1).
    #[inline]
    pub fn primitive(&self, x: f32) -> f32 {
        match self.kind {
            SurrogateKind::ArcTan => {
                let z = std::f32::consts::PI * self.alpha * x / 2.0;
                z.atan() / std::f32::consts::PI + 0.5
            }
        }
    }

    /// f64 twins for the finite-difference reference path.
    pub fn grad_f64(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::ArcTan => {
                let a = self.alpha as f64;
                let z = std::f64::consts::PI * a * x / 2.0;
                (a / 2.0) / (1.0 + z * z)
            }
        }
    }

    pub fn primitive_f64(&self, x: f64) -> f64 {
        match self.kind {
            SurrogateKind::ArcTan => {
                let a = self.alpha as f64;
                let z = std::f64::consts::PI * a * x / 2.0;
                z.atan() / std::f64::consts::PI + 0.5
            }
        }
    }
}

/// Elementwise surrogate derivative of `v - v_th`.
pub fn surrogate_grad(v_minus_th: &FloatTensor, cfg: &SurrogateConfig) -> Result<FloatTensor> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config(format!(
            "surrogate alpha must be positive, got {}",
            cfg.alpha
        )));
    }
    let data = v_minus_th.data().iter().map(|&x| cfg.grad(x)).collect();
    FloatTensor::from_vec(v_minus_th.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> FloatTensor {
        FloatTensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![v]).unwrap()
    }

    fn const_input(t: usize, v: f32) -> FloatTensor {
        let shape = Shape::new(t, 1, 1, 1).unwrap();
        FloatTensor::from_vec(shape, vec![v; t]).unwrap()
    }

    #[test]
    fn below_threshold_charges_without_spiking() {
        let cfg = NeuronConfig::default();
        let state = MembraneState::resting(Shape::new(1, 1, 1, 1).unwrap(), &cfg).unwrap();
        let (spikes, next) = if_step(&state, &scalar(0.5), &cfg).unwrap();
        assert_eq!(spikes.data(), &[0]);
        assert_eq!(next.v.data(), &[0.5]);
    }

    #[test]
    fn crossing_threshold_fires_and_resets() {
        let cfg = NeuronConfig::default();
        let state = MembraneState {
            v: scalar(0.5),
        };
        let (spikes, next) = if_step(&state, &scalar(0.6), &cfg).unwrap();
        assert_eq!(spikes.data(), &[1]);
        assert_eq!(next.v.data(), &[0.0]);
    }

    #[test]
    fn exact_threshold_fires() {
        // Heaviside convention: H(0) = 1.
        let cfg = NeuronConfig::default();
        let state = MembraneState::resting(Shape::new(1, 1, 1, 1).unwrap(), &cfg).unwrap();
        let (spikes, _) = if_step(&state, &scalar(1.0), &cfg).unwrap();
        assert_eq!(spikes.data(), &[1]);
    }

    #[test]
    fn constant_charge_fires_on_schedule() {
        // 0.4 per step: membranes 0.4, 0.8, 1.2 -> fire, 0.4.
        let spikes = if_run(&const_input(4, 0.4), &NeuronConfig::default()).unwrap();
        assert_eq!(spikes.data(), &[0, 0, 1, 0]);
    }

    #[test]
    fn zero_input_never_fires() {
        let spikes = if_run(&const_input(4, 0.0), &NeuronConfig::default()).unwrap();
        assert_eq!(spikes.data(), &[0, 0, 0, 0]);
    }

    #[test]
    fn saturating_input_fires_every_step() {
        let spikes = if_run(&const_input(4, 1.0), &NeuronConfig::default()).unwrap();
        assert_eq!(spikes.data(), &[1, 1, 1, 1]);
    }

    #[test]
    fn accumulate_sums_over_time() {
        let shape = Shape::new(4, 1, 1, 1).unwrap();
        let x = FloatTensor::from_vec(shape, vec![0.2, 0.3, -0.1, 0.6]).unwrap();
        let out = accumulate_run(&x).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn accumulate_zero_and_identity() {
        let zero = const_input(3, 0.0);
        assert_eq!(accumulate_run(&zero).unwrap().data(), &[0.0]);
        let single = const_input(1, 0.7);
        assert_eq!(accumulate_run(&single).unwrap().data(), &[0.7]);
    }

    #[test]
    fn accumulate_matches_time_sum_oracle() {
        let shape = Shape::new(7, 3, 4, 4).unwrap();
        let data: Vec<f32> = (0..shape.len())
            .map(|i| ((i * 2654435761) % 2000) as f32 / 300.0 - 3.0)
            .collect();
        let x = FloatTensor::from_vec(shape, data).unwrap();
        let out = accumulate_run(&x).unwrap();
        let step = shape.c * shape.h * shape.w;
        for i in 0..step {
            let want: f64 = (0..shape.t).map(|t| x.data()[t * step + i] as f64).sum();
            let got = out.data()[i] as f64;
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn accumulate_doubles_with_repeated_slices() {
        let shape = Shape::new(2, 1, 2, 2).unwrap();
        let data = vec![0.3, -1.0, 2.5, 0.0, 0.7, 0.5, -0.25, 4.0];
        let x = FloatTensor::from_vec(shape, data.clone()).unwrap();
        let twice = FloatTensor::from_vec(
            Shape::new(4, 1, 2, 2).unwrap(),
            data.iter().chain(&data).copied().collect(),
        )
        .unwrap();
        let once = accumulate_run(&x).unwrap();
        let doubled = accumulate_run(&twice).unwrap();
        for (a, b) in once.data().iter().zip(doubled.data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn surrogate_peak_and_tails() {
        let cfg = SurrogateConfig::default();
        assert!((cfg.grad(0.0) - 1.0).abs() < 1e-6); // alpha/2 with alpha = 2
        assert!(cfg.grad(1e6) < 1e-9);
        assert!(cfg.grad(-1e6) < 1e-9);
    }

    #[test]
    fn surrogate_is_even() {
        let cfg = SurrogateConfig::default();
        for &x in &[0.1f32, 0.7, 2.5, 19.0] {
            assert_eq!(cfg.grad(x).to_bits(), cfg.grad(-x).to_bits());
        }
    }

    #[test]
    fn surrogate_primitive_matches_grad_numerically() {
        let cfg = SurrogateConfig::default();
        for &x in &[-1.5f64, -0.2, 0.0, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (cfg.primitive_f64(x + h) - cfg.primitive_f64(x - h)) / (2.0 * h);
            assert!((fd - cfg.grad_f64(x)).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn reset_is_exact_wherever_spiking() {
        let shape = Shape::new(6, 2, 3, 3).unwrap();
        let data: Vec<f32> = (0..shape.len())
            .map(|i| ((i * 2654435761) % 1000) as f32 / 400.0 - 0.2)
            .collect();
        let inputs = FloatTensor::from_vec(shape, data).unwrap();
        let cfg = NeuronConfig::default();
        let mut state = MembraneState::resting(shape, &cfg).unwrap();
        for t in 0..shape.t {
            let (spikes, next) = if_step(&state, &inputs.time_slice(t), &cfg).unwrap();
            for (s, v) in spikes.data().iter().zip(next.v.data()) {
                if *s == 1 {
                    assert_eq!(*v, cfg.v_rst);
                }
            }
            state = next;
        }
    }

    #[test]
    fn spike_count_nondecreasing_in_t() {
        let mut prev = 0;
        for t in 1..=8 {
            let spikes = if_run(&const_input(t, 0.3), &NeuronConfig::default()).unwrap();
            let count = spikes.count_ones();
            assert!(count >= prev, "T={t}: {count} < {prev}");
            prev = count;
        }
    }

    #[test]
    fn invalid_threshold_rejected() {
        let cfg = NeuronConfig {
            v_th: 0.0,
            v_rst: 0.0,
            mode: NeuronMode::Firing,
        };
        assert!(cfg.validate().is_err());
    }
}
