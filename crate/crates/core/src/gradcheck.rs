//! Gradient verification harness.
//!
//! Analytic backward passes are compared against central finite
//! differences of an f64 mirror of each forward. The loss is a fixed
//! random weighting of the outputs: a plain sum would be blind to any
//! normalization parameter whose per-group output mean is zero by
//! construction. Three fragments are checked:
//!
//! * a convolution (input, weight and bias gradients),
//! * training-mode per-step normalization (input, gamma, beta),
//! * backprop through time over a relaxed two-step integrate-and-fire
//!   chain, where the hard step is replaced by the surrogate's smooth
//!   primitive and the reset gate is frozen (the standard detach), so the
//!   chain-rule machinery is what gets checked, not the hard forward.
//!
//! Errors are reported relative to the largest gradient magnitude of each
//! parameter group.

use serde::Serialize;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::neuron::SurrogateConfig;
use crate::norm::StepBn;
use crate::tensor::{FloatTensor, Shape};

/// Finite differences above this many parameters are refused.
pub const MAX_FD_PARAMS: usize = 5000;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub seed: u64,
    /// Random instances per fragment.
    pub instances: usize,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            seed: 0,
            instances: 20,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn render_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("report serialization failed: {e}")))
    }

    pub fn render_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}: max relative error {:.3e} -> {}",
                e.name,
                e.max_rel_err,
                if e.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "gradcheck {} (seed {}, {} instances, tolerance {:.1e})",
            if self.passed { "passed" } else { "FAILED" },
            self.seed,
            self.instances,
            self.tolerance
        );
        out
    }
}

/// Runs every fragment check and aggregates worst-case errors.
pub fn run(settings: &GradCheckSettings) -> Result<GradCheckReport> {
    let mut rng = StdRng::seed_from_u64(settings.seed);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let track = |name: &str, err: f64, worst: &mut Vec<(String, f64)>| {
        match worst.iter_mut().find(|(n, _)| n == name) {
            Some((_, e)) => *e = e.max(err),
            None => worst.push((name.to_string(), err)),
        }
    };

    for _ in 0..settings.instances {
        let conv = conv_instance(&mut rng)?;
        track("conv.input", conv.0, &mut worst);
        track("conv.weights", conv.1, &mut worst);
        track("conv.bias", conv.2, &mut worst);

        let bn = sebn_instance(&mut rng)?;
        track("sebn.input", bn.0, &mut worst);
        track("sebn.gamma", bn.1, &mut worst);
        track("sebn.beta", bn.2, &mut worst);

        let bptt = relaxed_if_instance(&mut rng)?;
        track("if_bptt.input", bptt, &mut worst);
    }

    let entries: Vec<GradCheckEntry> = worst
        .into_iter()
        .map(|(name, max_rel_err)| GradCheckEntry {
            name,
            max_rel_err,
            pass: max_rel_err <= settings.tolerance,
        })
        .collect();
    let passed = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        seed: settings.seed,
        instances: settings.instances,
        tolerance: settings.tolerance,
        entries,
        passed,
    })
}

/// Largest |a - b| over the group divided by the largest magnitude seen.
fn relative_error(analytic: &[f32], reference: &[f64]) -> Result<f64> {
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal("non-finite analytic gradient".to_string()));
    }
    let scale = analytic
        .iter()
        .map(|v| v.abs() as f64)
        .chain(reference.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    Ok(analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0f64, f64::max)
        / scale)
}

/// Central finite differences of `f` at `point`.
fn finite_diff<F>(f: F, point: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() > MAX_FD_PARAMS {
        return Err(Error::Config(format!(
            "fragment has {} parameters; finite differences allow at most {MAX_FD_PARAMS}",
            point.len()
        )));
    }
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-5 * point[i].abs().max(1.0);
        work[i] = point[i] + h;
        let up = f(&work);
        work[i] = point[i] - h;
        let down = f(&work);
        work[i] = point[i];
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}

fn random_vec(rng: &mut StdRng, len: usize, lim: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-lim..lim)).collect()
}

/// Conv gradcheck: (input err, weight err, bias err).
fn conv_instance(rng: &mut StdRng) -> Result<(f64, f64, f64)> {
    let (in_ch, out_ch, k, h, w) = (2usize, 3usize, 3usize, 5usize, 5usize);
    let layer = ConvLayer::new(
        in_ch,
        out_ch,
        k,
        k,
        1,
        1,
        random_vec(rng, out_ch * in_ch * k * k, 0.5),
        random_vec(rng, out_ch, 0.3),
    )?;
    let shape = Shape::new(1, in_ch, h, w)?;
    let x = FloatTensor::from_vec(shape, random_vec(rng, shape.len(), 1.0))?;

    let out = layer.forward_floats(&x)?;
    let weighting = FloatTensor::from_vec(
        out.shape(),
        random_vec(rng, out.shape().len(), 1.0),
    )?;
    let (gx, gw, gb) = layer.backward_floats(&x, &weighting)?;

    // f64 mirror of the dense convolution under the weighted-sum loss.
    let r64: Vec<f64> = weighting.data().iter().map(|&v| v as f64).collect();
    let loss = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
        let mut total = 0.0;
        for oc in 0..out_ch {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bv[oc];
                    for ci in 0..in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wv[((oc * in_ch + ci) * k + ky) * k + kx]
                                    * xv[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    total += r64[(oc * h + oy) * w + ox] * acc;
                }
            }
        }
        total
    };
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let w64: Vec<f64> = layer.weights.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = layer.bias.iter().map(|&v| v as f64).collect();

    let fd_x = finite_diff(|p| loss(p, &w64, &b64), &x64)?;
    let fd_w = finite_diff(|p| loss(&x64, p, &b64), &w64)?;
    let fd_b = finite_diff(|p| loss(&x64, &w64, p), &b64)?;
    Ok((
        relative_error(gx.data(), &fd_x)?,
        relative_error(&gw, &fd_w)?,
        relative_error(&gb, &fd_b)?,
    ))
}

/// Training-mode normalization gradcheck: (input err, gamma err, beta err).
fn sebn_instance(rng: &mut StdRng) -> Result<(f64, f64, f64)> {
    let (t, c, h, w, batch_n) = (2usize, 2usize, 3usize, 3usize, 3usize);
    let n = *[1u32, 2, 4].get((rng.random_range(0..3u32)) as usize).unwrap();
    let shape = Shape::new(t, c, h, w)?;
    let mut bn = StepBn::new(t, c, n)?;
    bn.gamma = random_vec(rng, t * c, 1.0).iter().map(|v| v + 1.2).collect();
    bn.beta = random_vec(rng, t * c, 0.5);
    let batch: Vec<FloatTensor> = (0..batch_n)
        .map(|_| FloatTensor::from_vec(shape, random_vec(rng, shape.len(), 1.5)))
        .collect::<Result<_>>()?;

    let (_, cache) = bn.forward_train(&batch.clone())?;
    let weighting: Vec<FloatTensor> = (0..batch_n)
        .map(|_| FloatTensor::from_vec(shape, random_vec(rng, shape.len(), 1.0)))
        .collect::<Result<_>>()?;
    let (gx, gg, gb) = bn.backward(&weighting, &cache)?;
    let r64: Vec<f64> = weighting
        .iter()
        .flat_map(|w| w.data().iter().map(|&v| v as f64))
        .collect();

    // f64 mirror: biased per-(t, k) statistics over the whole batch.
    let plane = h * w;
    let m = (batch_n * plane) as f64;
    let eps = bn.eps as f64;
    let nn = n as f64;
    let loss = |xs: &[f64], gamma: &[f64], beta: &[f64]| -> f64 {
        let mut total = 0.0;
        for g in 0..t * c {
            let (ti, ki) = (g / c, g % c);
            let base = shape.index(ti, ki, 0, 0);
            let sample = |i: usize, off: usize| xs[i * shape.len() + base + off];
            let mut mu = 0.0;
            for i in 0..batch_n {
                for off in 0..plane {
                    mu += sample(i, off);
                }
            }
            mu /= m;
            let mut var = 0.0;
            for i in 0..batch_n {
                for off in 0..plane {
                    var += (sample(i, off) - mu).powi(2);
                }
            }
            var /= m;
            let denom = (nn * (var + eps)).sqrt();
            for i in 0..batch_n {
                for off in 0..plane {
                    let y = gamma[g] * (sample(i, off) - mu) / denom + beta[g];
                    total += r64[i * shape.len() + base + off] * y;
                }
            }
        }
        total
    };
    let xs64: Vec<f64> = batch
        .iter()
        .flat_map(|b| b.data().iter().map(|&v| v as f64))
        .collect();
    let g64: Vec<f64> = bn.gamma.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = bn.beta.iter().map(|&v| v as f64).collect();

    let fd_x = finite_diff(|p| loss(p, &g64, &b64), &xs64)?;
    let fd_g = finite_diff(|p| loss(&xs64, p, &b64), &g64)?;
    let fd_b = finite_diff(|p| loss(&xs64, &g64, p), &b64)?;

    let gx_flat: Vec<f32> = gx.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok((
        relative_error(&gx_flat, &fd_x)?,
        relative_error(&gg, &fd_g)?,
        relative_error(&gb, &fd_b)?,
    ))
}

/// Cache of one relaxed integrate-and-fire run.
#[derive(Debug)]
pub struct RelaxedIfCache {
    /// Pre-reset membrane per step.
    pub charged: Vec<FloatTensor>,
    /// Frozen reset gates per step (the relaxed spike values).
    pub gates: Vec<FloatTensor>,
    pub v_th: f32,
    pub surrogate: SurrogateConfig,
}

/// Relaxed forward: the hard step becomes the surrogate primitive
/// `s_t = sigma(u_t - v_th)` and the reset keeps the `(1 - gate)` form
/// with the gate treated as a constant. Returns the relaxed spikes.
pub fn relaxed_if_forward(
    x: &FloatTensor,
    v_th: f32,
    surrogate: &SurrogateConfig,
) -> Result<(Vec<FloatTensor>, RelaxedIfCache)> {
    let shape = x.shape();
    let slice_shape = shape.with_t(1)?;
    let mut v = vec![0f32; slice_shape.len()];
    let mut spikes = Vec::with_capacity(shape.t);
    let mut charged = Vec::with_capacity(shape.t);
    let mut gates = Vec::with_capacity(shape.t);
    for t in 0..shape.t {
        let xt = x.time_slice(t);
        let u: Vec<f32> = v.iter().zip(xt.data()).map(|(a, b)| a + b).collect();
        let s: Vec<f32> = u.iter().map(|&ui| surrogate.primitive(ui - v_th)).collect();
        v = u.iter().zip(&s).map(|(&ui, &si)| (1.0 - si) * ui).collect();
        charged.push(FloatTensor::from_vec(slice_shape, u)?);
        gates.push(FloatTensor::from_vec(slice_shape, s.clone())?);
        spikes.push(FloatTensor::from_vec(slice_shape, s)?);
    }
    Ok((
        spikes,
        RelaxedIfCache {
            charged,
            gates,
            v_th,
            surrogate: *surrogate,
        },
    ))
}

/// Backprop through time with the reset gate detached: gradients flow
/// through the surrogate derivative and through the `(1 - gate) * u`
/// carry, never through the gate itself.
pub fn relaxed_if_backward(
    cache: &RelaxedIfCache,
    grad_spikes: &[FloatTensor],
) -> Result<FloatTensor> {
    let t_steps = cache.charged.len();
    if grad_spikes.len() != t_steps {
        return Err(Error::Shape(format!(
            "cached {} steps but {} gradients",
            t_steps,
            grad_spikes.len()
        )));
    }
    let slice_shape = cache.charged[0].shape();
    let len = slice_shape.len();
    let mut grad_v = vec![0f64; len];
    let mut grad_x_steps: Vec<Vec<f32>> = vec![Vec::new(); t_steps];
    for t in (0..t_steps).rev() {
        let u = cache.charged[t].data();
        let g = cache.gates[t].data();
        let gs = grad_spikes[t].data();
        let mut grad_u = vec![0f64; len];
        for i in 0..len {
            let sur = cache.surrogate.grad(u[i] - cache.v_th) as f64;
            grad_u[i] = gs[i] as f64 * sur + grad_v[i] * (1.0 - g[i] as f64);
        }
        grad_x_steps[t] = grad_u.iter().map(|&v| v as f32).collect();
        grad_v = grad_u; // u_t = v_{t-1} + x_t
    }
    let slices: Vec<FloatTensor> = grad_x_steps
        .into_iter()
        .map(|d| FloatTensor::from_vec(slice_shape, d))
        .collect::<Result<_>>()?;
    FloatTensor::stack_time(&slices)
}

/// Relaxed-chain gradcheck over two time steps; returns the input error.
fn relaxed_if_instance(rng: &mut StdRng) -> Result<f64> {
    let surrogate = SurrogateConfig::default();
    let v_th = 1.0f32;
    let shape = Shape::new(2, 1, 3, 3)?;
    let x = FloatTensor::from_vec(shape, random_vec(rng, shape.len(), 1.2))?;

    let (spikes, cache) = relaxed_if_forward(&x, v_th, &surrogate)?;
    let weighting: Vec<FloatTensor> = spikes
        .iter()
        .map(|s| FloatTensor::from_vec(s.shape(), random_vec(rng, s.shape().len(), 1.0)))
        .collect::<Result<_>>()?;
    let gx = relaxed_if_backward(&cache, &weighting)?;
    let r64: Vec<Vec<f64>> = weighting
        .iter()
        .map(|w| w.data().iter().map(|&v| v as f64).collect())
        .collect();

    // f64 mirror with the gates frozen to the cached values, so finite
    // differences measure exactly the detached function.
    let gates: Vec<Vec<f64>> = cache
        .gates
        .iter()
        .map(|g| g.data().iter().map(|&v| v as f64).collect())
        .collect();
    let len = shape.len() / shape.t;
    let loss = |xs: &[f64]| -> f64 {
        let mut v = vec![0f64; len];
        let mut total = 0.0;
        for t in 0..shape.t {
            for i in 0..len {
                let u = v[i] + xs[t * len + i];
                total += r64[t][i] * surrogate.primitive_f64(u - v_th as f64);
                v[i] = (1.0 - gates[t][i]) * u;
            }
        }
        total
    };
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let fd = finite_diff(loss, &x64)?;
    relative_error(gx.data(), &fd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_settings_pass() {
        let report = run(&GradCheckSettings {
            seed: 7,
            instances: 3,
            tolerance: 1e-3,
        })
        .unwrap();
        assert!(report.passed, "{}", report.render_text());
        assert_eq!(report.entries.len(), 7);
    }

    #[test]
    fn deterministic_under_seed() {
        let s = GradCheckSettings {
            seed: 42,
            instances: 2,
            tolerance: 1e-3,
        };
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }

    #[test]
    fn oversized_fragment_refused() {
        let point = vec![0.0; MAX_FD_PARAMS + 1];
        let err = finite_diff(|_| 0.0, &point).unwrap_err();
        assert!(err.to_string().contains("finite differences"));
    }

    #[test]
    fn relaxed_forward_is_smooth_step() {
        let shape = Shape::new(1, 1, 1, 1).unwrap();
        let x = FloatTensor::from_vec(shape, vec![1.0]).unwrap();
        let (s, _) = relaxed_if_forward(&x, 1.0, &SurrogateConfig::default()).unwrap();
        // u - v_th = 0 sits exactly at the half-way point of the smooth step.
        assert!((s[0].data()[0] - 0.5).abs() < 1e-6);
    }
}
