//! Computational-cost and energy accounting.
//!
//! Float-input convolutions are billed as dense multiply-accumulates:
//!
//! `FLOPs = c_in * k_h * k_w * c_out * h_out * w_out`
//!
//! Spike-input convolutions accumulate only where the upstream layer
//! fired, plus one bias add per output element per step:
//!
//! `SOPs = sum_t (f_t * c_in * k_h * k_w + 1) * c_out * h_out * w_out`
//!
//! where `f_t` is the measured upstream firing rate at step t. Denoiser
//! kernel passes and readout accumulators are pure additions and are
//! billed in the SOPs bucket as separate line items. Pooling, concat,
//! split and upsampling move bytes without accumulating and cost nothing.
//!
//! Energy prices one multiply-accumulate (FLOPs / 2) at 4.6 pJ and one
//! addition at 0.9 pJ, the usual 45 nm estimates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{BoundGraph, ForwardOptions, NetGraph, SiteNorm, Trace, WeightStore};
use crate::tensor::{FloatTensor, SpikeTensor};

/// Geometry of one convolution for cost formulas.
#[derive(Debug, Clone, Copy)]
pub struct LayerShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl LayerShape {
    fn output_elems(&self) -> f64 {
        (self.c_out * self.h_out * self.w_out) as f64
    }
}

/// Dense multiply-accumulate count of a float-input convolution.
pub fn flops(shape: &LayerShape) -> f64 {
    (self::taps(shape)) * shape.output_elems()
}

fn taps(shape: &LayerShape) -> f64 {
    (shape.c_in * shape.k_h * shape.k_w) as f64
}

/// Accumulation count of a spike-input convolution given the upstream
/// firing rate at each time step.
pub fn sops(shape: &LayerShape, rates_per_step: &[f64]) -> f64 {
    rates_per_step
        .iter()
        .map(|f| (f * taps(shape) + 1.0) * shape.output_elems())
        .sum()
}

/// Fraction of elements that are 1.
pub fn firing_rate(spikes: &SpikeTensor) -> f64 {
    spikes.firing_rate()
}

/// 45 nm energy constants; override the fields to model other processes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnergyModel {
    /// Picojoules per multiply-accumulate.
    pub e_mac_pj: f64,
    /// Picojoules per addition.
    pub e_add_pj: f64,
    /// Multiply-accumulates per floating-point operation.
    pub mac_per_flop: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            e_mac_pj: 4.6,
            e_add_pj: 0.9,
            mac_per_flop: 0.5,
        }
    }
}

/// Millijoules for a (FLOPs, SOPs) pair.
///
/// ```
/// use spikenet_core::profile::{energy_mj, EnergyModel};
///
/// // 0.16 GFLOPs of encoding plus 2.90 GSOPs of spike accumulation.
/// let mj = energy_mj(0.16e9, 2.90e9, &EnergyModel::default());
/// assert!((mj - 2.98).abs() < 0.01);
/// ```
pub fn energy_mj(total_flops: f64, total_sops: f64, model: &EnergyModel) -> f64 {
    (total_flops * model.mac_per_flop * model.e_mac_pj + total_sops * model.e_add_pj) * 1e-9
}

/// One billed line item.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub flops: f64,
    pub sops: f64,
    /// Mean upstream firing rate over time steps (spike convs only).
    pub mean_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiringEntry {
    pub name: String,
    pub rates: Vec<f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub t_steps: usize,
    pub inputs_profiled: usize,
    pub layers: Vec<LayerCost>,
    pub firing: Vec<FiringEntry>,
    pub total_flops: f64,
    pub total_sops: f64,
    pub total_params: usize,
    pub energy_mj: f64,
    pub model: EnergyModel,
}

/// Trainable parameter count: conv weights and biases plus the affine
/// normalizer parameters; running statistics are buffers, not parameters.
pub fn count_params(graph: &NetGraph) -> Result<usize> {
    let (convs, norms) = graph.sites()?;
    let t = graph.t_steps;
    let mut total = 0usize;
    for site in &convs {
        total += site.weight_len() + site.out_ch;
        total += match site.norm {
            SiteNorm::Step { .. } => 2 * t * site.out_ch,
            SiteNorm::Plain => 2 * site.out_ch,
            SiteNorm::None => 0,
        };
    }
    for site in &norms {
        total += 2 * t * site.channels;
    }
    Ok(total)
}

/// Builds the report for one traced forward pass.
pub fn report_from_trace(
    graph: &NetGraph,
    trace: &Trace,
    model: &EnergyModel,
) -> Result<ProfileReport> {
    let (convs, norms) = graph.sites()?;
    let t = graph.t_steps;
    let norm_params = |name: &str| -> usize {
        convs
            .iter()
            .find(|s| s.name == name)
            .map(|s| match s.norm {
                SiteNorm::Step { .. } => 2 * t * s.out_ch,
                SiteNorm::Plain => 2 * s.out_ch,
                SiteNorm::None => 0,
            })
            .unwrap_or(0)
    };

    let mut layers = Vec::new();
    for site in &trace.conv_sites {
        let shape = LayerShape {
            c_in: site.in_ch,
            c_out: site.out_ch,
            k_h: site.k,
            k_w: site.k,
            h_out: site.h_out,
            w_out: site.w_out,
        };
        let params =
            site.in_ch * site.out_ch * site.k * site.k + site.out_ch + norm_params(&site.name);
        if site.float_input {
            layers.push(LayerCost {
                name: site.name.clone(),
                kind: "conv-float",
                params,
                flops: flops(&shape),
                sops: 0.0,
                mean_rate: None,
            });
        } else {
            let mean = if site.rates.is_empty() {
                0.0
            } else {
                site.rates.iter().sum::<f64>() / site.rates.len() as f64
            };
            layers.push(LayerCost {
                name: site.name.clone(),
                kind: "conv-spike",
                params,
                flops: 0.0,
                sops: sops(&shape, &site.rates),
                mean_rate: Some(mean),
            });
        }
    }
    for site in &trace.denoise_sites {
        layers.push(LayerCost {
            name: site.name.clone(),
            kind: "denoise",
            params: 0,
            flops: 0.0,
            sops: site.adds as f64,
            mean_rate: None,
        });
    }
    for site in &trace.acc_sites {
        layers.push(LayerCost {
            name: format!("{}.acc", site.name),
            kind: "accumulate",
            params: 0,
            flops: 0.0,
            sops: site.adds as f64,
            mean_rate: None,
        });
    }
    for site in &norms {
        layers.push(LayerCost {
            name: site.name.clone(),
            kind: "norm",
            params: 2 * t * site.channels,
            flops: 0.0,
            sops: 0.0,
            mean_rate: None,
        });
    }

    let total_flops: f64 = layers.iter().map(|l| l.flops).sum();
    let total_sops: f64 = layers.iter().map(|l| l.sops).sum();
    let firing = trace
        .if_sites
        .iter()
        .map(|s| FiringEntry {
            name: s.name.clone(),
            rates: s.rates.clone(),
            overall: s.overall,
        })
        .collect();
    Ok(ProfileReport {
        t_steps: graph.t_steps,
        inputs_profiled: 1,
        layers,
        firing,
        total_flops,
        total_sops,
        total_params: count_params(graph)?,
        energy_mj: energy_mj(total_flops, total_sops, model),
        model: *model,
    })
}

/// Runs the network on one image and accounts every accumulation.
pub fn profile(bound: &BoundGraph, image: &FloatTensor) -> Result<ProfileReport> {
    let opts = ForwardOptions::default();
    let (_, trace) = bound.forward(image, &opts)?;
    report_from_trace(bound.graph(), &trace, &EnergyModel::default())
}

/// Binds and profiles in one call.
pub fn profile_with_store(
    graph: &NetGraph,
    store: &WeightStore,
    image: &FloatTensor,
) -> Result<ProfileReport> {
    let bound = BoundGraph::bind(graph, store)?;
    profile(&bound, image)
}

/// Element-wise mean of reports produced by the same network on different
/// inputs. Structure (layer names, params, flops) must agree.
pub fn merge_reports(reports: &[ProfileReport]) -> Result<ProfileReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Shape("no reports to merge".to_string()))?;
    let mut merged = first.clone();
    for other in &reports[1..] {
        if other.layers.len() != first.layers.len()
            || other
                .layers
                .iter()
                .zip(&first.layers)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(Error::Shape(
                "cannot merge reports from different networks".to_string(),
            ));
        }
        for (acc, l) in merged.layers.iter_mut().zip(&other.layers) {
            acc.sops += l.sops;
            acc.flops += l.flops;
            if let (Some(m), Some(o)) = (acc.mean_rate.as_mut(), l.mean_rate) {
                *m += o;
            }
        }
        for (acc, f) in merged.firing.iter_mut().zip(&other.firing) {
            acc.overall += f.overall;
            for (r, v) in acc.rates.iter_mut().zip(&f.rates) {
                *r += v;
            }
        }
    }
    let n = reports.len() as f64;
    for l in &mut merged.layers {
        l.sops /= n;
        l.flops /= n;
        if let Some(m) = l.mean_rate.as_mut() {
            *m /= n;
        }
    }
    for f in &mut merged.firing {
        f.overall /= n;
        for r in &mut f.rates {
            *r /= n;
        }
    }
    merged.inputs_profiled = reports.len();
    merged.total_flops = merged.layers.iter().map(|l| l.flops).sum();
    merged.total_sops = merged.layers.iter().map(|l| l.sops).sum();
    merged.energy_mj = energy_mj(merged.total_flops, merged.total_sops, &merged.model);
    Ok(merged)
}

/// Human-readable table.
pub fn render_text(report: &ProfileReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<11} {:>10} {:>12} {:>12} {:>8}",
        "layer", "kind", "params", "FLOPs", "SOPs", "rate"
    );
    for l in &report.layers {
        let rate = l
            .mean_rate
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "-".to_string());
        let _ = writeln!(
            out,
            "{:<24} {:<11} {:>10} {:>12.0} {:>12.0} {:>8}",
            l.name, l.kind, l.params, l.flops, l.sops, rate
        );
    }
    let _ = writeln!(out, "---");
    let _ = writeln!(
        out,
        "inputs: {}   time steps: {}   params: {}",
        report.inputs_profiled, report.t_steps, report.total_params
    );
    let _ = writeln!(
        out,
        "total: {:.4} GFLOPs + {:.4} GSOPs -> {:.4} mJ",
        report.total_flops * 1e-9,
        report.total_sops * 1e-9,
        report.energy_mj
    );
    for f in &report.firing {
        let steps: Vec<String> = f.rates.iter().map(|r| format!("{r:.3}")).collect();
        let _ = writeln!(
            out,
            "rate {:<24} overall {:.3}  per-step [{}]",
            f.name,
            f.overall,
            steps.join(", ")
        );
    }
    out
}

/// Machine-readable report.
pub fn render_json(report: &ProfileReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Internal(format!("report serialization failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvLayer;
    use crate::neuron::{if_run, NeuronConfig};
    use crate::tensor::Shape;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn flops_of_small_conv() {
        let shape = LayerShape {
            c_in: 1,
            c_out: 2,
            k_h: 3,
            k_w: 3,
            h_out: 2,
            w_out: 2,
        };
        assert_eq!(flops(&shape), 72.0);
    }

    #[test]
    fn flops_unit_kernel_and_linearity() {
        let unit = LayerShape {
            c_in: 5,
            c_out: 7,
            k_h: 1,
            k_w: 1,
            h_out: 1,
            w_out: 1,
        };
        assert_eq!(flops(&unit), 35.0);
        let mut doubled = unit;
        doubled.c_out *= 2;
        assert_eq!(flops(&doubled), 2.0 * flops(&unit));
    }

    #[test]
    fn sops_half_rate_example() {
        let shape = LayerShape {
            c_in: 1,
            c_out: 1,
            k_h: 3,
            k_w: 3,
            h_out: 2,
            w_out: 2,
        };
        assert_eq!(sops(&shape, &[0.5]), 22.0);
    }

    #[test]
    fn sops_zero_rate_is_bias_floor() {
        let shape = LayerShape {
            c_in: 4,
            c_out: 3,
            k_h: 3,
            k_w: 3,
            h_out: 5,
            w_out: 5,
        };
        // One bias add per output element per step.
        assert_eq!(sops(&shape, &[0.0, 0.0]), 2.0 * 75.0);
    }

    #[test]
    fn sops_is_linear_over_steps() {
        let shape = LayerShape {
            c_in: 2,
            c_out: 2,
            k_h: 3,
            k_w: 3,
            h_out: 4,
            w_out: 4,
        };
        let one = sops(&shape, &[0.25]);
        let four = sops(&shape, &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(four, 4.0 * one);
    }

    #[test]
    fn energy_reproduces_published_pairs() {
        // (GFLOPs, GSOPs) -> mJ rows reported for this class of detector.
        let table = [
            (0.16, 2.90, 2.98),
            (0.45, 1.88, 2.73),
            (0.45, 2.28, 3.09),
            (0.45, 5.66, 6.13),
            (0.08, 11.05, 10.13),
            (0.08, 6.20, 5.76),
            (0.11, 16.61, 15.20),
            (0.11, 9.32, 8.64),
        ];
        let model = EnergyModel::default();
        for (gf, gs, mj) in table {
            let got = energy_mj(gf * 1e9, gs * 1e9, &model);
            assert!(
                (got - mj).abs() <= 0.01,
                "({gf}, {gs}): got {got:.4}, want {mj}"
            );
        }
    }

    #[test]
    fn energy_is_monotone() {
        let m = EnergyModel::default();
        assert!(energy_mj(2e9, 1e9, &m) > energy_mj(1e9, 1e9, &m));
        assert!(energy_mj(1e9, 2e9, &m) > energy_mj(1e9, 1e9, &m));
    }

    #[test]
    fn firing_rate_counts() {
        let shape = Shape::new(2, 1, 2, 2).unwrap();
        let zeros = SpikeTensor::zeros(shape);
        assert_eq!(firing_rate(&zeros), 0.0);
        let ones = SpikeTensor::from_vec(shape, vec![1; 8]).unwrap();
        assert_eq!(firing_rate(&ones), 1.0);
        let three = SpikeTensor::from_vec(shape, vec![1, 0, 0, 1, 0, 1, 0, 0]).unwrap();
        assert_eq!(firing_rate(&three), 3.0 / 8.0);
    }

    /// The rate formula evaluated with measured rates equals the
    /// instrumented accumulation count exactly on a three-layer chain of
    /// 1x1 convolutions (plane sizes are powers of two, so every division
    /// is exact in f64).
    #[test]
    fn sops_formula_matches_instrumented_count() {
        let mut rng = StdRng::seed_from_u64(77);
        for t_steps in [1usize, 2, 4] {
            let widths = [2usize, 4, 4, 2];
            let convs: Vec<ConvLayer> = (0..3)
                .map(|i| {
                    let (ci, co) = (widths[i], widths[i + 1]);
                    ConvLayer::new(
                        ci,
                        co,
                        1,
                        1,
                        1,
                        0,
                        (0..ci * co).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        (0..co).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let shape = Shape::new(t_steps, widths[0], 8, 8).unwrap();
            let data: Vec<u8> = (0..shape.len())
                .map(|_| u8::from(rng.random_bool(0.4)))
                .collect();
            let mut x = SpikeTensor::from_vec(shape, data).unwrap();

            let mut formula_total = 0.0;
            let mut measured_total = 0u64;
            for conv in &convs {
                let s = x.shape();
                let per_step = (s.c * s.h * s.w) as f64;
                let rates: Vec<f64> = (0..s.t)
                    .map(|t| {
                        (0..s.c).map(|c| x.plane_count_ones(t, c)).sum::<usize>() as f64
                            / per_step
                    })
                    .collect();
                let mut adds = 0u64;
                let out = conv.forward_spikes_metered(&x, &mut adds).unwrap();
                let os = out.shape();
                formula_total += sops(
                    &LayerShape {
                        c_in: conv.in_ch,
                        c_out: conv.out_ch,
                        k_h: 1,
                        k_w: 1,
                        h_out: os.h,
                        w_out: os.w,
                    },
                    &rates,
                );
                measured_total += adds;
                x = if_run(&out, &NeuronConfig::default()).unwrap();
            }
            assert_eq!(
                formula_total, measured_total as f64,
                "T={t_steps}: formula vs instrumented"
            );
        }
    }
}
