//! Batch normalization variants.
//!
//! [`StepBn`] keeps independent statistics and affine parameters for every
//! (time step, channel) pair and divides by `sqrt(n * (var + eps))`, where
//! `n` is the number of normalized branches summed downstream: each branch
//! then lands near N(0, 1/n) so an n-way residual sum stays near N(0, 1).
//! [`BatchNorm`] is the conventional per-channel kind used ahead of the
//! spike encoder. Both fold into convolution weights for inference;
//! [`StepBn`] produces one weight set per time step.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

/// Per-(time step, channel) batch normalization.
#[derive(Debug, Clone)]
pub struct StepBn {
    pub t_steps: usize,
    pub channels: usize,
    /// All per-group arrays hold `t_steps * channels` entries, indexed
    /// `t * channels + k`.
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub run_mean: Vec<f32>,
    pub run_var: Vec<f32>,
    /// Downstream branch count; the denominator is `sqrt(n * (var + eps))`.
    pub n: u32,
    pub eps: f32,
    pub momentum: f32,
    /// True once running statistics have been populated (by a training
    /// step or by loading stored values).
    pub stats_ready: bool,
}

/// Forward-pass state needed by [`StepBn::backward`].
#[derive(Debug)]
pub struct StepBnCache {
    shape: Shape,
    batch_n: usize,
    inv_std: Vec<f32>,
    /// Normalized pre-affine activations, one tensor-sized vec per sample.
    x_hat: Vec<Vec<f32>>,
}

impl StepBn {
    pub fn new(t_steps: usize, channels: usize, n: u32) -> Result<Self> {
        if t_steps == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "normalization needs t_steps >= 1 and channels >= 1, got ({t_steps}, {channels})"
            )));
        }
        if n == 0 {
            return Err(Error::Config("branch divisor n must be >= 1".to_string()));
        }
        let groups = t_steps * channels;
        Ok(StepBn {
            t_steps,
            channels,
            gamma: vec![1.0; groups],
            beta: vec![0.0; groups],
            run_mean: vec![0.0; groups],
            run_var: vec![1.0; groups],
            n,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            stats_ready: false,
        })
    }

    pub fn groups(&self) -> usize {
        self.t_steps * self.channels
    }

    fn check_shape(&self, shape: Shape) -> Result<()> {
        if shape.t != self.t_steps || shape.c != self.channels {
            return Err(Error::Shape(format!(
                "normalizer is ({}, {}) but input is {}",
                self.t_steps, self.channels, shape
            )));
        }
        Ok(())
    }

    /// Training-mode forward over a batch of same-shaped tensors.
    ///
    /// Group statistics are the biased mean/variance over all batch and
    /// spatial positions of each (t, k); running statistics are updated by
    /// EMA with the configured momentum.
    pub fn forward_train(
        &mut self,
        batch: &[FloatTensor],
    ) -> Result<(Vec<FloatTensor>, StepBnCache)> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Shape("empty batch".to_string()))?;
        let shape = first.shape();
        self.check_shape(shape)?;
        if batch.len() < 2 {
            return Err(Error::Config(format!(
                "training-mode normalization needs a batch of >= 2, got {}",
                batch.len()
            )));
        }
        for x in batch {
            if x.shape() != shape {
                return Err(Error::Shape(format!(
                    "batch shapes disagree: {} vs {}",
                    x.shape(),
                    shape
                )));
            }
        }

        let plane = shape.h * shape.w;
        let m = batch.len() * plane; // elements per group
        let groups = self.groups();
        let mut mean = vec![0f64; groups];
        let mut var = vec![0f64; groups];
        for g in 0..groups {
            let (t, k) = (g / self.channels, g % self.channels);
            let base = shape.index(t, k, 0, 0);
            let mut sum = 0f64;
            for x in batch {
                for v in &x.data()[base..base + plane] {
                    sum += *v as f64;
                }
            }
            let mu = sum / m as f64;
            let mut sq = 0f64;
            for x in batch {
                for v in &x.data()[base..base + plane] {
                    let d = *v as f64 - mu;
                    sq += d * d;
                }
            }
            mean[g] = mu;
            var[g] = sq / m as f64;
        }

        for g in 0..groups {
            self.run_mean[g] =
                (1.0 - self.momentum) * self.run_mean[g] + self.momentum * mean[g] as f32;
            self.run_var[g] =
                (1.0 - self.momentum) * self.run_var[g] + self.momentum * var[g] as f32;
        }
        self.stats_ready = true;

        let inv_std: Vec<f32> = (0..groups)
            .map(|g| 1.0 / (self.n as f64 * (var[g] + self.eps as f64)).sqrt() as f32)
            .collect();

        let mut outputs = Vec::with_capacity(batch.len());
        let mut x_hat = Vec::with_capacity(batch.len());
        for x in batch {
            let mut hat = vec![0f32; shape.len()];
            let mut out = vec![0f32; shape.len()];
            for g in 0..groups {
                let (t, k) = (g / self.channels, g % self.channels);
                let base = shape.index(t, k, 0, 0);
                let mu = mean[g] as f32;
                let is = inv_std[g];
                let (gam, bet) = (self.gamma[g], self.beta[g]);
                for i in base..base + plane {
                    let h = (x.data()[i] - mu) * is;
                    hat[i] = h;
                    out[i] = gam * h + bet;
                }
            }
            outputs.push(FloatTensor::from_vec(shape, out)?);
            x_hat.push(hat);
        }
        let cache = StepBnCache {
            shape,
            batch_n: batch.len(),
            inv_std,
            x_hat,
        };
        Ok((outputs, cache))
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
        if !self.stats_ready {
            return Err(Error::Config(
                "running statistics were never populated".to_string(),
            ));
        }
        let shape = x.shape();
        self.check_shape(shape)?;
        let plane = shape.h * shape.w;
        let mut out = vec![0f32; shape.len()];
        for g in 0..self.groups() {
            let (t, k) = (g / self.channels, g % self.channels);
            let base = shape.index(t, k, 0, 0);
            let inv_std =
                1.0 / (self.n as f64 * (self.run_var[g] as f64 + self.eps as f64)).sqrt() as f32;
            let (mu, gam, bet) = (self.run_mean[g], self.gamma[g], self.beta[g]);
            for i in base..base + plane {
                out[i] = gam * (x.data()[i] - mu) * inv_std + bet;
            }
        }
        FloatTensor::from_vec(shape, out)
    }

    /// Analytic gradients of the training-mode forward with respect to the
    /// inputs and the affine parameters, treating the group statistics as
    /// functions of the batch.
    pub fn backward(
        &self,
        grad_out: &[FloatTensor],
        cache: &StepBnCache,
    ) -> Result<(Vec<FloatTensor>, Vec<f32>, Vec<f32>)> {
        if grad_out.len() != cache.batch_n {
            return Err(Error::Shape(format!(
                "cached batch of {} but {} gradients",
                cache.batch_n,
                grad_out.len()
            )));
        }
        let shape = cache.shape;
        for g in grad_out {
            if g.shape() != shape {
                return Err(Error::Shape(format!(
                    "gradient shape {} vs cached {}",
                    g.shape(),
                    shape
                )));
            }
        }
        let plane = shape.h * shape.w;
        let m = (cache.batch_n * plane) as f64;
        let groups = self.groups();
        let n = self.n as f64;

        let mut grad_gamma = vec![0f32; groups];
        let mut grad_beta = vec![0f32; groups];
        let mut grad_x: Vec<Vec<f32>> = (0..cache.batch_n)
            .map(|_| vec![0f32; shape.len()])
            .collect();

        for g in 0..groups {
            let (t, k) = (g / self.channels, g % self.channels);
            let base = shape.index(t, k, 0, 0);
            let mut sum_go = 0f64;
            let mut sum_go_hat = 0f64;
            for (go, hat) in grad_out.iter().zip(&cache.x_hat) {
                for i in base..base + plane {
                    let go_i = go.data()[i] as f64;
                    sum_go += go_i;
                    sum_go_hat += go_i * hat[i] as f64;
                }
            }
            grad_beta[g] = sum_go as f32;
            grad_gamma[g] = sum_go_hat as f32;

            let mean_go = sum_go / m;
            let mean_go_hat = sum_go_hat / m;
            let scale = self.gamma[g] as f64 * cache.inv_std[g] as f64;
            for (go, (hat, gx)) in grad_out
                .iter()
                .zip(cache.x_hat.iter().zip(grad_x.iter_mut()))
            {
                for i in base..base + plane {
                    let go_i = go.data()[i] as f64;
                    let h = hat[i] as f64;
                    gx[i] = (scale * (go_i - mean_go - n * h * mean_go_hat)) as f32;
                }
            }
        }

        let grad_x = grad_x
            .into_iter()
            .map(|d| FloatTensor::from_vec(shape, d))
            .collect::<Result<Vec<_>>>()?;
        Ok((grad_x, grad_gamma, grad_beta))
    }

    /// Folds this layer into the preceding convolution, producing one
    /// weight/bias set per time step:
    ///
    /// `W'[t,k] = gamma[t,k] * W[k] / sqrt(n * (run_var[t,k] + eps))`
    /// `B'[t,k] = gamma[t,k] * (B[k] - run_mean[t,k]) / sqrt(...) + beta[t,k]`
    ///
    /// `weights` is laid out with the output channel outermost.
    pub fn fuse_into_conv(&self, weights: &[f32], bias: &[f32]) -> Result<FusedConvParams> {
        if !self.stats_ready {
            return Err(Error::Weights(
                "cannot fuse: running statistics were never populated".to_string(),
            ));
        }
        if bias.len() != self.channels || weights.len() % self.channels != 0 {
            return Err(Error::Shape(format!(
                "conv with {} output channels cannot host a {}-channel normalizer",
                bias.len(),
                self.channels
            )));
        }
        let per_out = weights.len() / self.channels;
        let mut per_step = Vec::with_capacity(self.t_steps);
        for t in 0..self.t_steps {
            let mut w = vec![0f32; weights.len()];
            let mut b = vec![0f32; self.channels];
            for k in 0..self.channels {
                let g = t * self.channels + k;
                let inv_std = 1.0
                    / (self.n as f64 * (self.run_var[g] as f64 + self.eps as f64)).sqrt() as f32;
                let scale = self.gamma[g] * inv_std;
                for j in 0..per_out {
                    w[k * per_out + j] = scale * weights[k * per_out + j];
                }
                b[k] = scale * (bias[k] - self.run_mean[g]) + self.beta[g];
            }
            per_step.push((w, b));
        }
        Ok(FusedConvParams { per_step })
    }
}

/// Per-time-step fused convolution parameters produced by folding.
#[derive(Debug, Clone)]
pub struct FusedConvParams {
    /// `(weights, bias)` for each time step, shaped like the source conv.
    pub per_step: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Conventional per-channel batch normalization, shared across time.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub run_mean: Vec<f32>,
    pub run_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub stats_ready: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("channels must be >= 1".to_string()));
        }
        Ok(BatchNorm {
            channels,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            run_mean: vec![0.0; channels],
            run_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            stats_ready: false,
        })
    }

    fn check_channels(&self, shape: Shape) -> Result<()> {
        if shape.c != self.channels {
            return Err(Error::Shape(format!(
                "normalizer has {} channels but input is {}",
                self.channels, shape
            )));
        }
        Ok(())
    }

    /// Training-mode forward; statistics per channel over batch, time and
    /// space together.
    pub fn forward_train(&mut self, batch: &[FloatTensor]) -> Result<Vec<FloatTensor>> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Shape("empty batch".to_string()))?;
        let shape = first.shape();
        self.check_channels(shape)?;
        if batch.len() < 2 {
            return Err(Error::Config(format!(
                "training-mode normalization needs a batch of >= 2, got {}",
                batch.len()
            )));
        }
        for x in batch {
            if x.shape() != shape {
                return Err(Error::Shape("batch shapes disagree".to_string()));
            }
        }
        let plane = shape.h * shape.w;
        let m = (batch.len() * shape.t * plane) as f64;
        let mut out_batch = Vec::with_capacity(batch.len());
        let mut mean = vec![0f64; self.channels];
        let mut var = vec![0f64; self.channels];
        for k in 0..self.channels {
            let mut sum = 0f64;
            for x in batch {
                for t in 0..shape.t {
                    let base = shape.index(t, k, 0, 0);
                    for v in &x.data()[base..base + plane] {
                        sum += *v as f64;
                    }
                }
            }
            let mu = sum / m;
            let mut sq = 0f64;
            for x in batch {
                for t in 0..shape.t {
                    let base = shape.index(t, k, 0, 0);
                    for v in &x.data()[base..base + plane] {
                        let d = *v as f64 - mu;
                        sq += d * d;
                    }
                }
            }
            mean[k] = mu;
            var[k] = sq / m;
            self.run_mean[k] =
                (1.0 - self.momentum) * self.run_mean[k] + self.momentum * mu as f32;
            self.run_var[k] =
                (1.0 - self.momentum) * self.run_var[k] + self.momentum * var[k] as f32;
        }
        self.stats_ready = true;
        for x in batch {
            let mut out = vec![0f32; shape.len()];
            for k in 0..self.channels {
                let inv_std = 1.0 / ((var[k] + self.eps as f64).sqrt() as f32);
                let (mu, gam, bet) = (mean[k] as f32, self.gamma[k], self.beta[k]);
                for t in 0..shape.t {
                    let base = shape.index(t, k, 0, 0);
                    for i in base..base + plane {
                        out[i] = gam * (x.data()[i] - mu) * inv_std + bet;
                    }
                }
            }
            out_batch.push(FloatTensor::from_vec(shape, out)?);
        }
        Ok(out_batch)
    }

    pub fn forward_eval(&self, x: &FloatTensor) -> Result<FloatTensor> {
        if !self.stats_ready {
            return Err(Error::Config(
                "running statistics were never populated".to_string(),
            ));
        }
        let shape = x.shape();
        self.check_channels(shape)?;
        let plane = shape.h * shape.w;
        let mut out = vec![0f32; shape.len()];
        for k in 0..self.channels {
            let inv_std = 1.0 / (self.run_var[k] as f64 + self.eps as f64).sqrt() as f32;
            let (mu, gam, bet) = (self.run_mean[k], self.gamma[k], self.beta[k]);
            for t in 0..shape.t {
                let base = shape.index(t, k, 0, 0);
                for i in base..base + plane {
                    out[i] = gam * (x.data()[i] - mu) * inv_std + bet;
                }
            }
        }
        FloatTensor::from_vec(shape, out)
    }

    /// Folds into the preceding convolution; one shared weight set since
    /// the statistics carry no time index.
    pub fn fuse_into_conv(&self, weights: &[f32], bias: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        if !self.stats_ready {
            return Err(Error::Weights(
                "cannot fuse: running statistics were never populated".to_string(),
            ));
        }
        if bias.len() != self.channels || weights.len() % self.channels != 0 {
            return Err(Error::Shape(format!(
                "conv with {} output channels cannot host a {}-channel normalizer",
                bias.len(),
                self.channels
            )));
        }
        let per_out = weights.len() / self.channels;
        let mut w = vec![0f32; weights.len()];
        let mut b = vec![0f32; self.channels];
        for k in 0..self.channels {
            let inv_std = 1.0 / (self.run_var[k] as f64 + self.eps as f64).sqrt() as f32;
            let scale = self.gamma[k] * inv_std;
            for j in 0..per_out {
                w[k * per_out + j] = scale * weights[k * per_out + j];
            }
            b[k] = scale * (bias[k] - self.run_mean[k]) + self.beta[k];
        }
        Ok((w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_batch(rng: &mut StdRng, n: usize, shape: Shape) -> Vec<FloatTensor> {
        (0..n)
            .map(|_| {
                let data: Vec<f32> = (0..shape.len())
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect();
                FloatTensor::from_vec(shape, data).unwrap()
            })
            .collect()
    }

    /// Mean and biased variance of one (t, k) group across a batch.
    fn group_moments(batch: &[FloatTensor], t: usize, k: usize) -> (f64, f64) {
        let shape = batch[0].shape();
        let plane = shape.h * shape.w;
        let base = shape.index(t, k, 0, 0);
        let m = (batch.len() * plane) as f64;
        let mut sum = 0f64;
        for x in batch {
            for v in &x.data()[base..base + plane] {
                sum += *v as f64;
            }
        }
        let mu = sum / m;
        let mut sq = 0f64;
        for x in batch {
            for v in &x.data()[base..base + plane] {
                sq += (*v as f64 - mu).powi(2);
            }
        }
        (mu, sq / m)
    }

    #[test]
    fn constant_batch_normalizes_to_zero() {
        let shape = Shape::new(2, 3, 4, 4).unwrap();
        let batch: Vec<_> = (0..3)
            .map(|_| FloatTensor::from_vec(shape, vec![7.5; shape.len()]).unwrap())
            .collect();
        let mut bn = StepBn::new(2, 3, 1).unwrap();
        let (out, _) = bn.forward_train(&batch).unwrap();
        for o in &out {
            for v in o.data() {
                assert!(v.abs() < 1e-4, "{v}");
            }
        }
    }

    #[test]
    fn branch_divisor_shrinks_variance_to_one_over_n() {
        let mut rng = StdRng::seed_from_u64(11);
        let shape = Shape::new(2, 2, 8, 8).unwrap();
        let batch = random_batch(&mut rng, 8, shape);
        let mut bn = StepBn::new(2, 2, 4).unwrap();
        let (out, _) = bn.forward_train(&batch).unwrap();
        for t in 0..2 {
            for k in 0..2 {
                let (_, var) = group_moments(&out, t, k);
                assert!((var - 0.25).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn train_mode_output_is_standardized_per_group() {
        let mut rng = StdRng::seed_from_u64(5);
        let shape = Shape::new(3, 4, 6, 6).unwrap();
        let batch = random_batch(&mut rng, 6, shape);
        let mut bn = StepBn::new(3, 4, 1).unwrap();
        let (out, _) = bn.forward_train(&batch).unwrap();
        for t in 0..3 {
            for k in 0..4 {
                let (mean, var) = group_moments(&out, t, k);
                assert!(mean.abs() <= 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() <= 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn matches_per_group_oracle_at_n1() {
        // Independent recomputation of the normalization, group by group.
        let mut rng = StdRng::seed_from_u64(21);
        let shape = Shape::new(2, 3, 5, 5).unwrap();
        let batch = random_batch(&mut rng, 4, shape);
        let mut bn = StepBn::new(2, 3, 1).unwrap();
        let (out, _) = bn.forward_train(&batch).unwrap();
        let plane = shape.h * shape.w;
        for t in 0..2 {
            for k in 0..3 {
                let (mu, var) = group_moments(&batch, t, k);
                let base = shape.index(t, k, 0, 0);
                for (x, o) in batch.iter().zip(&out) {
                    for i in base..base + plane {
                        let want = (x.data()[i] as f64 - mu) / (var + 1e-5).sqrt();
                        assert!(
                            (o.data()[i] as f64 - want).abs() < 1e-4,
                            "group ({t},{k})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn variance_scales_inversely_with_n() {
        let mut rng = StdRng::seed_from_u64(31);
        let shape = Shape::new(2, 2, 8, 8).unwrap();
        let batch = random_batch(&mut rng, 6, shape);
        let mut bn1 = StepBn::new(2, 2, 1).unwrap();
        let mut bn3 = StepBn::new(2, 2, 3).unwrap();
        let (out1, _) = bn1.forward_train(&batch).unwrap();
        let (out3, _) = bn3.forward_train(&batch).unwrap();
        for t in 0..2 {
            for k in 0..2 {
                let (_, v1) = group_moments(&out1, t, k);
                let (_, v3) = group_moments(&out3, t, k);
                assert!((v3 * 3.0 - v1).abs() / v1 < 1e-4);
            }
        }
    }

    #[test]
    fn eval_centers_on_running_mean() {
        let mut bn = StepBn::new(1, 2, 1).unwrap();
        bn.run_mean = vec![0.4, -1.2];
        bn.run_var = vec![0.9, 2.0];
        bn.stats_ready = true;
        let shape = Shape::new(1, 2, 2, 2).unwrap();
        let mut data = vec![0f32; shape.len()];
        for k in 0..2 {
            let base = shape.index(0, k, 0, 0);
            for v in &mut data[base..base + 4] {
                *v = bn.run_mean[k];
            }
        }
        let out = bn
            .forward_eval(&FloatTensor::from_vec(shape, data).unwrap())
            .unwrap();
        for v in out.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = StepBn::new(1, 1, 1).unwrap();
        bn.gamma = vec![0.0];
        bn.beta = vec![3.25];
        bn.run_mean = vec![0.7];
        bn.run_var = vec![1.3];
        bn.stats_ready = true;
        let shape = Shape::new(1, 1, 3, 3).unwrap();
        let x = FloatTensor::from_vec(shape, (0..9).map(|i| i as f32).collect()).unwrap();
        let out = bn.forward_eval(&x).unwrap();
        for v in out.data() {
            assert_eq!(*v, 3.25);
        }
    }

    #[test]
    fn eval_never_works_before_stats_exist() {
        let bn = StepBn::new(1, 1, 1).unwrap();
        let x = FloatTensor::zeros(Shape::new(1, 1, 2, 2).unwrap());
        assert!(matches!(bn.forward_eval(&x), Err(Error::Config(_))));
    }

    #[test]
    fn train_and_eval_agree_when_moments_match() {
        // Build a batch whose group moments equal the stored running
        // statistics; the two paths then compute the same formula.
        let mut bn = StepBn::new(1, 1, 2).unwrap();
        bn.run_mean = vec![1.0];
        bn.run_var = vec![1.0];
        bn.stats_ready = true;
        let shape = Shape::new(1, 1, 1, 2).unwrap();
        // Two samples {0, 2} per position: mean 1, biased variance 1.
        let a = FloatTensor::from_vec(shape, vec![0.0, 2.0]).unwrap();
        let b = FloatTensor::from_vec(shape, vec![2.0, 0.0]).unwrap();
        let eval_a = bn.forward_eval(&a).unwrap();
        let (train_out, _) = bn.forward_train(&[a, b]).unwrap();
        for (u, v) in eval_a.data().iter().zip(train_out[0].data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let shape = Shape::new(1, 1, 2, 2).unwrap();
        let mut bn = StepBn::new(1, 1, 1).unwrap();
        let err = bn
            .forward_train(&[FloatTensor::zeros(shape)])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn permuting_time_steps_permutes_outputs() {
        let mut rng = StdRng::seed_from_u64(77);
        let shape = Shape::new(3, 2, 4, 4).unwrap();
        let batch = random_batch(&mut rng, 4, shape);
        let mut bn = StepBn::new(3, 2, 1).unwrap();
        bn.gamma = (0..6).map(|i| 0.5 + i as f32 * 0.1).collect();
        bn.beta = (0..6).map(|i| i as f32 * 0.01).collect();
        let (out, _) = bn.forward_train(&batch.clone()).unwrap();

        // Swap time steps 0 and 2 in both the inputs and the parameters.
        let perm = [2usize, 1, 0];
        let permuted: Vec<FloatTensor> = batch
            .iter()
            .map(|x| {
                let slices: Vec<_> = perm.iter().map(|&t| x.time_slice(t)).collect();
                FloatTensor::stack_time(&slices).unwrap()
            })
            .collect();
        let mut bn_p = StepBn::new(3, 2, 1).unwrap();
        for (tp, &ts) in perm.iter().enumerate() {
            for k in 0..2 {
                bn_p.gamma[tp * 2 + k] = bn.gamma[ts * 2 + k];
                bn_p.beta[tp * 2 + k] = bn.beta[ts * 2 + k];
            }
        }
        let (out_p, _) = bn_p.forward_train(&permuted).unwrap();
        for (o, op) in out.iter().zip(&out_p) {
            for (tp, &ts) in perm.iter().enumerate() {
                assert_eq!(o.time_slice(ts).data(), op.time_slice(tp).data());
            }
        }
    }

    #[test]
    fn ema_converges_to_stream_moments() {
        let mut rng = StdRng::seed_from_u64(4242);
        let shape = Shape::new(1, 1, 16, 16).unwrap();
        let mut bn = StepBn::new(1, 1, 1).unwrap();
        // Stream with true mean 0.5, variance 1.0.
        for _ in 0..500 {
            let batch: Vec<_> = (0..8)
                .map(|_| {
                    let data: Vec<f32> = (0..shape.len())
                        .map(|_| {
                            // Sum of 12 uniforms minus 6 approximates N(0,1).
                            let z: f32 =
                                (0..12).map(|_| rng.random_range(0.0..1.0f32)).sum::<f32>() - 6.0;
                            0.5 + z
                        })
                        .collect();
                    FloatTensor::from_vec(shape, data).unwrap()
                })
                .collect();
            bn.forward_train(&batch).unwrap();
        }
        assert!((bn.run_mean[0] - 0.5).abs() < 1e-2, "{}", bn.run_mean[0]);
        assert!((bn.run_var[0] - 1.0).abs() < 1e-2, "{}", bn.run_var[0]);
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = StdRng::seed_from_u64(3);
        let shape = Shape::new(2, 2, 3, 3).unwrap();
        let batch = random_batch(&mut rng, 3, shape);
        let mut bn = StepBn::new(2, 2, 2).unwrap();
        let (_, cache) = bn.forward_train(&batch).unwrap();
        let zeros: Vec<_> = (0..3).map(|_| FloatTensor::zeros(shape)).collect();
        let (gx, gg, gb) = bn.backward(&zeros, &cache).unwrap();
        assert!(gx.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        assert!(gg.iter().all(|v| *v == 0.0));
        assert!(gb.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_beta_is_group_sum_of_upstream() {
        let mut rng = StdRng::seed_from_u64(9);
        let shape = Shape::new(2, 2, 3, 3).unwrap();
        let batch = random_batch(&mut rng, 3, shape);
        let mut bn = StepBn::new(2, 2, 1).unwrap();
        let (_, cache) = bn.forward_train(&batch).unwrap();
        let grads = random_batch(&mut rng, 3, shape);
        let (_, _, gb) = bn.backward(&grads, &cache).unwrap();
        let plane = shape.h * shape.w;
        for t in 0..2 {
            for k in 0..2 {
                let base = shape.index(t, k, 0, 0);
                let want: f64 = grads
                    .iter()
                    .flat_map(|g| g.data()[base..base + plane].iter())
                    .map(|v| *v as f64)
                    .sum();
                assert!((gb[t * 2 + k] as f64 - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn plain_bn_equals_step_bn_at_t1_n1() {
        let mut rng = StdRng::seed_from_u64(13);
        let shape = Shape::new(1, 3, 4, 4).unwrap();
        let batch = random_batch(&mut rng, 4, shape);
        let mut plain = BatchNorm::new(3).unwrap();
        let mut step = StepBn::new(1, 3, 1).unwrap();
        let out_plain = plain.forward_train(&batch.clone()).unwrap();
        let (out_step, _) = step.forward_train(&batch).unwrap();
        for (a, b) in out_plain.iter().zip(&out_step) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-5);
            }
        }
        assert!(plain
            .run_mean
            .iter()
            .zip(&step.run_mean)
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn plain_bn_standardizes() {
        let mut rng = StdRng::seed_from_u64(17);
        let shape = Shape::new(2, 2, 6, 6).unwrap();
        let batch = random_batch(&mut rng, 5, shape);
        let mut bn = BatchNorm::new(2).unwrap();
        let out = bn.forward_train(&batch).unwrap();
        let plane = shape.h * shape.w;
        for k in 0..2 {
            let m = (out.len() * shape.t * plane) as f64;
            let mut sum = 0f64;
            let mut sq = 0f64;
            for o in &out {
                for t in 0..shape.t {
                    let base = shape.index(t, k, 0, 0);
                    for v in &o.data()[base..base + plane] {
                        sum += *v as f64;
                    }
                }
            }
            let mu = sum / m;
            for o in &out {
                for t in 0..shape.t {
                    let base = shape.index(t, k, 0, 0);
                    for v in &o.data()[base..base + plane] {
                        sq += (*v as f64 - mu).powi(2);
                    }
                }
            }
            assert!(mu.abs() < 1e-5);
            assert!((sq / m - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn fuse_near_identity_stats_rescales_by_inv_sqrt_eps() {
        let mut bn = StepBn::new(2, 2, 1).unwrap();
        bn.run_mean = vec![0.0; 4];
        bn.run_var = vec![1.0; 4];
        bn.stats_ready = true;
        let weights = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2 out-ch * 3
        let bias = vec![0.5, -0.5];
        let fused = bn.fuse_into_conv(&weights, &bias).unwrap();
        assert_eq!(fused.per_step.len(), 2);
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt() as f32;
        for (w, b) in &fused.per_step {
            for (wf, w0) in w.iter().zip(&weights) {
                assert!((wf - w0 * scale).abs() < 1e-6);
            }
            for (bf, b0) in b.iter().zip(&bias) {
                assert!((bf - b0 * scale).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_zero_gamma_zeroes_weights_and_leaves_beta() {
        let mut bn = StepBn::new(1, 2, 3).unwrap();
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.25, -4.0];
        bn.run_mean = vec![1.0, 2.0];
        bn.run_var = vec![0.5, 0.7];
        bn.stats_ready = true;
        let fused = bn
            .fuse_into_conv(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0])
            .unwrap();
        let (w, b) = &fused.per_step[0];
        assert_eq!(w.as_slice(), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.as_slice(), &[0.25, -4.0]);
    }

    #[test]
    fn fuse_requires_stats() {
        let bn = StepBn::new(1, 1, 1).unwrap();
        assert!(matches!(
            bn.fuse_into_conv(&[1.0], &[0.0]),
            Err(Error::Weights(_))
        ));
    }

    #[test]
    fn plain_bn_folds_into_conv_without_changing_outputs() {
        use crate::conv::ConvLayer;
        let mut rng = StdRng::seed_from_u64(97);
        for _ in 0..10 {
            let (in_ch, out_ch, k) = (2usize, 3usize, 3usize);
            let conv = ConvLayer::new(
                in_ch,
                out_ch,
                k,
                k,
                1,
                1,
                (0..out_ch * in_ch * k * k)
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect(),
                (0..out_ch).map(|_| rng.random_range(-0.3..0.3)).collect(),
            )
            .unwrap();
            let mut bn = BatchNorm::new(out_ch).unwrap();
            for c in 0..out_ch {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(-0.5..0.5);
                bn.run_mean[c] = rng.random_range(-0.5..0.5);
                bn.run_var[c] = rng.random_range(0.2..2.0);
            }
            bn.stats_ready = true;

            let shape = Shape::new(1, in_ch, 6, 6).unwrap();
            let x = FloatTensor::from_vec(
                shape,
                (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let unfused = bn.forward_eval(&conv.forward_floats(&x).unwrap()).unwrap();

            let (wf, bf) = bn.fuse_into_conv(&conv.weights, &conv.bias).unwrap();
            let folded = ConvLayer::new(in_ch, out_ch, k, k, 1, 1, wf, bf).unwrap();
            let fused = folded.forward_floats(&x).unwrap();

            let scale = unfused
                .data()
                .iter()
                .chain(fused.data())
                .fold(0f32, |m, v| m.max(v.abs()))
                .max(1e-6);
            for (a, b) in unfused.data().iter().zip(fused.data()) {
                assert!((a - b).abs() / scale <= 1e-4, "{a} vs {b}");
            }
        }
    }
}
