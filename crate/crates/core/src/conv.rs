//! 2-D convolution over spike and float tensors.
//!
//! Spike input makes multiplication degenerate to conditional accumulation:
//! for every output position the active taps are gathered once and each
//! output channel sums exactly those weights plus its bias. Accumulation
//! runs in f64 and both paths add taps in the same `(c_in, ky, kx)` order,
//! so the event-driven route and the dense float route agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape, SpikeTensor};

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// Row-major `(out_ch, in_ch, k_h, k_w)`.
    pub weights: Vec<f32>,
    /// One bias per output channel.
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || k_h == 0 || k_w == 0 || stride == 0 {
            return Err(Error::Config(
                "conv extents and stride must be >= 1".to_string(),
            ));
        }
        if weights.len() != out_ch * in_ch * k_h * k_w {
            return Err(Error::Shape(format!(
                "conv weights: expected {} values, got {}",
                out_ch * in_ch * k_h * k_w,
                weights.len()
            )));
        }
        if bias.len() != out_ch {
            return Err(Error::Shape(format!(
                "conv bias: expected {} values, got {}",
                out_ch,
                bias.len()
            )));
        }
        Ok(ConvLayer {
            in_ch,
            out_ch,
            k_h,
            k_w,
            stride,
            padding,
            weights,
            bias,
        })
    }

    /// Zero-weight layer of the given geometry.
    pub fn zeroed(
        in_ch: usize,
        out_ch: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weights = vec![0.0; out_ch * in_ch * k_h * k_w];
        let bias = vec![0.0; out_ch];
        ConvLayer::new(in_ch, out_ch, k_h, k_w, stride, padding, weights, bias)
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    /// Output spatial extents: `floor((in + 2*pad - k)/stride) + 1`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = out_extent(h, self.k_h, self.stride, self.padding)?;
        let ow = out_extent(w, self.k_w, self.stride, self.padding)?;
        Ok((oh, ow))
    }

    fn check_in_channels(&self, shape: Shape) -> Result<()> {
        if shape.c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_ch, shape
            )));
        }
        Ok(())
    }

    /// Event-driven convolution over every time slice of a spike tensor,
    /// counting one accumulation per summed weight and per bias add.
    pub fn forward_spikes_metered(
        &self,
        x: &SpikeTensor,
        adds: &mut u64,
    ) -> Result<FloatTensor> {
        let shape = x.shape();
        self.check_in_channels(shape)?;
        let (oh, ow) = self.out_hw(shape.h, shape.w)?;
        let out_shape = Shape::new(shape.t, self.out_ch, oh, ow)?;
        let mut out = vec![0f32; out_shape.len()];
        let taps = self.in_ch * self.k_h * self.k_w;
        let mut active: Vec<usize> = Vec::with_capacity(taps);
        for t in 0..shape.t {
            for oy in 0..oh {
                for ox in 0..ow {
                    active.clear();
                    for ci in 0..self.in_ch {
                        for ky in 0..self.k_h {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= shape.h as isize {
                                continue;
                            }
                            for kx in 0..self.k_w {
                                let ix =
                                    (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= shape.w as isize {
                                    continue;
                                }
                                if x.get(t, ci, iy as usize, ix as usize) != 0 {
                                    active.push((ci * self.k_h + ky) * self.k_w + kx);
                                }
                            }
                        }
                    }
                    *adds += (active.len() as u64 + 1) * self.out_ch as u64;
                    for oc in 0..self.out_ch {
                        let w_base = oc * taps;
                        let mut acc = self.bias[oc] as f64;
                        for &off in &active {
                            acc += self.weights[w_base + off] as f64;
                        }
                        out[out_shape.index(t, oc, oy, ox)] = acc as f32;
                    }
                }
            }
        }
        FloatTensor::from_vec(out_shape, out)
    }

    pub fn forward_spikes(&self, x: &SpikeTensor) -> Result<FloatTensor> {
        let mut adds = 0u64;
        self.forward_spikes_metered(x, &mut adds)
    }

    /// Dense convolution over every time slice of a float tensor.
    pub fn forward_floats(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let shape = x.shape();
        self.check_in_channels(shape)?;
        let (oh, ow) = self.out_hw(shape.h, shape.w)?;
        let out_shape = Shape::new(shape.t, self.out_ch, oh, ow)?;
        let mut out = vec![0f32; out_shape.len()];
        let taps = self.in_ch * self.k_h * self.k_w;
        for t in 0..shape.t {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..self.out_ch {
                        let w_base = oc * taps;
                        let mut acc = self.bias[oc] as f64;
                        for ci in 0..self.in_ch {
                            for ky in 0..self.k_h {
                                let iy =
                                    (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= shape.h as isize {
                                    continue;
                                }
                                for kx in 0..self.k_w {
                                    let ix = (ox * self.stride + kx) as isize
                                        - self.padding as isize;
                                    if ix < 0 || ix >= shape.w as isize {
                                        continue;
                                    }
                                    let w = self.weights
                                        [w_base + (ci * self.k_h + ky) * self.k_w + kx];
                                    acc += w as f64
                                        * x.get(t, ci, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        out[out_shape.index(t, oc, oy, ox)] = acc as f32;
                    }
                }
            }
        }
        FloatTensor::from_vec(out_shape, out)
    }

    /// Gradients of `sum-style` losses through the dense float path:
    /// given dL/d(out) returns (dL/dx, dL/dW, dL/dB).
    pub fn backward_floats(
        &self,
        x: &FloatTensor,
        grad_out: &FloatTensor,
    ) -> Result<(FloatTensor, Vec<f32>, Vec<f32>)> {
        let shape = x.shape();
        self.check_in_channels(shape)?;
        let (oh, ow) = self.out_hw(shape.h, shape.w)?;
        let go_shape = grad_out.shape();
        if go_shape.t != shape.t || go_shape.c != self.out_ch || go_shape.h != oh || go_shape.w != ow
        {
            return Err(Error::Shape(format!(
                "upstream gradient {} does not match conv output ({}, {}, {}, {})",
                go_shape, shape.t, self.out_ch, oh, ow
            )));
        }
        let taps = self.in_ch * self.k_h * self.k_w;
        let mut gx = vec![0f64; shape.len()];
        let mut gw = vec![0f64; self.weights.len()];
        let mut gb = vec![0f64; self.out_ch];
        for t in 0..shape.t {
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..self.out_ch {
                        let go = grad_out.get(t, oc, oy, ox) as f64;
                        gb[oc] += go;
                        let w_base = oc * taps;
                        for ci in 0..self.in_ch {
                            for ky in 0..self.k_h {
                                let iy =
                                    (oy * self.stride + ky) as isize - self.padding as isize;
                                if iy < 0 || iy >= shape.h as isize {
                                    continue;
                                }
                                for kx in 0..self.k_w {
                                    let ix = (ox * self.stride + kx) as isize
                                        - self.padding as isize;
                                    if ix < 0 || ix >= shape.w as isize {
                                        continue;
                                    }
                                    let w_off = w_base + (ci * self.k_h + ky) * self.k_w + kx;
                                    let x_off =
                                        shape.index(t, ci, iy as usize, ix as usize);
                                    gw[w_off] += go * x.data()[x_off] as f64;
                                    gx[x_off] += go * self.weights[w_off] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        let gx = FloatTensor::from_vec(shape, gx.iter().map(|&v| v as f32).collect())?;
        Ok((
            gx,
            gw.iter().map(|&v| v as f32).collect(),
            gb.iter().map(|&v| v as f32).collect(),
        ))
    }
}

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {k} does not fit input extent {input} with padding {padding}"
        )));
    }
    Ok((padded - k) / stride + 1)
}
