//! Structural tensor ops used by graph execution: pooling, upsampling,
//! concatenation, channel splitting and elementwise addition. None of
//! these touch an accumulator, so the profiler bills them at zero.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape, SpikeTensor};

fn pool_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "pooling window {k} does not fit extent {input} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Max-pool over membrane values. Padding cells are skipped rather than
/// materialized, which behaves like negative-infinity padding.
pub fn max_pool_float(
    x: &FloatTensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<FloatTensor> {
    let shape = x.shape();
    let oh = pool_extent(shape.h, k, stride, pad)?;
    let ow = pool_extent(shape.w, k, stride, pad)?;
    let out_shape = Shape::new(shape.t, shape.c, oh, ow)?;
    let mut out = vec![0f32; out_shape.len()];
    for t in 0..shape.t {
        for c in 0..shape.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut seen = false;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= shape.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= shape.w as isize {
                                continue;
                            }
                            best = best.max(x.get(t, c, iy as usize, ix as usize));
                            seen = true;
                        }
                    }
                    if !seen {
                        return Err(Error::Shape(
                            "pooling window fell entirely into padding".to_string(),
                        ));
                    }
                    out[out_shape.index(t, c, oy, ox)] = best;
                }
            }
        }
    }
    FloatTensor::from_vec(out_shape, out)
}

/// Max-pool on binary maps; the max of 0/1 values stays binary.
pub fn max_pool_spike(
    x: &SpikeTensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<SpikeTensor> {
    let shape = x.shape();
    let oh = pool_extent(shape.h, k, stride, pad)?;
    let ow = pool_extent(shape.w, k, stride, pad)?;
    let out_shape = Shape::new(shape.t, shape.c, oh, ow)?;
    let mut out = vec![0u8; out_shape.len()];
    for t in 0..shape.t {
        for c in 0..shape.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 0u8;
                    'window: for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= shape.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= shape.w as isize {
                                continue;
                            }
                            if x.get(t, c, iy as usize, ix as usize) != 0 {
                                best = 1;
                                break 'window;
                            }
                        }
                    }
                    out[out_shape.index(t, c, oy, ox)] = best;
                }
            }
        }
    }
    Ok(SpikeTensor::from_vec_unchecked(out_shape, out))
}

/// Nearest-neighbor upsampling; each pixel becomes a `factor x factor`
/// block, so binary inputs stay binary.
pub fn upsample_nearest(x: &SpikeTensor, factor: usize) -> Result<SpikeTensor> {
    let shape = x.shape();
    let out_shape = Shape::new(shape.t, shape.c, shape.h * factor, shape.w * factor)?;
    let mut out = vec![0u8; out_shape.len()];
    for t in 0..shape.t {
        for c in 0..shape.c {
            for y in 0..out_shape.h {
                for xx in 0..out_shape.w {
                    out[out_shape.index(t, c, y, xx)] = x.get(t, c, y / factor, xx / factor);
                }
            }
        }
    }
    Ok(SpikeTensor::from_vec_unchecked(out_shape, out))
}

fn concat_check(shapes: &[Shape]) -> Result<(Shape, usize)> {
    let first = shapes[0];
    let mut channels = 0;
    for s in shapes {
        if (s.t, s.h, s.w) != (first.t, first.h, first.w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {} with {}",
                s, first
            )));
        }
        channels += s.c;
    }
    Ok((first, channels))
}

pub fn concat_spikes(parts: &[&SpikeTensor]) -> Result<SpikeTensor> {
    let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
    let (first, channels) = concat_check(&shapes)?;
    let out_shape = Shape::new(first.t, channels, first.h, first.w)?;
    let plane = first.h * first.w;
    let mut out = vec![0u8; out_shape.len()];
    for t in 0..first.t {
        let mut c_off = 0;
        for part in parts {
            let pc = part.shape().c;
            let src = part.shape().index(t, 0, 0, 0);
            let dst = out_shape.index(t, c_off, 0, 0);
            out[dst..dst + pc * plane].copy_from_slice(&part.data()[src..src + pc * plane]);
            c_off += pc;
        }
    }
    Ok(SpikeTensor::from_vec_unchecked(out_shape, out))
}

pub fn concat_floats(parts: &[&FloatTensor]) -> Result<FloatTensor> {
    let shapes: Vec<Shape> = parts.iter().map(|p| p.shape()).collect();
    let (first, channels) = concat_check(&shapes)?;
    let out_shape = Shape::new(first.t, channels, first.h, first.w)?;
    let plane = first.h * first.w;
    let mut out = vec![0f32; out_shape.len()];
    for t in 0..first.t {
        let mut c_off = 0;
        for part in parts {
            let pc = part.shape().c;
            let src = part.shape().index(t, 0, 0, 0);
            let dst = out_shape.index(t, c_off, 0, 0);
            out[dst..dst + pc * plane].copy_from_slice(&part.data()[src..src + pc * plane]);
            c_off += pc;
        }
    }
    Ok(FloatTensor::from_vec_unchecked(out_shape, out))
}

/// Splits along channels at `at`, returning the first `at` channels and
/// the rest.
pub fn split_channels(x: &FloatTensor, at: usize) -> Result<(FloatTensor, FloatTensor)> {
    let shape = x.shape();
    if at == 0 || at >= shape.c {
        return Err(Error::Shape(format!(
            "cannot split {} channels at {at}",
            shape.c
        )));
    }
    let plane = shape.h * shape.w;
    let a_shape = Shape::new(shape.t, at, shape.h, shape.w)?;
    let b_shape = Shape::new(shape.t, shape.c - at, shape.h, shape.w)?;
    let mut a = vec![0f32; a_shape.len()];
    let mut b = vec![0f32; b_shape.len()];
    for t in 0..shape.t {
        let src_a = shape.index(t, 0, 0, 0);
        a[a_shape.index(t, 0, 0, 0)..a_shape.index(t, 0, 0, 0) + at * plane]
            .copy_from_slice(&x.data()[src_a..src_a + at * plane]);
        let src_b = shape.index(t, at, 0, 0);
        b[b_shape.index(t, 0, 0, 0)..b_shape.index(t, 0, 0, 0) + (shape.c - at) * plane]
            .copy_from_slice(&x.data()[src_b..src_b + (shape.c - at) * plane]);
    }
    Ok((
        FloatTensor::from_vec_unchecked(a_shape, a),
        FloatTensor::from_vec_unchecked(b_shape, b),
    ))
}

/// Elementwise sum of same-shaped membrane tensors.
pub fn add_floats(parts: &[&FloatTensor]) -> Result<FloatTensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to add".to_string()))?;
    let shape = first.shape();
    let mut out = first.data().to_vec();
    for part in &parts[1..] {
        if part.shape() != shape {
            return Err(Error::Shape(format!(
                "cannot add {} to {}",
                part.shape(),
                shape
            )));
        }
        for (o, v) in out.iter_mut().zip(part.data()) {
            *o += v;
        }
    }
    FloatTensor::from_vec(shape, out)
}

/// Repeats a `t = 1` tensor T times along the time dimension.
pub fn replicate_time(x: &FloatTensor, t_steps: usize) -> Result<FloatTensor> {
    let shape = x.shape();
    if shape.t != 1 {
        return Err(Error::Shape(format!(
            "can only replicate a single time slice, got {shape}"
        )));
    }
    let out_shape = shape.with_t(t_steps)?;
    let mut out = Vec::with_capacity(out_shape.len());
    for _ in 0..t_steps {
        out.extend_from_slice(x.data());
    }
    Ok(FloatTensor::from_vec_unchecked(out_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::{if_run, NeuronConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn float_pool_takes_window_max() {
        let shape = Shape::new(1, 1, 2, 4).unwrap();
        let x =
            FloatTensor::from_vec(shape, vec![1.0, 2.0, 0.5, 0.1, -3.0, 0.0, 4.0, 0.2]).unwrap();
        let out = max_pool_float(&x, 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn spike_pool_stays_binary_and_matches_or() {
        let shape = Shape::new(1, 1, 4, 4).unwrap();
        let data = vec![0, 1, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0];
        let x = SpikeTensor::from_vec(shape, data).unwrap();
        let out = max_pool_spike(&x, 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[1, 0, 1, 0]);
    }

    #[test]
    fn pooling_a_constant_plane_is_identity() {
        // Same-padded stride-1 pooling of a constant map returns the map;
        // chained pools in the pyramid therefore cost nothing on flat
        // regions.
        let shape = Shape::new(2, 1, 5, 5).unwrap();
        let x = FloatTensor::from_vec(shape, vec![0.75; shape.len()]).unwrap();
        let pooled = max_pool_float(&x, 5, 1, 2).unwrap();
        assert_eq!(pooled.data(), x.data());
        let again = max_pool_float(&pooled, 5, 1, 2).unwrap();
        assert_eq!(again.data(), x.data());
    }

    #[test]
    fn upsample_repeats_blocks() {
        let shape = Shape::new(1, 1, 1, 2).unwrap();
        let x = SpikeTensor::from_vec(shape, vec![1, 0]).unwrap();
        let out = upsample_nearest(&x, 2).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 4).unwrap());
        assert_eq!(out.data(), &[1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn concat_then_split_roundtrips() {
        let sa = Shape::new(2, 1, 2, 2).unwrap();
        let sb = Shape::new(2, 2, 2, 2).unwrap();
        let a = FloatTensor::from_vec(sa, (0..8).map(|i| i as f32).collect()).unwrap();
        let b = FloatTensor::from_vec(sb, (100..116).map(|i| i as f32).collect()).unwrap();
        let cat = concat_floats(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().c, 3);
        let (a2, b2) = split_channels(&cat, 1).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn add_requires_matching_shapes() {
        let a = FloatTensor::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let b = FloatTensor::zeros(Shape::new(1, 1, 2, 3).unwrap());
        assert!(add_floats(&[&a, &b]).is_err());
    }

    #[test]
    fn fire_then_pool_commutes_at_t1() {
        // With a fresh membrane, firing is an elementwise threshold; max
        // commutes with any monotone map, so the two orders agree.
        let mut rng = StdRng::seed_from_u64(1234);
        let cfg = NeuronConfig::default();
        for _ in 0..100 {
            let shape = Shape::new(1, 2, 6, 6).unwrap();
            let data: Vec<f32> = (0..shape.len())
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            let v = FloatTensor::from_vec(shape, data).unwrap();
            let pool_then_fire =
                if_run(&max_pool_float(&v, 2, 2, 0).unwrap(), &cfg).unwrap();
            let fire_then_pool =
                max_pool_spike(&if_run(&v, &cfg).unwrap(), 2, 2, 0).unwrap();
            assert_eq!(pool_then_fire.data(), fire_then_pool.data());
        }
    }

    #[test]
    fn fire_then_pool_differs_at_t2() {
        // Membrane carryover breaks the commutation: two neurons charging
        // 0.9 in alternating steps never fire individually, but the pooled
        // membrane stream charges 0.9 twice and fires at the second step.
        let shape = Shape::new(2, 1, 2, 2).unwrap();
        let v = FloatTensor::from_vec(
            shape,
            vec![0.9, 0.0, 0.0, 0.0, 0.0, 0.9, 0.0, 0.0],
        )
        .unwrap();
        let cfg = NeuronConfig::default();
        let pool_then_fire = if_run(&max_pool_float(&v, 2, 2, 0).unwrap(), &cfg).unwrap();
        let fire_then_pool = max_pool_spike(&if_run(&v, &cfg).unwrap(), 2, 2, 0).unwrap();
        assert_eq!(fire_then_pool.data(), &[0, 0]);
        assert_eq!(pool_then_fire.data(), &[0, 1]);
        assert_ne!(pool_then_fire.data(), fire_then_pool.data());
    }
}
