//! Integer-only denoising of binary feature maps.
//!
//! Each `(t, c)` plane is swept by three fixed 3x3 kernels in order. A
//! pixel is inverted exactly when its integer correlation with the kernel
//! equals 4: the first two kernels fill holes whose cross / diagonal
//! neighborhoods are fully set (negative noise), the third removes fully
//! isolated pixels (positive noise). Borders use zero padding, and every
//! pass reads only the plane it was given, so results never depend on scan
//! order. An optional 2x2 max-pool downsamples afterwards.

use crate::error::{Error, Result};
use crate::tensor::{Shape, SpikeTensor};

pub type Kernel3 = [[i32; 3]; 3];

/// Cross-neighborhood fill kernel.
pub const K1: Kernel3 = [[0, 1, 0], [1, -1, 1], [0, 1, 0]];
/// Diagonal-neighborhood fill kernel.
pub const K2: Kernel3 = [[1, 0, 1], [0, -1, 0], [1, 0, 1]];
/// Isolated-pixel removal kernel.
pub const K3: Kernel3 = [[-1, -1, -1], [-1, 4, -1], [-1, -1, -1]];

/// The correlation value that triggers a flip. It is also the maximum any
/// of the three kernels can produce on a binary plane.
pub const FLIP_THRESHOLD: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsample {
    None,
    /// 2x2 max-pool, stride 2.
    MaxPool2,
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiseConfig {
    pub downsample: Downsample,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            downsample: Downsample::None,
        }
    }
}

/// One kernel pass over a single-plane tensor (`t = 1`, `c = 1`).
pub fn denoise_pass(plane: &SpikeTensor, kernel: &Kernel3) -> Result<SpikeTensor> {
    let shape = plane.shape();
    if shape.t != 1 || shape.c != 1 {
        return Err(Error::Shape(format!(
            "denoise_pass wants a single plane, got {shape}"
        )));
    }
    let mut out = vec![0u8; shape.len()];
    pass_plane(plane.data(), &mut out, shape.h, shape.w, kernel, &mut 0);
    Ok(SpikeTensor::from_vec_unchecked(shape, out))
}

/// Full pipeline over every `(t, c)` plane: K1, then K2, then K3, then the
/// configured downsample. Returns the result and the number of integer
/// additions the three passes performed (for cost accounting).
pub fn spike_denoise_metered(x: &SpikeTensor, cfg: &DenoiseConfig) -> Result<(SpikeTensor, u64)> {
    let shape = x.shape();
    let (h, w) = shape.hw();
    let plane_len = h * w;
    let mut out = vec![0u8; shape.len()];
    let mut scratch = vec![0u8; plane_len];
    let mut adds = 0u64;
    for t in 0..shape.t {
        for c in 0..shape.c {
            let src = x.plane(t, c);
            let base = shape.index(t, c, 0, 0);
            let dst = &mut out[base..base + plane_len];
            pass_plane(src, dst, h, w, &K1, &mut adds);
            scratch.copy_from_slice(dst);
            pass_plane(&scratch, dst, h, w, &K2, &mut adds);
            scratch.copy_from_slice(dst);
            pass_plane(&scratch, dst, h, w, &K3, &mut adds);
        }
    }
    let denoised = SpikeTensor::from_vec_unchecked(shape, out);
    let result = match cfg.downsample {
        Downsample::None => denoised,
        Downsample::MaxPool2 => max_pool2(&denoised)?,
    };
    Ok((result, adds))
}

pub fn spike_denoise(x: &SpikeTensor, cfg: &DenoiseConfig) -> Result<SpikeTensor> {
    spike_denoise_metered(x, cfg).map(|(t, _)| t)
}

/// One kernel sweep of a raw `h*w` plane into `dst`, zero-padded. All
/// reads come from `src`. Adds one to `adds` per accumulated tap, i.e.
/// per set input pixel under a nonzero kernel coefficient.
fn pass_plane(src: &[u8], dst: &mut [u8], h: usize, w: usize, kernel: &Kernel3, adds: &mut u64) {
    for y in 0..h {
        for x in 0..w {
            let mut conv = 0i32;
            for (ky, row) in kernel.iter().enumerate() {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for (kx, &coef) in row.iter().enumerate() {
                    if coef == 0 {
                        continue;
                    }
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let v = src[iy as usize * w + ix as usize];
                    if v != 0 {
                        conv += coef;
                        *adds += 1;
                    }
                }
            }
            let center = src[y * w + x];
            dst[y * w + x] = if conv == FLIP_THRESHOLD { 1 - center } else { center };
        }
    }
}

/// 2x2 max-pool with stride 2 on a binary tensor.
fn max_pool2(x: &SpikeTensor) -> Result<SpikeTensor> {
    let shape = x.shape();
    if shape.h < 2 || shape.w < 2 {
        return Err(Error::Shape(format!(
            "2x2 pooling window does not fit {shape}"
        )));
    }
    let oh = shape.h / 2;
    let ow = shape.w / 2;
    let out_shape = Shape::new(shape.t, shape.c, oh, ow)?;
    let mut out = vec![0u8; out_shape.len()];
    for t in 0..shape.t {
        for c in 0..shape.c {
            for y in 0..oh {
                for xx in 0..ow {
                    let m = x.get(t, c, 2 * y, 2 * xx)
                        | x.get(t, c, 2 * y, 2 * xx + 1)
                        | x.get(t, c, 2 * y + 1, 2 * xx)
                        | x.get(t, c, 2 * y + 1, 2 * xx + 1);
                    out[out_shape.index(t, c, y, xx)] = m;
                }
            }
        }
    }
    Ok(SpikeTensor::from_vec_unchecked(out_shape, out))
}
