//! Dense tensor storage with an explicit time dimension.
//!
//! Both tensor types are row-major with `(t, c, y, x)` index nesting; the
//! linear offset of an element is `((t*C + c)*H + y)*W + x`. Spike tensors
//! hold only 0/1 bytes, which is checked on every construction and load.

use crate::error::{Error, Result};

/// Extents of a `(t, c, h, w)` tensor. All four are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(t: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Size(format!(
                "all extents must be >= 1, got ({t},{c},{h},{w})"
            )));
        }
        t.checked_mul(c)
            .and_then(|n| n.checked_mul(h))
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| Error::Size(format!("element count overflows: ({t},{c},{h},{w})")))?;
        Ok(Shape { t, c, h, w })
    }

    /// Total element count `t*c*h*w`.
    pub fn len(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false // extents are >= 1 by construction
    }

    /// Linear offset of `(t, c, y, x)`.
    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(t < self.t && c < self.c && y < self.h && x < self.w);
        ((t * self.c + c) * self.h + y) * self.w + x
    }

    /// Same extents with a different time dimension.
    pub fn with_t(&self, t: usize) -> Result<Shape> {
        Shape::new(t, self.c, self.h, self.w)
    }

    /// Spatial extents only.
    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.t, self.c, self.h, self.w)
    }
}

/// Binary activation volume; every element is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Shape,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(shape: Shape) -> Self {
        SpikeTensor {
            shape,
            data: vec![0u8; shape.len()],
        }
    }

    /// Builds from raw bytes, rejecting anything outside {0, 1}.
    pub fn from_vec(shape: Shape, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "spike tensor {} needs {} elements, got {}",
                shape,
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "spike tensor holds non-binary value {} at offset {pos}",
                data[pos]
            )));
        }
        Ok(SpikeTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(t, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: bool) {
        self.data[self.shape.index(t, c, y, x)] = v as u8;
    }

    /// Number of 1-elements.
    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of elements that are 1.
    pub fn firing_rate(&self) -> f64 {
        self.count_ones() as f64 / self.shape.len() as f64
    }

    /// Ones within a single `(t, c)` plane.
    pub fn plane_count_ones(&self, t: usize, c: usize) -> usize {
        let base = self.shape.index(t, c, 0, 0);
        self.data[base..base + self.shape.h * self.shape.w]
            .iter()
            .map(|&v| v as usize)
            .sum()
    }

    /// View of one `(t, c)` plane, row-major `h*w` bytes.
    pub fn plane(&self, t: usize, c: usize) -> &[u8] {
        let base = self.shape.index(t, c, 0, 0);
        &self.data[base..base + self.shape.h * self.shape.w]
    }

    /// Copies one time slice into a new tensor with `t = 1`.
    pub fn time_slice(&self, t: usize) -> SpikeTensor {
        let step = self.shape.c * self.shape.h * self.shape.w;
        let shape = Shape {
            t: 1,
            ..self.shape
        };
        SpikeTensor {
            shape,
            data: self.data[t * step..(t + 1) * step].to_vec(),
        }
    }

    /// Stacks `t = 1` slices along the time dimension.
    pub fn stack_time(slices: &[SpikeTensor]) -> Result<SpikeTensor> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero time slices".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * slices.len());
        for s in slices {
            if s.shape.t != 1 || (s.shape.c, s.shape.h, s.shape.w)
                != (first.shape.c, first.shape.h, first.shape.w)
            {
                return Err(Error::Shape(format!(
                    "time slices disagree: {} vs {}",
                    s.shape, first.shape
                )));
            }
            data.extend_from_slice(&s.data);
        }
        let shape = first.shape.with_t(slices.len())?;
        Ok(SpikeTensor { shape, data })
    }

    /// Construction that skips the binarity scan. Callers must only ever
    /// write 0 or 1.
    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<u8>) -> Self {
        debug_assert!(data.len() == shape.len());
        debug_assert!(data.iter().all(|&v| v <= 1));
        SpikeTensor { shape, data }
    }
}

/// Dense f32 volume with the same layout as [`SpikeTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn zeros(shape: Shape) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Builds from raw values, rejecting NaN and infinities.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "float tensor {} needs {} elements, got {}",
                shape,
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "float tensor holds non-finite value {} at offset {pos}",
                data[pos]
            )));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(t, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, y: usize, x: usize, v: f32) {
        self.data[self.shape.index(t, c, y, x)] = v;
    }

    pub fn time_slice(&self, t: usize) -> FloatTensor {
        let step = self.shape.c * self.shape.h * self.shape.w;
        let shape = Shape {
            t: 1,
            ..self.shape
        };
        FloatTensor {
            shape,
            data: self.data[t * step..(t + 1) * step].to_vec(),
        }
    }

    pub fn stack_time(slices: &[FloatTensor]) -> Result<FloatTensor> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero time slices".into()))?;
        let mut data = Vec::with_capacity(first.data.len() * slices.len());
        for s in slices {
            if s.shape.t != 1 || (s.shape.c, s.shape.h, s.shape.w)
                != (first.shape.c, first.shape.h, first.shape.w)
            {
                return Err(Error::Shape(format!(
                    "time slices disagree: {} vs {}",
                    s.shape, first.shape
                )));
            }
            data.extend_from_slice(&s.data);
        }
        let shape = first.shape.with_t(slices.len())?;
        Ok(FloatTensor { shape, data })
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{context}: non-finite value {} at offset {pos}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert!(data.len() == shape.len());
        FloatTensor { shape, data }
    }
}

/// Element type stored in a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8Spike,
    F32,
}

/// A tensor of either element type, as loaded from a file.
#[derive(Debug, Clone)]
pub enum Tensor {
    Spike(SpikeTensor),
    Float(FloatTensor),
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        match self {
            Tensor::Spike(t) => t.shape(),
            Tensor::Float(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::Spike(_) => Dtype::U8Spike,
            Tensor::Float(_) => Dtype::F32,
        }
    }
}

/// All-zero tensor of the requested dtype.
pub fn zeros(shape: Shape, dtype: Dtype) -> Tensor {
    match dtype {
        Dtype::U8Spike => Tensor::Spike(SpikeTensor::zeros(shape)),
        Dtype::F32 => Tensor::Float(FloatTensor::zeros(shape)),
    }
}
