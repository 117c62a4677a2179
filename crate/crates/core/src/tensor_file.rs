//! Bit-exact binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SUT1"
//! 4       1     dtype: 0 = u8 spikes, 1 = f32
//! 5       16    four u32 extents (t, c, h, w)
//! 21      ...   payload, row-major (t, c, y, x)
//! ```
//!
//! Spike payloads are one byte per element and must contain only 0/1;
//! float payloads are 4 bytes per element and must be finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, FloatTensor, Shape, SpikeTensor, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SUT1";

const DTYPE_U8_SPIKE: u8 = 0;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensor_to(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_tensor_to<W: Write>(tensor: &Tensor, w: &mut W) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    let shape = tensor.shape();
    let dtype_byte = match tensor.dtype() {
        Dtype::U8Spike => DTYPE_U8_SPIKE,
        Dtype::F32 => DTYPE_F32,
    };
    w.write_all(&[dtype_byte])?;
    for dim in [shape.t, shape.c, shape.h, shape.w] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Size(format!("extent {dim} exceeds u32 in tensor file")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    match tensor {
        Tensor::Spike(t) => w.write_all(t.data())?,
        Tensor::Float(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r)
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, TENSOR_MAGIC
        )));
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype, "dtype")?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        read_exact(r, &mut buf, "dims")?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
    match dtype[0] {
        DTYPE_U8_SPIKE => {
            let data = read_payload(r, shape.len(), "spike payload")?;
            expect_eof(r)?;
            Ok(Tensor::Spike(SpikeTensor::from_vec(shape, data)?))
        }
        DTYPE_F32 => {
            let bytes = shape.len().checked_mul(4).ok_or_else(|| {
                Error::Size(format!("float payload for {shape} overflows"))
            })?;
            let raw = read_payload(r, bytes, "float payload")?;
            expect_eof(r)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Tensor::Float(FloatTensor::from_vec(shape, data)?))
        }
        other => Err(Error::Format(format!("unknown dtype byte {other}"))),
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated tensor file while reading {what}")))
}

/// Reads exactly `expected` bytes, growing the buffer as data arrives so
/// corrupt headers declaring absurd extents cannot force a huge upfront
/// allocation.
pub(crate) fn read_payload<R: Read>(r: &mut R, expected: usize, what: &str) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    r.take(expected as u64).read_to_end(&mut data)?;
    if data.len() != expected {
        return Err(Error::Format(format!(
            "truncated tensor file while reading {what}: wanted {expected} bytes, got {}",
            data.len()
        )));
    }
    Ok(data)
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format(
            "trailing bytes after tensor payload".to_string(),
        )),
    }
}
