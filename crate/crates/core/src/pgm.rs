//! Binary PGM ("P5") reader/writer for spike-plane dumps.
//!
//! A spike of 1 maps to gray 255 and 0 to gray 0. Reading thresholds at
//! half scale, so any 8-bit P5 image becomes a clean binary plane.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, SpikeTensor};

/// Writes one `(t, c)` plane of a spike tensor as an 8-bit binary PGM.
pub fn to_pgm(tensor: &SpikeTensor, t: usize, c: usize, path: &Path) -> Result<()> {
    let shape = tensor.shape();
    if t >= shape.t || c >= shape.c {
        return Err(Error::Shape(format!(
            "plane (t={t}, c={c}) out of range for {shape}"
        )));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_plane(&mut w, tensor.plane(t, c), shape.h, shape.w)?;
    w.flush()?;
    Ok(())
}

pub fn write_plane<W: Write>(w: &mut W, plane: &[u8], h: usize, w_px: usize) -> Result<()> {
    write!(w, "P5\n{w_px} {h}\n255\n")?;
    let row: Vec<u8> = plane.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    w.write_all(&row)?;
    Ok(())
}

/// Reads an 8-bit binary PGM into a `(1, 1, h, w)` spike tensor.
///
/// Samples are scaled to the 0..255 range before the >= 128 threshold, so
/// files with a smaller maxval still load. Two-byte samples (maxval > 255)
/// are not supported.
pub fn from_pgm(path: &Path) -> Result<SpikeTensor> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_plane(&mut r)
}

pub fn read_plane<R: BufRead>(r: &mut R) -> Result<SpikeTensor> {
    let (raw, h, w, maxval) = read_raster(r)?;
    let shape = Shape::new(1, 1, h, w)?;
    let data = raw
        .iter()
        .map(|&v| u8::from(v as u32 * 255 / maxval as u32 >= 128))
        .collect();
    SpikeTensor::from_vec(shape, data)
}

/// Reads an 8-bit binary PGM as grayscale intensities scaled to [0, 1],
/// shape `(1, 1, h, w)`. Used for network input images, where thresholding
/// to spikes would throw information away.
pub fn from_pgm_gray(path: &Path) -> Result<crate::tensor::FloatTensor> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let (raw, h, w, maxval) = read_raster(&mut r)?;
    let shape = Shape::new(1, 1, h, w)?;
    let data = raw.iter().map(|&v| v as f32 / maxval as f32).collect();
    crate::tensor::FloatTensor::from_vec(shape, data)
}

/// Raw 8-bit P5 raster plus (height, width, maxval). A single whitespace
/// byte separates the header from the raster; the header-number reader
/// consumes it.
fn read_raster<R: BufRead>(r: &mut R) -> Result<(Vec<u8>, usize, usize, usize)> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated PGM header".to_string()))?;
    if &magic != b"P5" {
        return Err(Error::Format(format!(
            "not a binary PGM (magic {:?})",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = read_header_number(r)?;
    let height = read_header_number(r)?;
    let maxval = read_header_number(r)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "unsupported PGM maxval {maxval} (expected 1..=255)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero-sized PGM".to_string()));
    }
    let pixels = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("PGM extents overflow".to_string()))?;
    let raw = crate::tensor_file::read_payload(r, pixels, "PGM raster")
        .map_err(|_| Error::Format("truncated PGM raster".to_string()))?;
    Ok((raw, height, width, maxval))
}

/// Reads one ASCII integer, skipping whitespace and `#` comments, and
/// consumes the single whitespace byte that terminates it.
fn read_header_number<R: BufRead>(r: &mut R) -> Result<usize> {
    let mut digits = String::new();
    loop {
        let buf = r.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        let b = buf[0];
        if b == b'#' && digits.is_empty() {
            let mut line = String::new();
            r.read_line(&mut line)?;
        } else if b.is_ascii_whitespace() {
            r.consume(1);
            if !digits.is_empty() {
                break;
            }
        } else if b.is_ascii_digit() {
            digits.push(b as char);
            r.consume(1);
        } else {
            return Err(Error::Format(format!(
                "unexpected byte {b:#x} in PGM header"
            )));
        }
    }
    digits
        .parse()
        .map_err(|_| Error::Format("missing number in PGM header".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn plane_maps_to_255_and_0() {
        let shape = Shape::new(1, 1, 2, 2).unwrap();
        let t = SpikeTensor::from_vec(shape, vec![1, 0, 0, 1]).unwrap();
        let mut buf = Vec::new();
        write_plane(&mut buf, t.plane(0, 0), 2, 2).unwrap();
        assert_eq!(&buf[..buf.len() - 4], b"P5\n2 2\n255\n");
        assert_eq!(&buf[buf.len() - 4..], &[255, 0, 0, 255]);
    }

    #[test]
    fn roundtrip_recovers_plane() {
        let shape = Shape::new(2, 3, 5, 4).unwrap();
        let data: Vec<u8> = (0..shape.len()).map(|i| ((i * 7) % 3 == 0) as u8).collect();
        let t = SpikeTensor::from_vec(shape, data).unwrap();
        let mut buf = Vec::new();
        write_plane(&mut buf, t.plane(1, 2), 5, 4).unwrap();
        let back = read_plane(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back.shape(), Shape::new(1, 1, 5, 4).unwrap());
        assert_eq!(back.plane(0, 0), t.plane(1, 2));
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let header = b"P5\n2 2\n65535\n".to_vec();
        let err = read_plane(&mut Cursor::new(header)).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut buf = b"P5\n# a comment\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[200, 10]);
        let t = read_plane(&mut Cursor::new(buf)).unwrap();
        assert_eq!(t.plane(0, 0), &[1, 0]);
    }

    #[test]
    fn out_of_range_plane_index_rejected() {
        let t = SpikeTensor::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let err = to_pgm(&t, 0, 3, Path::new("/nonexistent/x.pgm")).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
