//! On-disk raster container.
//!
//! Layout (all little-endian):
//! ```text
//! offset  size  field
//! 0       8     magic "MSEGRAS1"
//! 8       1     dtype code: 1 = f64, 2 = u8 labels
//! 9       1     ndim
//! 10      4*n   dims, u32 each
//! ...           payload, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::NdArray;

pub const MAGIC: &[u8; 8] = b"MSEGRAS1";
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

/// Integer label raster; values in `0..num_classes` plus the 255 ignore label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelRaster {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label raster {h}x{w} with {} values",
                data.len()
            )));
        }
        Ok(LabelRaster { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u32) -> Self {
        LabelRaster {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.w + x] = v;
    }

    /// Check every value is in `{0..num_classes-1, 255}`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for &v in &self.data {
            if v != 255 && v as usize >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label value {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0usize; num_classes + 1];
        for &v in &self.data {
            if v == 255 {
                h[num_classes] += 1;
            } else {
                h[v as usize] += 1;
            }
        }
        h
    }
}

fn write_header(buf: &mut Vec<u8>, dtype: u8, dims: &[usize]) {
    buf.extend_from_slice(MAGIC);
    buf.push(dtype);
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>, usize)> {
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(Error::Parse(format!("bad raster magic in {}", path.display())));
    }
    let dtype = bytes[8];
    let ndim = bytes[9] as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 10;
    for _ in 0..ndim {
        if off + 4 > bytes.len() {
            return Err(Error::Parse(format!("truncated raster {}", path.display())));
        }
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    Ok((dtype, dims, off))
}

pub fn save_array(path: &Path, a: &NdArray) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + a.shape().len() * 4 + a.numel() * 8);
    write_header(&mut buf, DTYPE_F64, a.shape());
    for v in a.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn load_array(path: &Path) -> Result<NdArray> {
    let bytes = read_all(path)?;
    let (dtype, dims, off) = read_header(&bytes, path)?;
    if dtype != DTYPE_F64 {
        return Err(Error::Parse(format!(
            "expected f64 raster in {}",
            path.display()
        )));
    }
    let n: usize = dims.iter().product();
    if bytes.len() != off + n * 8 {
        return Err(Error::Parse(format!("truncated raster {}", path.display())));
    }
    let data = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NdArray::from_vec(&dims, data)
}

pub fn save_labels(path: &Path, l: &LabelRaster) -> Result<()> {
    let mut buf = Vec::with_capacity(10 + 8 + l.data.len());
    write_header(&mut buf, DTYPE_U8, &[l.h, l.w]);
    for &v in &l.data {
        buf.push(v as u8);
    }
    atomic_write(path, &buf)
}

pub fn load_labels(path: &Path) -> Result<LabelRaster> {
    let bytes = read_all(path)?;
    let (dtype, dims, off) = read_header(&bytes, path)?;
    if dtype != DTYPE_U8 || dims.len() != 2 {
        return Err(Error::Parse(format!(
            "expected 2-d label raster in {}",
            path.display()
        )));
    }
    let (h, w) = (dims[0], dims[1]);
    if bytes.len() != off + h * w {
        return Err(Error::Parse(format!("truncated raster {}", path.display())));
    }
    let data = bytes[off..].iter().map(|&b| b as u32).collect();
    LabelRaster::new(h, w, data)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ras");
        let a = NdArray::from_vec(&[2, 3], vec![0.1, -2.5, 3e-300, 7.0, 0.0, -0.0]).unwrap();
        save_array(&p, &a).unwrap();
        let b = load_array(&p).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.ras");
        let l = LabelRaster::new(2, 2, vec![0, 3, 255, 1]).unwrap();
        save_labels(&p, &l).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ras");
        std::fs::write(&p, b"NOTAMAGICFILE").unwrap();
        assert!(load_array(&p).is_err());
    }
}
