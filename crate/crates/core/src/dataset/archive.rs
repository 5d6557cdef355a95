use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::ImageShape;
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"IMGA";
pub const ARCHIVE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 8;

/// Flat sequence of equally shaped images, stored as little-endian `f32`.
///
/// Pushed images are rounded to single precision immediately, so what is
/// held in memory is exactly what a reader will see.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArchive {
    shape: ImageShape,
    data: Vec<f32>,
}

impl ImageArchive {
    pub fn new(shape: ImageShape) -> Self {
        ImageArchive { shape, data: Vec::new() }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.numel().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Append an image; returns its record index.
    pub fn push(&mut self, image: &Tensor) -> Result<u64> {
        if image.shape() != self.shape.dims() {
            return Err(Error::Shape {
                op: "archive.push",
                lhs: image.shape().to_vec(),
                rhs: self.shape.dims().to_vec(),
            });
        }
        if !image.is_finite() {
            return Err(Error::NonFinite { op: "archive.push" });
        }
        let idx = self.len() as u64;
        self.data.extend(image.data().iter().map(|&v| v as f32));
        Ok(idx)
    }

    pub fn get(&self, index: u64) -> Result<Tensor> {
        let n = self.shape.numel();
        let i = index as usize;
        if i >= self.len() {
            return Err(Error::invalid(format!(
                "archive record {index} out of range ({} records)",
                self.len()
            )));
        }
        let v = self.data[i * n..(i + 1) * n].iter().map(|&x| x as f64).collect();
        Tensor::new(self.shape.dims().to_vec(), v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        b.extend_from_slice(ARCHIVE_MAGIC);
        b.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        for d in self.shape.dims() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != ARCHIVE_MAGIC {
            return Err(Error::format(origin, "not an image archive"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != ARCHIVE_VERSION {
            return Err(Error::format(origin, format!("unsupported archive version {version}")));
        }
        let shape = ImageShape::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let want = shape
            .numel()
            .checked_mul(count)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(origin, "archive size overflow"))?;
        if shape.numel() == 0 || bytes.len() - HEADER_LEN != want {
            return Err(Error::format(
                origin,
                format!("payload is {} bytes, header implies {want}", bytes.len() - HEADER_LEN),
            ));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(origin, "non-finite pixel"));
        }
        Ok(ImageArchive { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ImageArchive::from_bytes(&bytes, path)
    }
}

/// Round every element to the nearest `f32`.
pub fn to_f32_precision(image: &Tensor) -> Tensor {
    let v = image.data().iter().map(|&x| x as f32 as f64).collect();
    Tensor::new(image.shape().to_vec(), v).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn byte_round_trip() {
        let shape = ImageShape::new(4, 4, 2);
        let mut a = ImageArchive::new(shape);
        let mut r = rng::stream(0, "archive", 0);
        let imgs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 4, 2], 1.0, &mut r)).collect();
        for (i, t) in imgs.iter().enumerate() {
            assert_eq!(a.push(t).unwrap(), i as u64);
        }
        let back = ImageArchive::from_bytes(&a.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.get(1).unwrap(), to_f32_precision(&imgs[1]));
        assert!(back.get(3).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut a = ImageArchive::new(ImageShape::new(2, 2, 1));
        a.push(&Tensor::zeros(&[2, 2, 1])).unwrap();
        let b = a.to_bytes();
        assert!(ImageArchive::from_bytes(&b[..b.len() - 1], Path::new("x")).is_err());
        assert!(a.push(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
