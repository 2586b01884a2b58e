//! IDX flat binary files: two zero bytes, a type byte (`0x08`, unsigned
//! byte), a dimension count, big-endian `u32` sizes, then the raw data.

use std::fs;
use std::path::Path;

use crate::datagen::{Labels, SampleStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("truncated IDX header".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
            return Err(Error::Format(format!(
                "bad IDX magic {:02x}{:02x}{:02x}",
                bytes[0], bytes[1], bytes[2]
            )));
        }
        let ndim = bytes[3] as usize;
        if ndim == 0 {
            return Err(Error::Format("IDX file with zero dimensions".into()));
        }
        let header = 4 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated IDX dimension list".into()));
        }
        let dims: Vec<usize> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let n: usize = dims.iter().product();
        let body = &bytes[header..];
        if body.len() < n {
            return Err(Error::Format(format!(
                "truncated IDX data: expected {n} bytes, found {}",
                body.len()
            )));
        }
        if body.len() > n {
            return Err(Error::Format(format!(
                "{} trailing bytes after IDX data",
                body.len() - n
            )));
        }
        Ok(Self {
            dims,
            data: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() || self.dims.len() > 255 {
            return Err(Error::Format(format!("cannot encode {} IDX dimensions", self.dims.len())));
        }
        if self.dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape("IDX dims do not match data length".into()));
        }
        let mut out = vec![0, 0, UBYTE, self.dims.len() as u8];
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("IDX dimension {d} too large")))?;
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        Ok(out)
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    IdxArray::parse(&fs::read(path)?)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, array.to_bytes()?)?;
    Ok(())
}

/// Loads an image/label IDX pair. Pixels are scaled by `1/255` and each
/// image is flattened row-major.
pub fn load_idx<T: Scalar>(features_path: &Path, labels_path: &Path) -> Result<SampleStore<T>> {
    let images = read_idx(features_path)?;
    let labels = read_idx(labels_path)?;
    if labels.dims.len() != 1 {
        return Err(Error::Format(format!("label file has {} dimensions", labels.dims.len())));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.dims[0]
        )));
    }
    let width: usize = images.dims[1..].iter().product();
    let scale = T::lit(255.0);
    let features = images.data.iter().map(|&b| T::from_count(b as usize) / scale).collect();
    SampleStore::new(
        Tensor::new(vec![n, width], features)?,
        Labels::Class(labels.data.iter().map(|&l| l as usize).collect()),
    )
}

/// Writes a classification store as an IDX pair, quantizing features to
/// `round(255 x)` clamped to `[0, 255]`. `image_dims` is the per-sample
/// shape and must multiply to the feature width.
pub fn save_idx<T: Scalar>(
    store: &SampleStore<T>,
    image_dims: &[usize],
    features_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let (n, d) = store.features.dims2()?;
    if image_dims.iter().product::<usize>() != d {
        return Err(Error::Shape(format!("image dims {image_dims:?} do not give width {d}")));
    }
    let labels = store.class_labels()?;
    let label_bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    let pixels = store
        .features
        .data()
        .iter()
        .map(|x| (x.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut dims = vec![n];
    dims.extend_from_slice(image_dims);
    write_idx(features_path, &IdxArray { dims, data: pixels })?;
    write_idx(labels_path, &IdxArray { dims: vec![n], data: label_bytes })
}
