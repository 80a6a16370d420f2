//! `QDS1` labeled datasets.
//!
//! Layout: magic `QDS1`, `u32` sample count, then per sample one label byte
//! followed by the pixels as `i32`, all little-endian. The per-sample pixel
//! count is not stored; it comes from the network input shape.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::qtensor::{QTensor, QuantParams};

const MAGIC: &[u8; 4] = b"QDS1";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    sample_shape: Vec<usize>,
    params: QuantParams,
    labels: Vec<u8>,
    pixels: Vec<i32>,
}

impl LabeledSet {
    pub fn new(
        sample_shape: Vec<usize>,
        params: QuantParams,
        labels: Vec<u8>,
        pixels: Vec<i32>,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::Shape("samples must have at least one element".into()));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} samples of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !params.contains(**v)) {
            return Err(Error::Range(format!(
                "pixel {} of sample {} = {v} outside [{}, {}]",
                i % per,
                i / per,
                params.q_min,
                params.q_max
            )));
        }
        Ok(Self {
            sample_shape,
            params,
            labels,
            pixels,
        })
    }

    pub fn read(path: impl AsRef<Path>, sample_shape: &[usize], params: QuantParams) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "missing QDS1 header"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let per: usize = sample_shape.iter().product();
        let record = 1 + 4 * per;
        let body = &bytes[8..];
        if body.len() != count * record {
            return Err(Error::format(
                path,
                format!(
                    "header declares {count} samples of {per} pixels ({} bytes), body has {} bytes",
                    count * record,
                    body.len()
                ),
            ));
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * per);
        for rec in body.chunks_exact(record) {
            labels.push(rec[0]);
            pixels.extend(
                rec[1..]
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Self::new(sample_shape.to_vec(), params, labels, pixels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.pixels.len() * 4 + self.labels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        let per = self.sample_len();
        for (label, px) in self.labels.iter().zip(self.pixels.chunks_exact(per)) {
            out.push(*label);
            for v in px {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[i32] {
        let per = self.sample_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn sample(&self, i: usize) -> Result<(u8, QTensor)> {
        let label = *self
            .labels
            .get(i)
            .ok_or_else(|| Error::Input(format!("sample {i} out of {}", self.len())))?;
        Ok((
            label,
            QTensor::from_parts(self.sample_shape.clone(), self.pixels(i).to_vec(), self.params),
        ))
    }

    /// A new set made of the given sample indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Input(format!("sample {i} out of {}", self.len())));
            }
            labels.push(self.labels[i]);
            pixels.extend_from_slice(self.pixels(i));
        }
        Ok(Self {
            sample_shape: self.sample_shape.clone(),
            params: self.params,
            labels,
            pixels,
        })
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            sample_shape: self.sample_shape.clone(),
            params: self.params,
            labels: self.labels[..n].to_vec(),
            pixels: self.pixels[..n * self.sample_len()].to_vec(),
        }
    }

    pub fn requantized(&self, params: QuantParams) -> Result<Self> {
        let t = QTensor::from_parts(vec![self.pixels.len()], self.pixels.clone(), self.params);
        Ok(Self {
            sample_shape: self.sample_shape.clone(),
            params,
            labels: self.labels.clone(),
            pixels: t.requantized(params)?.into_data(),
        })
    }
}
