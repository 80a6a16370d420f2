//! Fixed-point tensors and the quantization arithmetic shared by every engine.
//!
//! Values are stored as `i32` regardless of the logical bit width; the logical
//! range `[q_min, q_max]` is enforced at construction time.
//!
//! Activations are unsigned (`q_min = 0`, `q_max = 2^b - 1`) and weights are
//! signed symmetric (`±(2^(b-1) - 1)`), both with a zero point of 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Per-tensor quantization metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u32,
    pub q_min: i32,
    pub q_max: i32,
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )))
    }
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u32, signed: bool) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("scale must be finite and > 0, got {scale}")));
        }
        let (q_min, q_max) = if signed {
            let m = (1i32 << (bits - 1)) - 1;
            (-m, m)
        } else {
            (0, (1i32 << bits) - 1)
        };
        if zero_point < q_min || zero_point > q_max {
            return Err(Error::Config(format!(
                "zero point {zero_point} outside [{q_min}, {q_max}]"
            )));
        }
        Ok(Self {
            scale,
            zero_point,
            bits,
            q_min,
            q_max,
        })
    }

    /// Unsigned symmetric parameters (activations).
    pub fn unsigned(scale: f64, bits: u32) -> Result<Self> {
        Self::new(scale, 0, bits, false)
    }

    /// Signed symmetric parameters (weights, logits).
    pub fn signed(scale: f64, bits: u32) -> Result<Self> {
        Self::new(scale, 0, bits, true)
    }

    pub fn is_signed(&self) -> bool {
        self.q_min < 0
    }

    pub fn contains(&self, q: i32) -> bool {
        (self.q_min..=self.q_max).contains(&q)
    }

    /// Same real-valued range expressed at a different bit width.
    ///
    /// The representable maximum `q_max * scale` is preserved, so an unsigned
    /// tensor keeps its `[0, x_max]` span and a signed one its `±x_max` span.
    pub fn with_bits(&self, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if bits == self.bits {
            return Ok(*self);
        }
        if self.zero_point != 0 {
            return Err(Error::Config("rescaling requires a zero point of 0".into()));
        }
        let target = Self::new(1.0, 0, bits, self.is_signed())?;
        let scale = self.scale * f64::from(self.q_max) / f64::from(target.q_max);
        Self::new(scale, 0, bits, self.is_signed())
    }
}

/// `S = (x_max - x_min) / (2^b - 1)`.
pub fn compute_scale(x_min: f64, x_max: f64, bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if !(x_min.is_finite() && x_max.is_finite()) {
        return Err(Error::Input("range bounds must be finite".into()));
    }
    if x_max <= x_min {
        return Err(Error::Range(format!(
            "degenerate range: x_max ({x_max}) <= x_min ({x_min})"
        )));
    }
    Ok((x_max - x_min) / f64::from((1u32 << bits) - 1))
}

/// `clamp(floor(x / S) + Z, q_min, q_max)`.
///
/// The floor is taken against the same product `q * S` that [`dequantize`]
/// computes, so `quantize(dequantize(q)) == q` holds exactly for every
/// representable `q` when `Z = 0`.
pub fn quantize(x: f64, p: &QuantParams) -> Result<i32> {
    if !x.is_finite() {
        return Err(Error::Input(format!("cannot quantize non-finite value {x}")));
    }
    let lo = f64::from(p.q_min - p.zero_point);
    let hi = f64::from(p.q_max - p.zero_point);
    let ratio = x / p.scale;
    if ratio.is_nan() || ratio >= hi + 1.0 {
        return Ok(p.q_max);
    }
    if ratio < lo {
        return Ok(p.q_min);
    }
    let mut steps = ratio.floor();
    while (steps + 1.0) * p.scale <= x {
        steps += 1.0;
    }
    while steps * p.scale > x {
        steps -= 1.0;
    }
    let q = (steps as i64 + i64::from(p.zero_point)).clamp(i64::from(p.q_min), i64::from(p.q_max));
    Ok(q as i32)
}

/// `(q - Z) * S`.
pub fn dequantize(q: i32, p: &QuantParams) -> Result<f64> {
    if !p.contains(q) {
        return Err(Error::Input(format!(
            "quantized value {q} outside [{}, {}]",
            p.q_min, p.q_max
        )));
    }
    Ok(f64::from(q - p.zero_point) * p.scale)
}

/// XOR mask for a set of distinct bit positions inside a `bits`-wide word.
pub fn bit_mask(bit_positions: &[u32], bits: u32) -> Result<u32> {
    let mut mask = 0u32;
    for &pos in bit_positions {
        if pos >= bits {
            return Err(Error::Config(format!(
                "bit position {pos} outside a {bits}-bit word"
            )));
        }
        if mask & (1 << pos) != 0 {
            return Err(Error::Config(format!("bit position {pos} repeated")));
        }
        mask |= 1 << pos;
    }
    Ok(mask)
}

/// Flip the given bits of an unsigned `bits`-wide word.
pub fn flip_bits(q: i32, bit_positions: &[u32], bits: u32) -> Result<i32> {
    check_bits(bits)?;
    let mask = bit_mask(bit_positions, bits)?;
    if q < 0 || q as u32 > (1u32 << bits) - 1 {
        return Err(Error::Input(format!("{q} is not a {bits}-bit unsigned word")));
    }
    Ok((q as u32 ^ mask) as i32)
}

/// Row-major integer tensor with its quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    params: QuantParams,
}

impl QTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, params: QuantParams) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !params.contains(**v)) {
            return Err(Error::Range(format!(
                "element {i} = {v} outside [{}, {}]",
                params.q_min, params.q_max
            )));
        }
        Ok(Self {
            shape,
            data,
            params,
        })
    }

    /// Constructor for data already known to satisfy the range invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<i32>, params: QuantParams) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| params.contains(*v)));
        Self {
            shape,
            data,
            params,
        }
    }

    pub fn zeros(shape: Vec<usize>, params: QuantParams) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![params.zero_point; n], params)
    }

    /// Quantize a slice of reals element by element.
    pub fn quantize_from(shape: Vec<usize>, values: &[f64], params: QuantParams) -> Result<Self> {
        let data = values
            .iter()
            .map(|&x| quantize(x, &params))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, data, params)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&q| f64::from(q - self.params.zero_point) * self.params.scale)
            .collect()
    }

    /// Re-express the tensor under new parameters.
    ///
    /// This maps one integer domain onto another, so it rounds half away from
    /// zero like accumulator requantization does; the floor of [`quantize`]
    /// applies to real-valued inputs only.
    pub fn requantized(&self, params: QuantParams) -> Result<Self> {
        if params == self.params {
            return Ok(self.clone());
        }
        let ratio = self.params.scale / params.scale;
        let data = self
            .data
            .iter()
            .map(|&q| {
                let v = (f64::from(q - self.params.zero_point) * ratio).round() + f64::from(params.zero_point);
                v.clamp(f64::from(params.q_min), f64::from(params.q_max)) as i32
            })
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data, params))
    }

    /// Same data under a different shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}
