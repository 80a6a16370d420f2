//! Weight-stationary systolic-array execution model.
//!
//! Conv layers are lowered with im2col: a `K x N` weight matrix
//! (`K = kh * kw * c_in`, `N = c_out`) and an `M x K` activation matrix, one
//! row per output pixel. The weight matrix is cut into `R x C` blocks; each
//! block is one tile that is preloaded into the array while the `M` activation
//! rows stream through it. Partial sums of tiles sharing output columns are
//! accumulated outside the array.
//!
//! Per tile: `cycles = M + R + C - 2` (fill and drain) `+ R` (weight preload).
//! Pooling, ReLU and flatten run on a vector unit at `ceil(elements / lanes)`
//! cycles with no MACs.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultlab::FaultSite;
use crate::guard::GuardSpec;
use crate::netgraph::{requantize_accumulator, Layer, LayerKind, Network, Prediction};
use crate::qtensor::QTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub clock_hz: f64,
    /// Vector-unit width for non-MAC layers; defaults to `cols`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_lanes: Option<usize>,
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize, clock_hz: f64) -> Result<Self> {
        let cfg = Self {
            rows,
            cols,
            clock_hz,
            vector_lanes: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "array must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::Config(format!("clock must be > 0 Hz, got {}", self.clock_hz)));
        }
        if self.vector_lanes == Some(0) {
            return Err(Error::Config("vector unit needs at least one lane".into()));
        }
        Ok(())
    }

    pub fn vector_width(&self) -> usize {
        self.vector_lanes.unwrap_or(self.cols)
    }

    /// Cycles for one tile streaming `stream_rows` activation rows.
    pub fn tile_cycles(&self, stream_rows: usize) -> u64 {
        (stream_rows + self.rows + self.cols - 2 + self.rows) as u64
    }
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            clock_hz: 100e6,
            vector_lanes: None,
        }
    }
}

/// One weight block pinned in the array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    /// Rows of the lowered weight matrix held by the tile.
    pub k_start: usize,
    pub k_end: usize,
    /// Output columns the tile contributes to.
    pub n_start: usize,
    pub n_end: usize,
    /// Activation rows streamed through the tile (all `M` lowered rows).
    pub stream_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSchedule {
    /// Lowered activation rows (output pixels; 1 for dense layers).
    pub m: usize,
    /// Reduction length.
    pub k: usize,
    /// Output columns.
    pub n: usize,
    pub tiles: Vec<Tile>,
}

impl TileSchedule {
    pub fn cycles(&self, cfg: &ArrayConfig) -> u64 {
        self.tiles.iter().map(|t| cfg.tile_cycles(t.stream_rows)).sum()
    }

    pub fn mac_ops(&self) -> u64 {
        self.tiles
            .iter()
            .map(|t| ((t.k_end - t.k_start) * (t.n_end - t.n_start) * t.stream_rows) as u64)
            .sum()
    }
}

/// Lower a conv or dense layer onto an `R x C` array.
pub fn lower_layer(layer: &Layer, input_shape: &[usize], cfg: &ArrayConfig) -> Result<TileSchedule> {
    cfg.validate()?;
    let out = layer.output_shape(input_shape)?;
    let (m, k, n) = match layer.kind {
        LayerKind::Conv2d(g) => (out[0] * out[1], g.lowered_k(), g.out_channels),
        LayerKind::Dense { inputs, outputs } => (1, inputs, outputs),
        other => {
            return Err(Error::Config(format!(
                "{} layers do not run on the MAC array",
                other.tag()
            )))
        }
    };
    let mut tiles = Vec::with_capacity(k.div_ceil(cfg.rows) * n.div_ceil(cfg.cols));
    for k_start in (0..k).step_by(cfg.rows) {
        for n_start in (0..n).step_by(cfg.cols) {
            tiles.push(Tile {
                k_start,
                k_end: (k_start + cfg.rows).min(k),
                n_start,
                n_end: (n_start + cfg.cols).min(n),
                stream_rows: m,
            });
        }
    }
    Ok(TileSchedule { m, k, n, tiles })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub mac_ops: u64,
    pub cycles: u64,
    pub clock_hz: f64,
}

impl CycleReport {
    pub fn empty(clock_hz: f64) -> Self {
        Self {
            mac_ops: 0,
            cycles: 0,
            clock_hz,
        }
    }

    /// `2 * mac_ops / (cycles / clock_hz) / 1e9`.
    pub fn giops_estimate(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        2.0 * self.mac_ops as f64 / (self.cycles as f64 / self.clock_hz) / 1e9
    }

    pub fn latency_seconds(&self) -> f64 {
        self.cycles as f64 / self.clock_hz
    }
}

impl Add for CycleReport {
    type Output = CycleReport;

    fn add(self, rhs: Self) -> Self {
        Self {
            mac_ops: self.mac_ops + rhs.mac_ops,
            cycles: self.cycles + rhs.cycles,
            clock_hz: self.clock_hz,
        }
    }
}

impl AddAssign for CycleReport {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// Intercepts every read of a stored activation word by the layer being run.
pub trait ActivationHook {
    fn on_read(&self, index: usize, value: i32) -> i32;
}

pub struct IdentityHook;

impl ActivationHook for IdentityHook {
    #[inline]
    fn on_read(&self, _index: usize, value: i32) -> i32 {
        value
    }
}

/// XOR a mask into one stored word on every read.
#[derive(Debug, Clone, Copy)]
pub struct BitFlipHook {
    pub index: usize,
    pub mask: u32,
}

impl ActivationHook for BitFlipHook {
    #[inline]
    fn on_read(&self, index: usize, value: i32) -> i32 {
        if index == self.index {
            (value as u32 ^ self.mask) as i32
        } else {
            value
        }
    }
}

impl<F: Fn(usize, i32) -> i32> ActivationHook for F {
    fn on_read(&self, index: usize, value: i32) -> i32 {
        self(index, value)
    }
}

/// Execute one layer through the array model.
pub fn run_layer(
    layer: &Layer,
    input: &QTensor,
    cfg: &ArrayConfig,
    hook: &dyn ActivationHook,
) -> Result<(QTensor, CycleReport)> {
    cfg.validate()?;
    let out_shape = layer.output_shape(input.shape())?;
    let in_params = *input.params();
    let out_params = layer.output_params(&in_params);
    let x = input.data();
    let read = |i: usize| hook.on_read(i, x[i]);

    if !layer.kind.is_mac() {
        let data: Vec<i32> = match layer.kind {
            LayerKind::Maxpool2x2 => {
                let (w, c) = (input.shape()[1], input.shape()[2]);
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for oy in 0..out_shape[0] {
                    for ox in 0..out_shape[1] {
                        for ch in 0..c {
                            let base = (2 * oy * w + 2 * ox) * c + ch;
                            let window = [base, base + c, base + w * c, base + w * c + c];
                            out.push(window.iter().map(|&i| read(i)).max().unwrap());
                        }
                    }
                }
                out
            }
            LayerKind::Relu => (0..x.len()).map(|i| read(i).max(in_params.zero_point)).collect(),
            LayerKind::Flatten => (0..x.len()).map(read).collect(),
            _ => unreachable!(),
        };
        let report = CycleReport {
            mac_ops: 0,
            cycles: x.len().div_ceil(cfg.vector_width()) as u64,
            clock_hz: cfg.clock_hz,
        };
        return Ok((QTensor::from_parts(out_shape, data, out_params), report));
    }

    let schedule = lower_layer(layer, input.shape(), cfg)?;
    let weights = layer.weights().expect("MAC layer has weights").data();
    let multiplier = layer.requant_multiplier(&in_params).expect("MAC layer is quantized");
    let (m_rows, n_cols) = (schedule.m, schedule.n);

    // lowered activation (row, k) -> stored word index, None for padding
    let conv = match layer.kind {
        LayerKind::Conv2d(g) => Some((g, input.shape()[0], input.shape()[1], out_shape[1])),
        _ => None,
    };
    let source = |row: usize, k: usize| -> Option<usize> {
        match conv {
            None => Some(k),
            Some((g, h, w, ow)) => {
                let (oy, ox) = (row / ow, row % ow);
                let ci = k % g.in_channels;
                let kx = (k / g.in_channels) % g.kernel_w;
                let ky = k / (g.in_channels * g.kernel_w);
                let iy = (oy * g.stride + ky).checked_sub(g.padding)?;
                let ix = (ox * g.stride + kx).checked_sub(g.padding)?;
                (iy < h && ix < w).then(|| (iy * w + ix) * g.in_channels + ci)
            }
        }
    };

    let mut acc: Vec<i64> = (0..m_rows)
        .flat_map(|_| layer.biases().iter().map(|&b| i64::from(b)))
        .collect();
    for tile in &schedule.tiles {
        for row in 0..tile.stream_rows {
            let partial = &mut acc[row * n_cols..(row + 1) * n_cols];
            for k in tile.k_start..tile.k_end {
                let Some(src) = source(row, k) else { continue };
                let a = i64::from(read(src));
                if a == 0 {
                    continue;
                }
                let wrow = &weights[k * n_cols..(k + 1) * n_cols];
                for n in tile.n_start..tile.n_end {
                    partial[n] += a * i64::from(wrow[n]);
                }
            }
        }
    }
    let data = acc
        .into_iter()
        .map(|a| requantize_accumulator(a, multiplier, &out_params))
        .collect();
    let report = CycleReport {
        mac_ops: schedule.mac_ops(),
        cycles: schedule.cycles(cfg),
        clock_hz: cfg.clock_hz,
    };
    Ok((QTensor::from_parts(out_shape, data, out_params), report))
}

/// Run the whole network on the array model.
///
/// A fault flips its bits on every read of the designated word of the
/// designated layer's input buffer. A guard rewrites each guarded layer's
/// output before it is stored for the next layer.
pub fn run_network(
    net: &Network,
    input: &QTensor,
    cfg: &ArrayConfig,
    fault: Option<&FaultSite>,
    guard: Option<&GuardSpec>,
) -> Result<(Prediction, CycleReport)> {
    if input.shape() != net.input_shape() || input.params() != net.input_params() {
        return Err(Error::Shape(format!(
            "input {:?} does not match network input {:?}",
            input.shape(),
            net.input_shape()
        )));
    }
    let flip = match fault {
        Some(site) => Some((site.layer, BitFlipHook {
            index: site.activation_index,
            mask: site.validate(net)?,
        })),
        None => None,
    };
    let mut total = CycleReport::empty(cfg.clock_hz);
    let mut current = input.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        let (out, report) = match flip {
            Some((l, hook)) if l == i => run_layer(layer, &current, cfg, &hook)?,
            _ => run_layer(layer, &current, cfg, &IdentityHook)?,
        };
        total += report;
        current = match guard {
            Some(g) => {
                let (shape, params) = (out.shape().to_vec(), *out.params());
                let mut data = out.into_data();
                g.apply_layer(i, &mut data);
                QTensor::from_parts(shape, data, params)
            }
            None => out,
        };
    }
    Ok((Prediction::from_logits(&current), total))
}

/// Cycle report of one fault-free inference, without executing it.
pub fn network_cycles(net: &Network, cfg: &ArrayConfig) -> Result<CycleReport> {
    cfg.validate()?;
    let mut total = CycleReport::empty(cfg.clock_hz);
    for (layer, io) in net.layers().iter().zip(net.io()) {
        total += if layer.kind.is_mac() {
            let s = lower_layer(layer, &io.input_shape, cfg)?;
            CycleReport {
                mac_ops: s.mac_ops(),
                cycles: s.cycles(cfg),
                clock_hz: cfg.clock_hz,
            }
        } else {
            CycleReport {
                mac_ops: 0,
                cycles: io.input_len().div_ceil(cfg.vector_width()) as u64,
                clock_hz: cfg.clock_hz,
            }
        };
    }
    Ok(total)
}
