//! Per-layer activation range extraction and range-check mitigation.
//!
//! Each guarded layer keeps a lower and an upper bound in its output's
//! quantized domain. Two comparisons decide whether a freshly computed output
//! word is in range; out-of-range words are replaced according to the method.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{encoded_for, reference_trace, LabeledSet, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuardMethod {
    None,
    /// Replace with the lower bound.
    Method1,
    /// Replace with the upper bound.
    Method2,
    /// Replace with the nearest bound.
    Method3,
}

impl GuardMethod {
    pub const ALL: [GuardMethod; 4] = [
        GuardMethod::None,
        GuardMethod::Method1,
        GuardMethod::Method2,
        GuardMethod::Method3,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GuardMethod::None => "none",
            GuardMethod::Method1 => "method1",
            GuardMethod::Method2 => "method2",
            GuardMethod::Method3 => "method3",
        }
    }
}

impl fmt::Display for GuardMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuardMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "off" | "unprotected" => Ok(GuardMethod::None),
            "method1" | "m1" | "1" => Ok(GuardMethod::Method1),
            "method2" | "m2" | "2" => Ok(GuardMethod::Method2),
            "method3" | "m3" | "3" => Ok(GuardMethod::Method3),
            other => Err(Error::Config(format!("unknown guard method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub layer: usize,
    pub lower: i32,
    pub upper: i32,
}

impl LayerBounds {
    pub fn contains(&self, v: i32) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Range check applied to one output word.
#[inline]
pub fn apply_guard(value: i32, b: &LayerBounds, method: GuardMethod) -> i32 {
    if b.contains(value) {
        return value;
    }
    match method {
        GuardMethod::None => value,
        GuardMethod::Method1 => b.lower,
        GuardMethod::Method2 => b.upper,
        GuardMethod::Method3 => {
            if value < b.lower {
                b.lower
            } else {
                b.upper
            }
        }
    }
}

/// Guard configuration for a whole network. Every MAC layer is guarded.
#[derive(Debug, Clone, PartialEq)]
pub struct GuardSpec {
    method: GuardMethod,
    per_layer: Vec<Option<LayerBounds>>,
}

impl GuardSpec {
    pub fn new(net: &Network, method: GuardMethod, bounds: &[LayerBounds]) -> Result<Self> {
        let mut per_layer = vec![None; net.layers().len()];
        for b in bounds {
            let Some(io) = net.io().get(b.layer) else {
                return Err(Error::Config(format!("bounds for missing layer {}", b.layer)));
            };
            if !net.layers()[b.layer].kind.is_mac() {
                continue;
            }
            let p = io.output_params;
            if !(p.q_min <= b.lower && b.lower <= b.upper && b.upper <= p.q_max) {
                return Err(Error::Range(format!(
                    "layer {} bounds ({}, {}) not inside [{}, {}]",
                    b.layer, b.lower, b.upper, p.q_min, p.q_max
                )));
            }
            if per_layer[b.layer].replace(*b).is_some() {
                return Err(Error::Config(format!("duplicate bounds for layer {}", b.layer)));
            }
        }
        if method != GuardMethod::None {
            if let Some(i) = (0..per_layer.len())
                .find(|&i| net.layers()[i].kind.is_mac() && per_layer[i].is_none())
            {
                return Err(Error::Config(format!(
                    "no bounds for guarded layer {i} ({})",
                    net.layers()[i].name
                )));
            }
        }
        Ok(Self { method, per_layer })
    }

    pub fn method(&self) -> GuardMethod {
        self.method
    }

    pub fn bounds(&self, layer: usize) -> Option<&LayerBounds> {
        self.per_layer.get(layer).and_then(Option::as_ref)
    }

    pub fn guarded_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_layer
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.map(|_| i))
    }

    #[inline]
    pub fn apply(&self, layer: usize, value: i32) -> i32 {
        match (self.method, self.bounds(layer)) {
            (GuardMethod::None, _) | (_, None) => value,
            (m, Some(b)) => apply_guard(value, b, m),
        }
    }

    /// Guard a whole freshly computed layer output in place.
    pub fn apply_layer(&self, layer: usize, values: &mut [i32]) {
        if self.method == GuardMethod::None {
            return;
        }
        if let Some(b) = self.bounds(layer) {
            for v in values {
                *v = apply_guard(*v, b, self.method);
            }
        }
    }
}

/// Min/max of every layer's golden output over `validation`.
pub fn extract_ranges(net: &Network, validation: &LabeledSet) -> Result<Vec<LayerBounds>> {
    let data = encoded_for(net, validation)?;
    let mut bounds: Vec<LayerBounds> = (0..net.layers().len())
        .map(|layer| LayerBounds {
            layer,
            lower: i32::MAX,
            upper: i32::MIN,
        })
        .collect();
    for i in 0..data.len() {
        let (_, input) = data.sample(i)?;
        for (b, out) in bounds.iter_mut().zip(reference_trace(net, &input)?) {
            for &v in out.data() {
                b.lower = b.lower.min(v);
                b.upper = b.upper.max(v);
            }
        }
    }
    Ok(bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCoverage {
    pub layer: usize,
    pub name: String,
    pub activations: u64,
    pub below: u64,
    pub above: u64,
    pub out_of_range_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub layers: Vec<LayerCoverage>,
}

/// Fraction of golden `test` activations per layer falling outside `bounds`.
pub fn validate_ranges(bounds: &[LayerBounds], net: &Network, test: &LabeledSet) -> Result<CoverageReport> {
    let n = net.layers().len();
    let mut by_layer = vec![None; n];
    for b in bounds {
        if b.layer >= n {
            return Err(Error::Config(format!("bounds for missing layer {}", b.layer)));
        }
        by_layer[b.layer] = Some(*b);
    }
    if let Some(missing) = by_layer.iter().position(Option::is_none) {
        return Err(Error::Config(format!("no bounds for layer {missing}")));
    }
    let data = encoded_for(net, test)?;
    let mut layers: Vec<LayerCoverage> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerCoverage {
            layer: i,
            name: l.name.clone(),
            activations: 0,
            below: 0,
            above: 0,
            out_of_range_fraction: 0.0,
        })
        .collect();
    for s in 0..data.len() {
        let (_, input) = data.sample(s)?;
        for (i, out) in reference_trace(net, &input)?.iter().enumerate() {
            let b = by_layer[i].expect("checked above");
            let cov = &mut layers[i];
            cov.activations += out.len() as u64;
            for &v in out.data() {
                if v < b.lower {
                    cov.below += 1;
                } else if v > b.upper {
                    cov.above += 1;
                }
            }
        }
    }
    for cov in &mut layers {
        cov.out_of_range_fraction = (cov.below + cov.above) as f64 / cov.activations as f64;
    }
    Ok(CoverageReport { layers })
}

pub fn read_bounds(path: impl AsRef<Path>) -> Result<Vec<LayerBounds>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn bounds_to_json(bounds: &[LayerBounds]) -> String {
    let mut s = serde_json::to_string_pretty(bounds).expect("bounds serialize");
    s.push('\n');
    s
}

/// Published reference points the analytic model is reported next to.
pub const REFERENCE_ROWS: [&str; 2] = [
    "reference: range-check Method 3 adds less than 10% LUT overhead over the unprotected accelerator",
    "reference: full triple modular redundancy costs >200% (TMR) hardware overhead",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub name: String,
    pub word_bits: u32,
    pub accumulator_bits: u32,
    pub cost_units: u64,
    pub mac_lane_units: u64,
}

/// Analytic hardware cost of the range check.
///
/// Per guarded layer: two stored bound words, two subtractors of accumulator
/// width and one multiplexer select. Cost units count bit cells: `2b` for the
/// bounds, `2 * acc_bits` for the subtractors and `b * (mux_inputs - 1)` for
/// the output multiplexer. `relative_overhead` divides by the bit cells of one
/// MAC lane per guarded layer (`b_in * b_w` multiplier + accumulator adder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub method: GuardMethod,
    pub guarded_layers: usize,
    pub stored_words: u64,
    pub stored_bits: u64,
    pub subtractors: u64,
    pub subtractor_bits: u64,
    pub mux_selects: u64,
    pub mux_inputs: u32,
    pub cost_units: u64,
    pub mac_lane_units: u64,
    pub relative_overhead: f64,
    pub layers: Vec<LayerCost>,
    pub reference_rows: Vec<String>,
}

fn ceil_log2(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

pub fn guard_cost(net: &Network, method: GuardMethod) -> Result<CostSummary> {
    if method == GuardMethod::None {
        return Err(Error::Config("guard cost needs a protection method".into()));
    }
    let mux_inputs = if method == GuardMethod::Method3 { 3 } else { 2 };
    let mut layers = Vec::new();
    for (i, (layer, io)) in net.layers().iter().zip(net.io()).enumerate() {
        let Some(w) = layer.weights() else { continue };
        let fan_in = w.len() / io.output_shape.last().copied().unwrap_or(1);
        let b = io.output_params.bits;
        let acc = io.input_params.bits + w.params().bits + ceil_log2(fan_in);
        layers.push(LayerCost {
            layer: i,
            name: layer.name.clone(),
            word_bits: b,
            accumulator_bits: acc,
            cost_units: u64::from(2 * b + 2 * acc + b * (mux_inputs - 1)),
            mac_lane_units: u64::from(io.input_params.bits * w.params().bits + acc),
        });
    }
    let n = layers.len() as u64;
    let cost_units: u64 = layers.iter().map(|l| l.cost_units).sum();
    let mac_lane_units: u64 = layers.iter().map(|l| l.mac_lane_units).sum();
    Ok(CostSummary {
        method,
        guarded_layers: layers.len(),
        stored_words: 2 * n,
        stored_bits: layers.iter().map(|l| 2 * u64::from(l.word_bits)).sum(),
        subtractors: 2 * n,
        subtractor_bits: layers.iter().map(|l| 2 * u64::from(l.accumulator_bits)).sum(),
        mux_selects: n,
        mux_inputs,
        cost_units,
        mac_lane_units,
        relative_overhead: if mac_lane_units == 0 {
            0.0
        } else {
            cost_units as f64 / mac_lane_units as f64
        },
        layers,
        reference_rows: REFERENCE_ROWS.iter().map(|s| s.to_string()).collect(),
    })
}
