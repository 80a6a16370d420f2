//! Activation fault model, statistical campaign sizing and the campaign runner.
//!
//! The fault population is every `(stored activation word, bit)` pair of the
//! eligible layer input buffers. Layer 0's input buffer is the network input.

mod campaign;
mod propagate;

pub use campaign::{
    repetition_rng, run_campaign, CampaignConfig, CampaignResult, FaultPersistence, LayerInfo,
    RepetitionRecord,
};
pub use propagate::{FaultSimulator, Scratch, SiteOutcome};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, Network};
use crate::qtensor::bit_mask;

/// A persistent fault: bits flipped in one stored word of a layer's input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSite {
    pub layer: usize,
    pub activation_index: usize,
    pub bit_positions: Vec<u32>,
}

impl FaultSite {
    pub fn new(layer: usize, activation_index: usize, mut bit_positions: Vec<u32>) -> Self {
        bit_positions.sort_unstable();
        Self {
            layer,
            activation_index,
            bit_positions,
        }
    }

    pub fn single(layer: usize, activation_index: usize, bit: u32) -> Self {
        Self::new(layer, activation_index, vec![bit])
    }

    /// Check the site against `net` and return its XOR mask.
    pub fn validate(&self, net: &Network) -> Result<u32> {
        let io = net.io().get(self.layer).ok_or_else(|| {
            Error::Config(format!(
                "fault layer {} outside {} layers",
                self.layer,
                net.layers().len()
            ))
        })?;
        if self.activation_index >= io.input_len() {
            return Err(Error::Config(format!(
                "fault index {} outside the {} words of layer {}'s input",
                self.activation_index,
                io.input_len(),
                self.layer
            )));
        }
        if self.bit_positions.is_empty() {
            return Err(Error::Config("fault flips no bits".into()));
        }
        bit_mask(&self.bit_positions, io.input_params.bits)
    }
}

/// Which layer kinds contribute their input buffer to the fault population.
///
/// A flatten layer's input is the same stored buffer its consumer reads, so
/// it is excluded by default to avoid counting that buffer twice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionMask {
    pub conv2d: bool,
    pub dense: bool,
    pub maxpool2x2: bool,
    pub relu: bool,
    pub flatten: bool,
}

impl Default for InclusionMask {
    fn default() -> Self {
        Self {
            conv2d: true,
            dense: true,
            maxpool2x2: true,
            relu: true,
            flatten: false,
        }
    }
}

impl InclusionMask {
    pub fn includes(&self, kind: &LayerKind) -> bool {
        match kind {
            LayerKind::Conv2d(_) => self.conv2d,
            LayerKind::Dense { .. } => self.dense,
            LayerKind::Maxpool2x2 => self.maxpool2x2,
            LayerKind::Relu => self.relu,
            LayerKind::Flatten => self.flatten,
        }
    }
}

/// Injectable words per eligible layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    /// `(layer index, words in its input buffer)` for eligible layers.
    pub layers: Vec<(usize, usize)>,
    pub words: u64,
    pub bits: u32,
}

impl Population {
    pub fn new(net: &Network, bits: u32, mask: &InclusionMask) -> Self {
        let layers: Vec<(usize, usize)> = net
            .layers()
            .iter()
            .zip(net.io())
            .enumerate()
            .filter(|(_, (l, _))| mask.includes(&l.kind))
            .map(|(i, (_, io))| (i, io.input_len()))
            .collect();
        let words = layers.iter().map(|(_, n)| *n as u64).sum();
        Self { layers, words, bits }
    }

    /// `N = words * b`.
    pub fn size(&self) -> u64 {
        self.words * u64::from(self.bits)
    }

    /// Uniform draw over all `(word, bit)` pairs; `k > 1` flips `k` distinct
    /// bits of the chosen word.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: u32) -> Result<FaultSite> {
        if k == 0 || k > self.bits {
            return Err(Error::Config(format!(
                "cannot flip {k} bits of a {}-bit word",
                self.bits
            )));
        }
        if self.words == 0 {
            return Err(Error::Config("fault population is empty".into()));
        }
        let mut word = rng.random_range(0..self.words);
        let (layer, index) = self
            .layers
            .iter()
            .find_map(|&(layer, n)| {
                if word < n as u64 {
                    Some((layer, word as usize))
                } else {
                    word -= n as u64;
                    None
                }
            })
            .expect("word drawn below the population size");
        let bits = if k == 1 {
            vec![rng.random_range(0..self.bits)]
        } else {
            index::sample(rng, self.bits as usize, k as usize)
                .into_iter()
                .map(|b| b as u32)
                .collect()
        };
        Ok(FaultSite::new(layer, index, bits))
    }
}

/// Total injectable bits `N` for activation width `bits`.
pub fn population_size(net: &Network, bits: u32, mask: &InclusionMask) -> u64 {
    Population::new(net, bits, mask).size()
}

pub fn sample_fault<R: Rng + ?Sized>(
    rng: &mut R,
    net: &Network,
    bits: u32,
    k: u32,
    mask: &InclusionMask,
) -> Result<FaultSite> {
    Population::new(net, bits, mask).sample(rng, k)
}

/// Statistical fault-injection sizing for a finite population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub population: u64,
    /// Normal quantile of the confidence level (1.96 for 95%).
    pub t: f64,
    pub error_margin: f64,
    pub p: f64,
    /// Repetitions to run.
    pub n: u64,
}

pub const DEFAULT_T: f64 = 1.96;
pub const DEFAULT_ERROR_MARGIN: f64 = 0.01;
pub const DEFAULT_P: f64 = 0.5;

impl SamplingPlan {
    pub fn new(population: u64, t: f64, error_margin: f64, p: f64) -> Result<Self> {
        let mut plan = Self {
            population,
            t,
            error_margin,
            p,
            n: 0,
        };
        plan.n = sample_size(&plan)?;
        Ok(plan)
    }

    pub fn with_defaults(population: u64) -> Result<Self> {
        Self::new(population, DEFAULT_T, DEFAULT_ERROR_MARGIN, DEFAULT_P)
    }

    /// A plan that injects nothing; the campaign reduces to the golden run.
    pub fn disabled(population: u64) -> Self {
        Self {
            population,
            t: DEFAULT_T,
            error_margin: DEFAULT_ERROR_MARGIN,
            p: DEFAULT_P,
            n: 0,
        }
    }

    /// Cap the repetition count below the statistically required one.
    pub fn capped(mut self, max: u64) -> Self {
        self.n = self.n.min(max);
        self
    }
}

/// `n = ceil(N / (1 + e^2 (N - 1) / (t^2 p (1 - p))))`, clamped to `[1, N]`.
pub fn sample_size(plan: &SamplingPlan) -> Result<u64> {
    let SamplingPlan {
        population: n_pop,
        t,
        error_margin: e,
        p,
        ..
    } = *plan;
    if n_pop == 0 {
        return Err(Error::Config("population is empty".into()));
    }
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::Config(format!("error margin {e} outside (0, 1)")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("p = {p} outside (0, 1)")));
    }
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!("normal quantile t = {t} must be > 0")));
    }
    let big_n = n_pop as f64;
    let n = big_n / (1.0 + e * e * (big_n - 1.0) / (t * t * p * (1.0 - p)));
    // an exact integer must not be pushed up by rounding noise
    let r = n.round();
    let n = if (n - r).abs() <= 1e-9 * r.max(1.0) { r } else { n.ceil() };
    Ok((n as u64).clamp(1, n_pop))
}
