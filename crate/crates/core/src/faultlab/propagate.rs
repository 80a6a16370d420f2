//! Sparse fault propagation against cached golden executions.
//!
//! For every input the golden run is stored once: each layer's input buffer
//! (after the guard) and each MAC layer's accumulators. A fault then only
//! touches the words that differ from golden. A changed input word of a MAC
//! layer moves the accumulators in its receptive field by `delta * w`; the
//! affected outputs are requantized, guarded and compared with golden, and
//! only real differences move on to the next layer. Propagation stops as soon
//! as the difference set is empty.
//!
//! The result is identical to [`crate::systolic::run_network`] with the same
//! fault and guard, which the tests check element by element.

use rayon::prelude::*;

use super::FaultSite;
use crate::error::{Error, Result};
use crate::guard::GuardSpec;
use crate::netgraph::{encoded_for, requantize_accumulator, ConvGeometry, LabeledSet, LayerKind, Network, Prediction};
use crate::qtensor::{QTensor, QuantParams};
use crate::report::{classify_outcome, OutcomeFlags};

#[derive(Debug, Clone)]
enum Kernel {
    Conv {
        g: ConvGeometry,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        multiplier: f64,
        out: QuantParams,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        multiplier: f64,
        out: QuantParams,
    },
    Pool {
        w: usize,
        c: usize,
        oh: usize,
        ow: usize,
    },
    Relu {
        zero: i32,
    },
    Flatten,
}

#[derive(Debug)]
struct GoldenSample {
    label: u8,
    /// `buffers[i]` is layer `i`'s input; the last entry holds the logits.
    buffers: Vec<Vec<i32>>,
    /// Accumulators of MAC layers (empty for the others).
    accs: Vec<Vec<i64>>,
    prediction: Prediction,
}

/// Reusable per-thread buffers.
#[derive(Debug, Default)]
pub struct Scratch {
    changes: Vec<(usize, i32)>,
    next: Vec<(usize, i32)>,
    deltas: Vec<(usize, i64)>,
    dense: Vec<i64>,
    windows: Vec<usize>,
}

/// Aggregate outcome of one fault site over the whole dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteOutcome {
    pub inputs: u64,
    pub correct: u64,
    pub sdc1: u64,
    pub sdc5: u64,
    pub sdc10: u64,
    pub flags: Option<Vec<OutcomeFlags>>,
}

impl SiteOutcome {
    pub(crate) fn record(&mut self, flags: OutcomeFlags, correct: bool, keep: bool) {
        self.inputs += 1;
        self.correct += u64::from(correct);
        self.sdc1 += u64::from(flags.sdc1);
        self.sdc5 += u64::from(flags.sdc5);
        self.sdc10 += u64::from(flags.sdc10);
        if keep {
            self.flags.get_or_insert_with(Vec::new).push(flags);
        }
    }
}

/// Golden cache plus sparse fault propagation for one network, dataset and
/// guard configuration.
pub struct FaultSimulator<'a> {
    net: &'a Network,
    guard: Option<&'a GuardSpec>,
    kernels: Vec<Kernel>,
    samples: Vec<GoldenSample>,
    top_k: usize,
}

impl<'a> FaultSimulator<'a> {
    /// Run and cache the golden execution of every sample. Uses the current
    /// rayon pool.
    pub fn new(net: &'a Network, data: &LabeledSet, guard: Option<&'a GuardSpec>) -> Result<Self> {
        let data = encoded_for(net, data)?;
        let kernels = net
            .layers()
            .iter()
            .zip(net.io())
            .map(|(layer, io)| {
                Ok(match layer.kind {
                    LayerKind::Conv2d(g) => Kernel::Conv {
                        g,
                        h: io.input_shape[0],
                        w: io.input_shape[1],
                        oh: io.output_shape[0],
                        ow: io.output_shape[1],
                        multiplier: layer
                            .requant_multiplier(&io.input_params)
                            .ok_or_else(|| Error::Config(format!("{} is not quantized", layer.name)))?,
                        out: io.output_params,
                    },
                    LayerKind::Dense { inputs, outputs } => Kernel::Dense {
                        inputs,
                        outputs,
                        multiplier: layer
                            .requant_multiplier(&io.input_params)
                            .ok_or_else(|| Error::Config(format!("{} is not quantized", layer.name)))?,
                        out: io.output_params,
                    },
                    LayerKind::Maxpool2x2 => Kernel::Pool {
                        w: io.input_shape[1],
                        c: io.input_shape[2],
                        oh: io.output_shape[0],
                        ow: io.output_shape[1],
                    },
                    LayerKind::Relu => Kernel::Relu {
                        zero: io.input_params.zero_point,
                    },
                    LayerKind::Flatten => Kernel::Flatten,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sim = Self {
            net,
            guard,
            kernels,
            samples: Vec::new(),
            top_k: net.class_count().min(5),
        };
        let samples = (0..data.len())
            .into_par_iter()
            .map(|i| sim.golden(data.labels()[i], data.pixels(i)))
            .collect();
        sim.samples = samples;
        Ok(sim)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The `k` used for SDC-5 (`min(5, class_count)`).
    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn golden_prediction(&self, sample: usize) -> &Prediction {
        &self.samples[sample].prediction
    }

    pub fn golden_correct(&self) -> u64 {
        self.samples
            .iter()
            .filter(|s| s.prediction.top1 == usize::from(s.label))
            .count() as u64
    }

    fn guard_value(&self, layer: usize, v: i32) -> i32 {
        match self.guard {
            Some(g) => g.apply(layer, v),
            None => v,
        }
    }

    fn golden(&self, label: u8, pixels: &[i32]) -> GoldenSample {
        let n = self.kernels.len();
        let mut buffers = Vec::with_capacity(n + 1);
        let mut accs = Vec::with_capacity(n);
        buffers.push(pixels.to_vec());
        for (i, kernel) in self.kernels.iter().enumerate() {
            let layer = &self.net.layers()[i];
            let x = &buffers[i];
            let (acc, mut out) = match *kernel {
                Kernel::Conv {
                    g,
                    h,
                    w,
                    oh,
                    ow,
                    multiplier,
                    out,
                } => {
                    let weights = layer.weights().expect("conv weights").data();
                    let co_n = g.out_channels;
                    let mut acc: Vec<i64> = (0..oh * ow)
                        .flat_map(|_| layer.biases().iter().map(|&b| i64::from(b)))
                        .collect();
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let dst = &mut acc[(oy * ow + ox) * co_n..(oy * ow + ox + 1) * co_n];
                            for ky in 0..g.kernel_h {
                                let Some(iy) = (oy * g.stride + ky).checked_sub(g.padding).filter(|&v| v < h) else {
                                    continue;
                                };
                                for kx in 0..g.kernel_w {
                                    let Some(ix) = (ox * g.stride + kx).checked_sub(g.padding).filter(|&v| v < w) else {
                                        continue;
                                    };
                                    for ci in 0..g.in_channels {
                                        let a = i64::from(x[(iy * w + ix) * g.in_channels + ci]);
                                        if a == 0 {
                                            continue;
                                        }
                                        let base = ((ky * g.kernel_w + kx) * g.in_channels + ci) * co_n;
                                        for (d, &wv) in dst.iter_mut().zip(&weights[base..base + co_n]) {
                                            *d += a * i64::from(wv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let vals = acc.iter().map(|&a| requantize_accumulator(a, multiplier, &out)).collect();
                    (acc, vals)
                }
                Kernel::Dense {
                    inputs,
                    outputs,
                    multiplier,
                    out,
                } => {
                    let weights = layer.weights().expect("dense weights").data();
                    let mut acc: Vec<i64> = layer.biases().iter().map(|&b| i64::from(b)).collect();
                    for i in 0..inputs {
                        let a = i64::from(x[i]);
                        if a == 0 {
                            continue;
                        }
                        for (d, &wv) in acc.iter_mut().zip(&weights[i * outputs..(i + 1) * outputs]) {
                            *d += a * i64::from(wv);
                        }
                    }
                    let vals = acc.iter().map(|&a| requantize_accumulator(a, multiplier, &out)).collect();
                    (acc, vals)
                }
                Kernel::Pool { w, c, oh, ow } => {
                    let mut vals = Vec::with_capacity(oh * ow * c);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let base = (2 * oy * w + 2 * ox) * c + ch;
                                vals.push(x[base].max(x[base + c]).max(x[base + w * c]).max(x[base + w * c + c]));
                            }
                        }
                    }
                    (Vec::new(), vals)
                }
                Kernel::Relu { zero } => (Vec::new(), x.iter().map(|&v| v.max(zero)).collect()),
                Kernel::Flatten => (Vec::new(), x.clone()),
            };
            if let Some(g) = self.guard {
                g.apply_layer(i, &mut out);
            }
            accs.push(acc);
            buffers.push(out);
        }
        let prediction = self.prediction_from(buffers.last().expect("logits"));
        GoldenSample {
            label,
            buffers,
            accs,
            prediction,
        }
    }

    fn prediction_from(&self, logits: &[i32]) -> Prediction {
        let io = self.net.io().last().expect("network has layers");
        Prediction::from_logits(&QTensor::from_parts(io.output_shape.clone(), logits.to_vec(), io.output_params))
    }

    /// Faulty prediction for one sample, or `None` when the fault is masked
    /// before reaching the logits.
    pub fn faulty_prediction(&self, sample: usize, site: &FaultSite, mask: u32, scratch: &mut Scratch) -> Option<Prediction> {
        let golden = &self.samples[sample];
        let Scratch {
            changes,
            next,
            deltas,
            dense,
            windows,
        } = scratch;
        changes.clear();
        let stored = golden.buffers[site.layer][site.activation_index];
        changes.push((site.activation_index, (stored as u32 ^ mask) as i32));

        for li in site.layer..self.kernels.len() {
            let x = &golden.buffers[li];
            let y = &golden.buffers[li + 1];
            next.clear();
            match self.kernels[li] {
                Kernel::Conv {
                    g,
                    w,
                    oh,
                    ow,
                    multiplier,
                    out,
                    ..
                } => {
                    let weights = self.net.layers()[li].weights().expect("conv weights").data();
                    let co_n = g.out_channels;
                    deltas.clear();
                    for &(idx, new) in changes.iter() {
                        let delta = i64::from(new) - i64::from(x[idx]);
                        let ci = idx % g.in_channels;
                        let pix = idx / g.in_channels;
                        let (iy, ix) = (pix / w + g.padding, pix % w + g.padding);
                        for ky in 0..g.kernel_h {
                            let Some(ty) = iy.checked_sub(ky) else { break };
                            if ty % g.stride != 0 || ty / g.stride >= oh {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let Some(tx) = ix.checked_sub(kx) else { break };
                                if tx % g.stride != 0 || tx / g.stride >= ow {
                                    continue;
                                }
                                let obase = (ty / g.stride * ow + tx / g.stride) * co_n;
                                let wbase = ((ky * g.kernel_w + kx) * g.in_channels + ci) * co_n;
                                for co in 0..co_n {
                                    deltas.push((obase + co, delta * i64::from(weights[wbase + co])));
                                }
                            }
                        }
                    }
                    deltas.sort_unstable_by_key(|d| d.0);
                    let acc = &golden.accs[li];
                    let mut i = 0;
                    while i < deltas.len() {
                        let o = deltas[i].0;
                        let mut sum = 0i64;
                        while i < deltas.len() && deltas[i].0 == o {
                            sum += deltas[i].1;
                            i += 1;
                        }
                        let v = self.guard_value(li, requantize_accumulator(acc[o] + sum, multiplier, &out));
                        if v != y[o] {
                            next.push((o, v));
                        }
                    }
                }
                Kernel::Dense {
                    outputs,
                    multiplier,
                    out,
                    ..
                } => {
                    let weights = self.net.layers()[li].weights().expect("dense weights").data();
                    dense.clear();
                    dense.extend_from_slice(&golden.accs[li]);
                    for &(idx, new) in changes.iter() {
                        let delta = i64::from(new) - i64::from(x[idx]);
                        for (d, &wv) in dense.iter_mut().zip(&weights[idx * outputs..(idx + 1) * outputs]) {
                            *d += delta * i64::from(wv);
                        }
                    }
                    for (o, &a) in dense.iter().enumerate() {
                        let v = self.guard_value(li, requantize_accumulator(a, multiplier, &out));
                        if v != y[o] {
                            next.push((o, v));
                        }
                    }
                }
                Kernel::Pool { w, c, oh, ow } => {
                    changes.sort_unstable_by_key(|c| c.0);
                    windows.clear();
                    for &(idx, _) in changes.iter() {
                        let ch = idx % c;
                        let pix = idx / c;
                        let (oy, ox) = (pix / w / 2, pix % w / 2);
                        if oy < oh && ox < ow {
                            windows.push((oy * ow + ox) * c + ch);
                        }
                    }
                    windows.sort_unstable();
                    windows.dedup();
                    let lookup = |i: usize| match changes.binary_search_by_key(&i, |c| c.0) {
                        Ok(p) => changes[p].1,
                        Err(_) => x[i],
                    };
                    for &o in windows.iter() {
                        let ch = o % c;
                        let pix = o / c;
                        let (oy, ox) = (pix / ow, pix % ow);
                        let base = (2 * oy * w + 2 * ox) * c + ch;
                        let v = lookup(base).max(lookup(base + c)).max(lookup(base + w * c)).max(lookup(base + w * c + c));
                        let v = self.guard_value(li, v);
                        if v != y[o] {
                            next.push((o, v));
                        }
                    }
                }
                Kernel::Relu { zero } => {
                    for &(idx, new) in changes.iter() {
                        let v = self.guard_value(li, new.max(zero));
                        if v != y[idx] {
                            next.push((idx, v));
                        }
                    }
                }
                Kernel::Flatten => {
                    for &(idx, new) in changes.iter() {
                        let v = self.guard_value(li, new);
                        if v != y[idx] {
                            next.push((idx, v));
                        }
                    }
                }
            }
            if next.is_empty() {
                return None;
            }
            std::mem::swap(changes, next);
        }
        let mut logits = golden.buffers.last().expect("logits").clone();
        for &(idx, v) in changes.iter() {
            logits[idx] = v;
        }
        Some(self.prediction_from(&logits))
    }

    /// Evaluate one persistent fault over every cached sample.
    pub fn evaluate_site(&self, site: &FaultSite, keep_flags: bool, scratch: &mut Scratch) -> Result<SiteOutcome> {
        let mask = site.validate(self.net)?;
        let mut outcome = SiteOutcome::default();
        for s in 0..self.samples.len() {
            self.record_sample(s, Some((site, mask)), keep_flags, scratch, &mut outcome);
        }
        Ok(outcome)
    }

    pub(crate) fn record_sample(
        &self,
        sample: usize,
        fault: Option<(&FaultSite, u32)>,
        keep_flags: bool,
        scratch: &mut Scratch,
        outcome: &mut SiteOutcome,
    ) {
        let golden = &self.samples[sample];
        let label = usize::from(golden.label);
        match fault.and_then(|(site, mask)| self.faulty_prediction(sample, site, mask, scratch)) {
            Some(faulty) => {
                let flags = classify_outcome(&golden.prediction, &faulty);
                outcome.record(flags, faulty.top1 == label, keep_flags);
            }
            None => outcome.record(OutcomeFlags::default(), golden.prediction.top1 == label, keep_flags),
        }
    }
}
