//! Random network builders and scalar oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use relab_core::netgraph::{ConvGeometry, LabeledSet, Layer, LayerKind, Network};
use relab_core::qtensor::{QTensor, QuantParams};

pub fn unsigned(scale: f64, z: i32, bits: u32) -> QuantParams {
    QuantParams::new(scale, z, bits, false).unwrap()
}

fn weights<R: Rng>(rng: &mut R, shape: Vec<usize>, bits: u32) -> QTensor {
    let p = QuantParams::signed(0.01, bits).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(p.q_min..=p.q_max)).collect();
    QTensor::new(shape, data, p).unwrap()
}

/// Output parameters that keep a MAC layer's results spread over the range.
fn mac_out<R: Rng>(rng: &mut R, input: &QuantParams, w: &QTensor, fan_in: usize, signed: bool) -> QuantParams {
    let bits = input.bits;
    let typical = (fan_in as f64).sqrt() * f64::from(input.q_max) * f64::from(w.params().q_max) / 2.0;
    let m = rng.random_range(0.3..3.0) * f64::from(input.q_max) / typical;
    let scale = input.scale * w.params().scale / m;
    if signed {
        QuantParams::signed(scale, bits).unwrap()
    } else {
        let z = if rng.random_bool(0.3) {
            rng.random_range(0..=input.q_max / 4)
        } else {
            0
        };
        unsigned(scale, z, bits)
    }
}

fn biases<R: Rng>(rng: &mut R, n: usize, fan_in: usize, input: &QuantParams, w: &QTensor) -> Vec<i32> {
    let span = ((fan_in as f64).sqrt() * f64::from(input.q_max) * f64::from(w.params().q_max) / 4.0)
        .min(f64::from(i32::MAX / 2)) as i32;
    (0..n).map(|_| rng.random_range(-span..=span)).collect()
}

pub struct RandomNet {
    pub net: Network,
    pub bits: u32,
}

/// A random stack of conv / relu / pool layers on an input of at most
/// `16 x 16 x 8`, followed by flatten and one or two dense layers.
pub fn random_network<R: Rng>(rng: &mut R) -> RandomNet {
    let bits = [4u32, 5, 6, 8, 8, 8, 12, 16][rng.random_range(0..8)];
    let h = rng.random_range(2..=16);
    let w = rng.random_range(2..=16);
    let c = rng.random_range(1..=8);
    let input_params = unsigned(1.0 / f64::from((1u32 << bits) - 1), 0, bits);
    let mut layers = Vec::new();
    let mut shape = vec![h, w, c];
    let mut params = input_params;
    let steps = rng.random_range(0..=3);
    for i in 0..steps {
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let layer = match rng.random_range(0..4) {
            0 | 1 => {
                let g = ConvGeometry {
                    kernel_h: rng.random_range(1..=3),
                    kernel_w: rng.random_range(1..=3),
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=1),
                    in_channels: c,
                    out_channels: rng.random_range(1..=8),
                };
                if g.output_hw(h, w).is_none() {
                    continue;
                }
                let wt = weights(rng, vec![g.kernel_h, g.kernel_w, c, g.out_channels], bits);
                let fan_in = g.lowered_k();
                let out = mac_out(rng, &params, &wt, fan_in, false);
                let b = biases(rng, g.out_channels, fan_in, &params, &wt);
                Layer::conv2d(format!("conv{i}"), g, wt, b, out).unwrap()
            }
            2 if h >= 2 && w >= 2 => Layer::maxpool2x2(format!("pool{i}")),
            _ => Layer::relu(format!("relu{i}")),
        };
        shape = layer.output_shape(&shape).unwrap();
        params = layer.output_params(&params);
        layers.push(layer);
    }
    layers.push(Layer::flatten("flatten"));
    let mut inputs: usize = shape.iter().product();
    let classes = rng.random_range(2..=10);
    if rng.random_bool(0.5) {
        let outputs = rng.random_range(2..=24);
        let wt = weights(rng, vec![inputs, outputs], bits);
        let out = mac_out(rng, &params, &wt, inputs, false);
        let b = biases(rng, outputs, inputs, &params, &wt);
        layers.push(Layer::dense("fc_hidden", inputs, outputs, wt, b, out).unwrap());
        params = out;
        if rng.random_bool(0.5) {
            layers.push(Layer::relu("fc_relu"));
        }
        inputs = outputs;
    }
    let wt = weights(rng, vec![inputs, classes], bits);
    let out = mac_out(rng, &params, &wt, inputs, true);
    let b = biases(rng, classes, inputs, &params, &wt);
    layers.push(Layer::dense("logits", inputs, classes, wt, b, out).unwrap());
    let net = Network::new("random", vec![h, w, c], input_params, classes, layers).unwrap();
    RandomNet { net, bits }
}

pub fn random_input<R: Rng>(rng: &mut R, net: &Network) -> QTensor {
    let p = *net.input_params();
    let data = (0..net.input_len()).map(|_| rng.random_range(p.q_min..=p.q_max)).collect();
    QTensor::new(net.input_shape().to_vec(), data, p).unwrap()
}

pub fn random_dataset<R: Rng>(rng: &mut R, net: &Network, n: usize) -> LabeledSet {
    let p = *net.input_params();
    let labels = (0..n).map(|_| rng.random_range(0..net.class_count()) as u8).collect();
    let pixels = (0..n * net.input_len()).map(|_| rng.random_range(p.q_min..=p.q_max)).collect();
    LabeledSet::new(net.input_shape().to_vec(), p, labels, pixels).unwrap()
}

/// Scalar brute-force layer oracle. It pads the input explicitly, evaluates
/// every output from the textbook definitions and requantizes with
/// half-away-from-zero rounding.
pub fn oracle_layer(layer: &Layer, input: &[i32], shape: &[usize], in_params: &QuantParams) -> Vec<i32> {
    let out_params = layer.output_params(in_params);
    let requant = |acc: i64| -> i32 {
        let m = layer.requant_multiplier(in_params).unwrap();
        let v = (acc as f64 * m).round() as i64 + i64::from(out_params.zero_point);
        v.clamp(i64::from(out_params.q_min), i64::from(out_params.q_max)) as i32
    };
    match layer.kind {
        LayerKind::Conv2d(g) => {
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let (ph, pw) = (h + 2 * g.padding, w + 2 * g.padding);
            let mut padded = vec![0i64; ph * pw * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        padded[((y + g.padding) * pw + x + g.padding) * c + ch] = i64::from(input[(y * w + x) * c + ch]);
                    }
                }
            }
            let oh = (ph - g.kernel_h) / g.stride + 1;
            let ow = (pw - g.kernel_w) / g.stride + 1;
            let wt = layer.weights().unwrap().data();
            let mut out = Vec::new();
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..g.out_channels {
                        let mut acc = i64::from(layer.biases()[co]);
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                for ci in 0..c {
                                    let a = padded[((oy * g.stride + ky) * pw + ox * g.stride + kx) * c + ci];
                                    let k = ((ky * g.kernel_w + kx) * c + ci) * g.out_channels + co;
                                    acc += a * i64::from(wt[k]);
                                }
                            }
                        }
                        out.push(requant(acc));
                    }
                }
            }
            out
        }
        LayerKind::Dense { inputs, outputs } => {
            let wt = layer.weights().unwrap().data();
            (0..outputs)
                .map(|o| {
                    let acc = (0..inputs).fold(i64::from(layer.biases()[o]), |acc, i| {
                        acc + i64::from(input[i]) * i64::from(wt[i * outputs + o])
                    });
                    requant(acc)
                })
                .collect()
        }
        LayerKind::Maxpool2x2 => {
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let mut out = Vec::new();
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    for ch in 0..c {
                        let mut best = i32::MIN;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best.max(input[((2 * oy + dy) * w + 2 * ox + dx) * c + ch]);
                            }
                        }
                        out.push(best);
                    }
                }
            }
            out
        }
        LayerKind::Relu => input.iter().map(|&v| if v < in_params.zero_point { in_params.zero_point } else { v }).collect(),
        LayerKind::Flatten => input.to_vec(),
    }
}

/// Run the oracle through the whole network, optionally flipping `mask` into
/// word `index` of layer `layer`'s input before that layer reads it. Returns
/// the logits.
pub fn oracle_network(net: &Network, input: &[i32], fault: Option<(usize, usize, u32)>, guard: Option<&relab_core::guard::GuardSpec>) -> Vec<i32> {
    let mut x = input.to_vec();
    for (i, (layer, io)) in net.layers().iter().zip(net.io()).enumerate() {
        if let Some((l, idx, mask)) = fault {
            if l == i {
                x[idx] = (x[idx] as u32 ^ mask) as i32;
            }
        }
        x = oracle_layer(layer, &x, &io.input_shape, &io.input_params);
        if let Some(g) = guard {
            for v in x.iter_mut() {
                *v = g.apply(i, *v);
            }
        }
    }
    x
}

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/lenet5")
}
