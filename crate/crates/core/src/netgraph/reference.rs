//! Direct nested-loop integer inference. This is the golden path every other
//! engine is checked against, so it stays deliberately plain.

use std::borrow::Cow;

use super::{LabeledSet, Layer, LayerKind, Network, Prediction};
use crate::error::{Error, Result};
use crate::qtensor::{QTensor, QuantParams};

/// Map an accumulator to the output domain:
/// `clamp(round_half_away(acc * M) + Z_out, q_min, q_max)`.
#[inline]
pub fn requantize_accumulator(acc: i64, multiplier: f64, out: &QuantParams) -> i32 {
    let v = (acc as f64 * multiplier).round() + f64::from(out.zero_point);
    v.clamp(f64::from(out.q_min), f64::from(out.q_max)) as i32
}

/// Execute a single layer on `input`.
pub fn forward_layer(layer: &Layer, input: &QTensor) -> Result<QTensor> {
    let out_shape = layer.output_shape(input.shape())?;
    let in_params = *input.params();
    let out_params = layer.output_params(&in_params);
    let x = input.data();
    let data = match layer.kind {
        LayerKind::Conv2d(g) => {
            let (h, w) = (input.shape()[0] as isize, input.shape()[1] as isize);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let weights = layer.weights().expect("conv layer has weights").data();
            let m = layer.requant_multiplier(&in_params).expect("conv layer is quantized");
            let mut out = Vec::with_capacity(oh * ow * g.out_channels);
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..g.out_channels {
                        let mut acc = i64::from(layer.biases()[co]);
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= w {
                                    continue;
                                }
                                for ci in 0..g.in_channels {
                                    let a = x[(iy as usize * w as usize + ix as usize) * g.in_channels + ci];
                                    let wv = weights[((ky * g.kernel_w + kx) * g.in_channels + ci) * g.out_channels + co];
                                    acc += i64::from(a) * i64::from(wv);
                                }
                            }
                        }
                        out.push(requantize_accumulator(acc, m, &out_params));
                    }
                }
            }
            out
        }
        LayerKind::Dense { inputs, outputs } => {
            let weights = layer.weights().expect("dense layer has weights").data();
            let m = layer.requant_multiplier(&in_params).expect("dense layer is quantized");
            (0..outputs)
                .map(|o| {
                    let mut acc = i64::from(layer.biases()[o]);
                    for i in 0..inputs {
                        acc += i64::from(x[i]) * i64::from(weights[i * outputs + o]);
                    }
                    requantize_accumulator(acc, m, &out_params)
                })
                .collect()
        }
        LayerKind::Maxpool2x2 => {
            let (w, c) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let mut out = Vec::with_capacity(oh * ow * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let at = |dy: usize, dx: usize| x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                    }
                }
            }
            out
        }
        LayerKind::Relu => x.iter().map(|&v| v.max(in_params.zero_point)).collect(),
        LayerKind::Flatten => x.to_vec(),
    };
    Ok(QTensor::from_parts(out_shape, data, out_params))
}

fn check_input(net: &Network, input: &QTensor) -> Result<()> {
    if input.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "input {:?}, network expects {:?}",
            input.shape(),
            net.input_shape()
        )));
    }
    if input.params() != net.input_params() {
        return Err(Error::Input(
            "input is not quantized with the network's input parameters".into(),
        ));
    }
    Ok(())
}

/// Run every layer, letting `store` rewrite each layer's output before the
/// next layer reads it. Returns all layer outputs in order.
pub fn trace_with<F>(net: &Network, input: &QTensor, mut store: F) -> Result<Vec<QTensor>>
where
    F: FnMut(usize, &mut [i32]),
{
    check_input(net, input)?;
    let mut outputs: Vec<QTensor> = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let prev = outputs.last().unwrap_or(input);
        let out = forward_layer(layer, prev)?;
        let (shape, params) = (out.shape().to_vec(), *out.params());
        let mut data = out.into_data();
        store(i, &mut data);
        outputs.push(QTensor::new(shape, data, params)?);
    }
    Ok(outputs)
}

pub fn reference_trace(net: &Network, input: &QTensor) -> Result<Vec<QTensor>> {
    trace_with(net, input, |_, _| {})
}

pub fn reference_infer(net: &Network, input: &QTensor) -> Result<Prediction> {
    let outputs = reference_trace(net, input)?;
    Ok(Prediction::from_logits(outputs.last().expect("network has layers")))
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(net: &Network, dataset: &LabeledSet) -> Result<f64> {
    let data = encoded_for(net, dataset)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let (label, input) = data.sample(i)?;
        if reference_infer(net, &input)?.top1 == usize::from(label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Validate a dataset against `net` and convert it into the network's input
/// domain when it was stored in a different one.
pub fn encoded_for<'a>(net: &Network, data: &'a LabeledSet) -> Result<Cow<'a, LabeledSet>> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    if data.sample_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset samples {:?}, network expects {:?}",
            data.sample_shape(),
            net.input_shape()
        )));
    }
    if let Some(bad) = data.labels().iter().find(|&&l| usize::from(l) >= net.class_count()) {
        return Err(Error::Input(format!(
            "label {bad} outside {} classes",
            net.class_count()
        )));
    }
    if data.params() == net.input_params() {
        Ok(Cow::Borrowed(data))
    } else {
        Ok(Cow::Owned(data.requantized(*net.input_params())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::ConvGeometry;

    fn unit() -> QuantParams {
        QuantParams::unsigned(1.0, 8).unwrap()
    }

    #[test]
    fn requantization_rounds_half_away_and_clamps() {
        let p = unit();
        assert_eq!(requantize_accumulator(5, 0.5, &p), 3);
        assert_eq!(requantize_accumulator(-5, 0.5, &p), 0);
        assert_eq!(requantize_accumulator(1000, 1.0, &p), 255);
        let s = QuantParams::signed(1.0, 8).unwrap();
        assert_eq!(requantize_accumulator(-5, 0.5, &s), -3);
        assert_eq!(requantize_accumulator(-1000, 1.0, &s), -127);
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let g = ConvGeometry {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            in_channels: 1,
            out_channels: 1,
        };
        let w = QTensor::new(vec![1, 1, 1, 1], vec![1], QuantParams::signed(1.0, 8).unwrap()).unwrap();
        let conv = Layer::conv2d("id", g, w, vec![0], unit()).unwrap();
        let input = QTensor::new(vec![2, 3, 1], vec![0, 1, 2, 100, 254, 255], unit()).unwrap();
        assert_eq!(forward_layer(&conv, &input).unwrap(), input);
    }

    #[test]
    fn padded_conv_skips_outside_taps() {
        let g = ConvGeometry {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 1,
            in_channels: 1,
            out_channels: 1,
        };
        let w = QTensor::new(vec![3, 3, 1, 1], vec![1; 9], QuantParams::signed(1.0, 8).unwrap()).unwrap();
        let conv = Layer::conv2d("box", g, w, vec![0], unit()).unwrap();
        let input = QTensor::new(vec![2, 2, 1], vec![1, 2, 3, 4], unit()).unwrap();
        let out = forward_layer(&conv, &input).unwrap();
        assert_eq!(out.data(), &[10, 10, 10, 10]);
    }

    #[test]
    fn pool_and_relu() {
        let input = QTensor::new(vec![2, 2, 2], vec![1, 9, 4, 2, 3, 7, 8, 0], unit()).unwrap();
        let out = forward_layer(&Layer::maxpool2x2("p"), &input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2]);
        assert_eq!(out.data(), &[8, 9]);
        let relu = forward_layer(&Layer::relu("r"), &input).unwrap();
        assert_eq!(relu, input);
    }

    #[test]
    fn zero_input_ties_to_class_zero() {
        let w = QTensor::new(vec![4, 3], vec![1, -2, 3, 4, 5, -6, 7, 8, 9, 1, 1, 1], QuantParams::signed(1.0, 8).unwrap()).unwrap();
        let logits = QuantParams::signed(1.0, 8).unwrap();
        let net = Network::new("n", vec![4], unit(), 3, vec![Layer::dense("fc", 4, 3, w, vec![0; 3], logits).unwrap()]).unwrap();
        let p = reference_infer(&net, &QTensor::zeros(vec![4], unit()).unwrap()).unwrap();
        assert_eq!(p.top1, 0);
        assert!(p.logits.iter().all(|&l| l == 0.0));
        assert!(reference_infer(&net, &QTensor::zeros(vec![5], unit()).unwrap()).is_err());
    }
}
