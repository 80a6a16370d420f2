//! Network description, interchange formats and the direct reference engine.
//!
//! Feature maps are laid out `[height, width, channels]`, conv weights
//! `[kernel_h, kernel_w, in_channels, out_channels]` and dense weights
//! `[inputs, outputs]`, all row-major. Biases live in the accumulator domain
//! (scale `S_in * S_w`).

mod dataset;
mod format;
mod reference;

pub use dataset::LabeledSet;
pub use format::{load_model, save_model, FORMAT_VERSION};
pub use reference::{
    encoded_for, evaluate, forward_layer, reference_infer, reference_trace, requantize_accumulator, trace_with,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtensor::{QTensor, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    /// Rows of the im2col-lowered weight matrix.
    pub fn lowered_k(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Option<(usize, usize)> {
        let h = in_h + 2 * self.padding;
        let w = in_w + 2 * self.padding;
        if h < self.kernel_h || w < self.kernel_w || self.stride == 0 {
            return None;
        }
        Some((
            (h - self.kernel_h) / self.stride + 1,
            (w - self.kernel_w) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(ConvGeometry),
    Dense { inputs: usize, outputs: usize },
    Maxpool2x2,
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Maxpool2x2 => "maxpool2x2",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Layers that run on the MAC array.
    pub fn is_mac(&self) -> bool {
        matches!(self, LayerKind::Conv2d(_) | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    weights: Option<QTensor>,
    biases: Vec<i32>,
    out_params: Option<QuantParams>,
}

impl Layer {
    pub fn conv2d(
        name: impl Into<String>,
        geometry: ConvGeometry,
        weights: QTensor,
        biases: Vec<i32>,
        out_params: QuantParams,
    ) -> Result<Self> {
        let name = name.into();
        let g = geometry;
        if g.kernel_h == 0 || g.kernel_w == 0 || g.stride == 0 || g.in_channels == 0 || g.out_channels == 0 {
            return Err(Error::Config(format!("{name}: conv geometry has a zero extent")));
        }
        let expected = [g.kernel_h, g.kernel_w, g.in_channels, g.out_channels];
        if weights.shape() != expected {
            return Err(Error::Shape(format!(
                "{name}: conv weights {:?}, geometry needs {expected:?}",
                weights.shape()
            )));
        }
        if biases.len() != g.out_channels {
            return Err(Error::Shape(format!(
                "{name}: {} biases for {} output channels",
                biases.len(),
                g.out_channels
            )));
        }
        Ok(Self {
            name,
            kind: LayerKind::Conv2d(geometry),
            weights: Some(weights),
            biases,
            out_params: Some(out_params),
        })
    }

    pub fn dense(
        name: impl Into<String>,
        inputs: usize,
        outputs: usize,
        weights: QTensor,
        biases: Vec<i32>,
        out_params: QuantParams,
    ) -> Result<Self> {
        let name = name.into();
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!("{name}: dense layer with a zero extent")));
        }
        if weights.shape() != [inputs, outputs] {
            return Err(Error::Shape(format!(
                "{name}: dense weights {:?}, geometry needs [{inputs}, {outputs}]",
                weights.shape()
            )));
        }
        if biases.len() != outputs {
            return Err(Error::Shape(format!(
                "{name}: {} biases for {outputs} outputs",
                biases.len()
            )));
        }
        Ok(Self {
            name,
            kind: LayerKind::Dense { inputs, outputs },
            weights: Some(weights),
            biases,
            out_params: Some(out_params),
        })
    }

    fn plain(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            weights: None,
            biases: Vec::new(),
            out_params: None,
        }
    }

    pub fn maxpool2x2(name: impl Into<String>) -> Self {
        Self::plain(name, LayerKind::Maxpool2x2)
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::plain(name, LayerKind::Relu)
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::plain(name, LayerKind::Flatten)
    }

    pub fn weights(&self) -> Option<&QTensor> {
        self.weights.as_ref()
    }

    pub fn biases(&self) -> &[i32] {
        &self.biases
    }

    /// Output parameters; layers off the MAC array pass their input's through.
    pub fn output_params(&self, input: &QuantParams) -> QuantParams {
        self.out_params.unwrap_or(*input)
    }

    /// `M = S_in * S_w / S_out` for MAC layers.
    pub fn requant_multiplier(&self, input: &QuantParams) -> Option<f64> {
        let w = self.weights.as_ref()?.params();
        let out = self.out_params?;
        Some(input.scale * w.scale / out.scale)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::Shape(format!(
                "{} ({}): input {input:?} {what}",
                self.name,
                self.kind.tag()
            )))
        };
        match self.kind {
            LayerKind::Conv2d(g) => {
                let [h, w, c] = input else {
                    return mismatch("is not [h, w, c]");
                };
                if *c != g.in_channels {
                    return mismatch(&format!("has {c} channels, expected {}", g.in_channels));
                }
                match g.output_hw(*h, *w) {
                    Some((oh, ow)) => Ok(vec![oh, ow, g.out_channels]),
                    None => mismatch("is smaller than the kernel"),
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return mismatch(&format!("does not match [{inputs}]"));
                }
                Ok(vec![outputs])
            }
            LayerKind::Maxpool2x2 => {
                let [h, w, c] = input else {
                    return mismatch("is not [h, w, c]");
                };
                if *h < 2 || *w < 2 {
                    return mismatch("is smaller than the pooling window");
                }
                Ok(vec![h / 2, w / 2, *c])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Multiply-accumulates for one inference given the layer's input shape.
    pub fn mac_count(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match self.kind {
            LayerKind::Conv2d(g) => (out[0] * out[1] * g.out_channels * g.lowered_k()) as u64,
            LayerKind::Dense { inputs, outputs } => (inputs * outputs) as u64,
            _ => 0,
        })
    }

    pub(crate) fn with_quant(
        &self,
        weights: Option<QTensor>,
        biases: Vec<i32>,
        out_params: Option<QuantParams>,
    ) -> Self {
        Self {
            name: self.name.clone(),
            kind: self.kind,
            weights,
            biases,
            out_params,
        }
    }
}

/// Resolved input/output description of one layer inside a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIo {
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub input_params: QuantParams,
    pub output_params: QuantParams,
}

impl LayerIo {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    input_shape: Vec<usize>,
    input_params: QuantParams,
    dataset_params: QuantParams,
    class_count: usize,
    layers: Vec<Layer>,
    io: Vec<LayerIo>,
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        input_params: QuantParams,
        class_count: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let name = name.into();
        if layers.is_empty() {
            return Err(Error::Config(format!("{name}: network has no layers")));
        }
        if class_count == 0 {
            return Err(Error::Config(format!("{name}: class_count must be positive")));
        }
        let mut io = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        let mut params = input_params;
        for layer in &layers {
            if params.is_signed() {
                return Err(Error::Config(format!(
                    "{}: input activations must be unsigned",
                    layer.name
                )));
            }
            let output_shape = layer.output_shape(&shape)?;
            let output_params = layer.output_params(&params);
            io.push(LayerIo {
                input_shape: shape,
                output_shape: output_shape.clone(),
                input_params: params,
                output_params,
            });
            shape = output_shape;
            params = output_params;
        }
        match layers.last().map(|l| l.kind) {
            Some(LayerKind::Dense { outputs, .. }) if outputs == class_count => {}
            _ => {
                return Err(Error::Config(format!(
                    "{name}: last layer must be dense with {class_count} outputs"
                )))
            }
        }
        Ok(Self {
            name,
            input_shape,
            input_params,
            dataset_params: input_params,
            class_count,
            layers,
            io,
        })
    }

    /// Declare the quantized domain datasets for this network are stored in,
    /// when it differs from the network's own input domain.
    pub fn with_dataset_params(mut self, params: QuantParams) -> Result<Self> {
        if params.is_signed() {
            return Err(Error::Config("dataset parameters must be unsigned".into()));
        }
        self.dataset_params = params;
        Ok(self)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input_params(&self) -> &QuantParams {
        &self.input_params
    }

    pub fn dataset_params(&self) -> &QuantParams {
        &self.dataset_params
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn io(&self) -> &[LayerIo] {
        &self.io
    }

    /// Activation bit width of the network input buffer.
    pub fn activation_bits(&self) -> u32 {
        self.input_params.bits
    }

    pub fn mac_count(&self) -> u64 {
        self.layers
            .iter()
            .zip(&self.io)
            .map(|(l, io)| l.mac_count(&io.input_shape).unwrap_or(0))
            .sum()
    }

    /// Re-express every weight, bias and activation domain at `bits`.
    ///
    /// Real-valued ranges are preserved; weights go through
    /// dequantize + quantize, biases are rescaled to the new accumulator
    /// domain with round-half-away-from-zero. At the current width the
    /// network is returned unchanged.
    pub fn requantize(&self, bits: u32) -> Result<Network> {
        let input_params = self.input_params.with_bits(bits)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut new_in = input_params;
        for (layer, io) in self.layers.iter().zip(&self.io) {
            let old_in = io.input_params;
            let new_layer = match (&layer.weights, layer.out_params) {
                (Some(w), Some(out)) => {
                    let new_wp = w.params().with_bits(bits)?;
                    let new_w = w.requantized(new_wp)?;
                    let ratio = (old_in.scale * w.params().scale) / (new_in.scale * new_wp.scale);
                    let biases = layer
                        .biases
                        .iter()
                        .map(|&b| {
                            if ratio == 1.0 {
                                b
                            } else {
                                (f64::from(b) * ratio)
                                    .round()
                                    .clamp(f64::from(i32::MIN), f64::from(i32::MAX))
                                    as i32
                            }
                        })
                        .collect();
                    layer.with_quant(Some(new_w), biases, Some(out.with_bits(bits)?))
                }
                _ => layer.clone(),
            };
            new_in = new_layer.output_params(&new_in);
            layers.push(new_layer);
        }
        Network::new(
            self.name.clone(),
            self.input_shape.clone(),
            input_params,
            self.class_count,
            layers,
        )?
        .with_dataset_params(self.dataset_params)
    }
}

/// Output of one inference: dequantized logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub quantized_logits: Vec<i32>,
    pub logits: Vec<f64>,
    pub confidences: Vec<f64>,
    pub top1: usize,
    ranking: Vec<usize>,
}

impl Prediction {
    pub fn from_logits(logits: &QTensor) -> Self {
        let quantized = logits.data().to_vec();
        let real = logits.dequantized();
        let max = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = real.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let confidences = exps.into_iter().map(|e| e / sum).collect();
        let mut ranking: Vec<usize> = (0..quantized.len()).collect();
        // stable sort keeps lower indices first among equal logits
        ranking.sort_by(|&a, &b| quantized[b].cmp(&quantized[a]));
        Self {
            top1: ranking[0],
            quantized_logits: quantized,
            logits: real,
            confidences,
            ranking,
        }
    }

    /// The `k` highest-ranked classes, best first.
    pub fn topk(&self, k: usize) -> &[usize] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(values: &[i32]) -> QTensor {
        let p = QuantParams::signed(0.5, 8).unwrap();
        QTensor::new(vec![values.len()], values.to_vec(), p).unwrap()
    }

    #[test]
    fn prediction_ranks_with_low_index_ties() {
        let p = Prediction::from_logits(&logits(&[3, 7, 7, -2, 0]));
        assert_eq!(p.top1, 1);
        assert_eq!(p.topk(3), &[1, 2, 0]);
        assert_eq!(p.topk(10).len(), 5);
        let sum: f64 = p.confidences.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(p.confidences.iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn all_zero_logits_pick_class_zero() {
        let p = Prediction::from_logits(&logits(&[0; 10]));
        assert_eq!(p.top1, 0);
        assert!((p.confidences[3] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_chain_is_validated() {
        let a = QuantParams::unsigned(1.0, 8).unwrap();
        let w = QTensor::zeros(vec![4, 3], QuantParams::signed(1.0, 8).unwrap()).unwrap();
        let dense = Layer::dense("fc", 4, 3, w, vec![0; 3], a).unwrap();
        assert!(Network::new("n", vec![4], a, 3, vec![dense.clone()]).is_ok());
        assert!(matches!(
            Network::new("n", vec![5], a, 3, vec![dense.clone()]),
            Err(Error::Shape(_))
        ));
        assert!(Network::new("n", vec![4], a, 2, vec![dense.clone()]).is_err());
        assert!(Network::new("n", vec![4], a, 3, vec![dense, Layer::relu("r")]).is_err());
    }

    #[test]
    fn layer_constructors_check_geometry() {
        let wp = QuantParams::signed(1.0, 8).unwrap();
        let a = QuantParams::unsigned(1.0, 8).unwrap();
        let g = ConvGeometry {
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            padding: 0,
            in_channels: 1,
            out_channels: 2,
        };
        let w = QTensor::zeros(vec![3, 3, 1, 2], wp).unwrap();
        assert!(Layer::conv2d("c", g, w.clone(), vec![0; 2], a).is_ok());
        assert!(matches!(Layer::conv2d("c", g, w.clone(), vec![0; 3], a), Err(Error::Shape(_))));
        let bad = QTensor::zeros(vec![3, 3, 2, 2], wp).unwrap();
        assert!(matches!(Layer::conv2d("c", g, bad, vec![0; 2], a), Err(Error::Shape(_))));
        let conv = Layer::conv2d("c", g, w, vec![0; 2], a).unwrap();
        assert_eq!(conv.output_shape(&[6, 6, 1]).unwrap(), vec![4, 4, 2]);
        assert_eq!(conv.mac_count(&[6, 6, 1]).unwrap(), 16 * 2 * 9);
        assert!(conv.output_shape(&[2, 2, 1]).is_err());
        assert_eq!(Layer::maxpool2x2("p").output_shape(&[5, 4, 3]).unwrap(), vec![2, 2, 3]);
        assert_eq!(Layer::flatten("f").output_shape(&[2, 2, 3]).unwrap(), vec![12]);
    }
}
