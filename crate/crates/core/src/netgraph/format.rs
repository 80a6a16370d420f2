//! JSON manifest + raw `i32` tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConvGeometry, Layer, LayerKind, Network};
use crate::error::{Error, Result};
use crate::qtensor::{QTensor, QuantParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct QuantEntry {
    bits: u32,
    scale: f64,
    zero_point: i32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    signed: bool,
}

impl QuantEntry {
    fn params(&self) -> Result<QuantParams> {
        QuantParams::new(self.scale, self.zero_point, self.bits, self.signed)
    }

    fn from_params(p: &QuantParams) -> Self {
        Self {
            bits: p.bits,
            scale: p.scale,
            zero_point: p.zero_point,
            signed: p.is_signed(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvEntry {
    kernel: [usize; 2],
    #[serde(default = "one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    in_channels: usize,
    out_channels: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseEntry {
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_file: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    input_shape: Vec<usize>,
    input_params: QuantEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_params: Option<QuantEntry>,
    class_count: usize,
    layers: Vec<LayerEntry>,
}

fn read_i32_file(path: &Path, expected: usize) -> Result<Vec<i32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Shape(format!(
            "{}: expected {expected} int32 values ({} bytes), file has {} bytes",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_i32_file(path: &Path, values: &[i32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn geometry<T: serde::de::DeserializeOwned>(path: &Path, entry: &LayerEntry) -> Result<T> {
    let value = entry
        .geometry
        .clone()
        .ok_or_else(|| Error::format(path, format!("layer {}: missing geometry", entry.name)))?;
    serde_json::from_value(value)
        .map_err(|e| Error::format(path, format!("layer {}: bad geometry: {e}", entry.name)))
}

fn required<'a, T>(path: &Path, layer: &str, field: &str, v: &'a Option<T>) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::format(path, format!("layer {layer}: missing `{field}`")))
}

/// Load and fully validate a network from its manifest. Tensor files are
/// resolved relative to the manifest's directory.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Network> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::format(path, "missing format_version")),
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::format(path, e.to_string()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let input_params = manifest.input_params.params()?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut shape = manifest.input_shape.clone();
    let mut params = input_params;
    for entry in &manifest.layers {
        let name = entry.name.as_str();
        let layer = match entry.kind.as_str() {
            "conv2d" | "dense" => {
                let out = required(path, name, "quant", &entry.quant)?.params()?;
                let wq = required(path, name, "weight_quant", &entry.weight_quant)?.params()?;
                if !wq.is_signed() {
                    return Err(Error::format(path, format!("layer {name}: weights must be signed")));
                }
                let wfile = dir.join(required(path, name, "weight_file", &entry.weight_file)?);
                let bfile = dir.join(required(path, name, "bias_file", &entry.bias_file)?);
                if entry.kind == "conv2d" {
                    let g: ConvEntry = geometry(path, entry)?;
                    let geom = ConvGeometry {
                        kernel_h: g.kernel[0],
                        kernel_w: g.kernel[1],
                        stride: g.stride,
                        padding: g.padding,
                        in_channels: g.in_channels,
                        out_channels: g.out_channels,
                    };
                    let wshape = vec![geom.kernel_h, geom.kernel_w, geom.in_channels, geom.out_channels];
                    let weights = load_tensor(&wfile, wshape, wq)?;
                    let biases = read_i32_file(&bfile, geom.out_channels)?;
                    Layer::conv2d(name, geom, weights, biases, out)?
                } else {
                    let g: DenseEntry = geometry(path, entry)?;
                    let weights = load_tensor(&wfile, vec![g.inputs, g.outputs], wq)?;
                    let biases = read_i32_file(&bfile, g.outputs)?;
                    Layer::dense(name, g.inputs, g.outputs, weights, biases, out)?
                }
            }
            "maxpool2x2" => Layer::maxpool2x2(name),
            "relu" => Layer::relu(name),
            "flatten" => Layer::flatten(name),
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        if !layer.kind.is_mac() {
            if let Some(q) = entry.quant {
                if q.params()? != params {
                    return Err(Error::format(
                        path,
                        format!("layer {name}: quant must equal its input parameters"),
                    ));
                }
            }
        }
        shape = layer.output_shape(&shape)?;
        params = layer.output_params(&params);
        layers.push(layer);
    }
    let net = Network::new(
        manifest.name,
        manifest.input_shape,
        input_params,
        manifest.class_count,
        layers,
    )?;
    match manifest.dataset_params {
        Some(d) => net.with_dataset_params(d.params()?),
        None => Ok(net),
    }
}

fn load_tensor(path: &Path, shape: Vec<usize>, params: QuantParams) -> Result<QTensor> {
    let n = shape.iter().product();
    let data = read_i32_file(path, n)?;
    QTensor::new(shape, data, params).map_err(|e| match e {
        Error::Range(msg) => Error::Range(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Write `manifest.json` plus one weight and one bias file per MAC layer into
/// `dir`. Returns the manifest path.
pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let mut entry = LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind.tag().to_string(),
            geometry: None,
            quant: None,
            weight_quant: None,
            weight_file: None,
            bias_file: None,
        };
        let geometry = match layer.kind {
            LayerKind::Conv2d(g) => Some(serde_json::to_value(ConvEntry {
                kernel: [g.kernel_h, g.kernel_w],
                stride: g.stride,
                padding: g.padding,
                in_channels: g.in_channels,
                out_channels: g.out_channels,
            })),
            LayerKind::Dense { inputs, outputs } => {
                Some(serde_json::to_value(DenseEntry { inputs, outputs }))
            }
            _ => None,
        };
        if let (Some(g), Some(w)) = (geometry, layer.weights()) {
            entry.geometry = Some(g.expect("geometry serializes"));
            let wname = format!("{}.w.bin", layer.name);
            let bname = format!("{}.b.bin", layer.name);
            write_i32_file(&dir.join(&wname), w.data())?;
            write_i32_file(&dir.join(&bname), layer.biases())?;
            entry.quant = Some(QuantEntry::from_params(&layer.output_params(w.params())));
            entry.weight_quant = Some(QuantEntry::from_params(w.params()));
            entry.weight_file = Some(wname);
            entry.bias_file = Some(bname);
        }
        entries.push(entry);
    }
    let dataset_params = (net.dataset_params() != net.input_params())
        .then(|| QuantEntry::from_params(net.dataset_params()));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: net.name.clone(),
        input_shape: net.input_shape().to_vec(),
        input_params: QuantEntry::from_params(net.input_params()),
        dataset_params,
        class_count: net.class_count(),
        layers: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
