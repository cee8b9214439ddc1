//! Plaintext networks, SGD with momentum, FedAvg and dataset ingestion.

mod data;
mod fedavg;
mod train;

pub use data::{gaussian_blobs, load_mnist_idx, parse_idx_images, parse_idx_labels, partition_uniform, write_idx_images, write_idx_labels, Dataset};
pub use fedavg::{fedavg_plaintext, ModelAccumulator};
pub use train::{accuracy, backward, batches, forward, gradients, mse_loss, train_epochs, train_plaintext, ForwardCache, LayerGrad, Optimizer, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Stride 1, no padding, square kernel.
    Conv { in_ch: usize, out_ch: usize, kernel: usize, in_h: usize, in_w: usize },
    /// 2×2 window, stride 2.
    MaxPool { channels: usize, in_h: usize, in_w: usize },
    Relu { features: usize },
}

impl LayerSpec {
    pub fn in_features(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv { in_ch, in_h, in_w, .. } => in_ch * in_h * in_w,
            LayerSpec::MaxPool { channels, in_h, in_w } => channels * in_h * in_w,
            LayerSpec::Relu { features } => features,
        }
    }

    pub fn out_features(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { out_ch, .. } => out_ch * self.conv().unwrap().positions(),
            LayerSpec::MaxPool { .. } => self.pool().unwrap().out_len(),
            LayerSpec::Relu { features } => features,
        }
    }

    /// (rows, cols) of the weight matrix, if the layer has parameters.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv { out_ch, .. } => Some((self.conv().unwrap().patch_len(), out_ch)),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv { out_ch, .. } => out_ch,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().map(|(r, c)| r * c).unwrap_or(0) + self.bias_len()
    }

    pub fn conv(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv { in_ch, kernel, in_h, in_w, .. } => Some(ConvGeometry { in_ch, in_h, in_w, kernel }),
            _ => None,
        }
    }

    pub fn pool(&self) -> Option<PoolGeometry> {
        match *self {
            LayerSpec::MaxPool { channels, in_h, in_w } => Some(PoolGeometry { channels, in_h, in_w }),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu { .. } => "relu",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// rows×cols row-major; empty for parameter-free layers.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn input_features(&self) -> usize {
        self.layers[0].spec.in_features()
    }

    pub fn output_features(&self) -> usize {
        self.layers.last().map(|l| l.spec.out_features()).unwrap_or(0)
    }

    pub fn same_arch(&self, other: &ModelParams) -> bool {
        self.specs() == other.specs()
    }

    pub fn check_arch(&self, other: &ModelParams) -> Result<()> {
        if self.same_arch(other) {
            Ok(())
        } else {
            Err(Error::ArchMismatch(format!("{} vs {}", self.name, other.name)))
        }
    }

    /// All parameters, layer by layer, weight before bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.param_count()],
                got: vec![flat.len()],
            });
        }
        let mut out = self.clone();
        let mut i = 0;
        for l in &mut out.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelParams {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight.iter_mut().for_each(|w| *w = f(*w));
            l.bias.iter_mut().for_each(|w| *w = f(*w));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub const ARCHITECTURES: [&str; 4] = ["network1", "network2", "lenet", "tiny"];

fn image_dims(input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *input_shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch {
            expected: vec![1, 28, 28],
            got: input_shape.to_vec(),
        }),
    }
}

fn mlp(dims: &[usize]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        specs.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
        if i + 2 < dims.len() {
            specs.push(LayerSpec::Relu { features: w[1] });
        }
    }
    specs
}

fn cnn(input_shape: &[usize], c1: usize, c2: usize, hidden: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    let (c, h, w) = image_dims(input_shape)?;
    let k = 5;
    if h < 2 * k + 2 || w < 2 * k + 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![c, 28, 28],
            got: input_shape.to_vec(),
        });
    }
    let (h1, w1) = (h - k + 1, w - k + 1);
    let (h2, w2) = (h1 / 2, w1 / 2);
    let (h3, w3) = (h2 - k + 1, w2 - k + 1);
    let (h4, w4) = (h3 / 2, w3 / 2);
    Ok(vec![
        LayerSpec::Conv { in_ch: c, out_ch: c1, kernel: k, in_h: h, in_w: w },
        LayerSpec::Relu { features: c1 * h1 * w1 },
        LayerSpec::MaxPool { channels: c1, in_h: h1, in_w: w1 },
        LayerSpec::Conv { in_ch: c1, out_ch: c2, kernel: k, in_h: h2, in_w: w2 },
        LayerSpec::Relu { features: c2 * h3 * w3 },
        LayerSpec::MaxPool { channels: c2, in_h: h3, in_w: w3 },
        LayerSpec::Dense { inputs: c2 * h4 * w4, outputs: hidden },
        LayerSpec::Relu { features: hidden },
        LayerSpec::Dense { inputs: hidden, outputs: classes },
    ])
}

/// Layer list for a named architecture. `tiny` is 8 hidden units; the others
/// follow the published layouts.
pub fn architecture(name: &str, input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let features: usize = input_shape.iter().product();
    match name {
        "network1" => Ok(mlp(&[features, 128, 128, classes])),
        "network2" => cnn(input_shape, 16, 16, 100, classes),
        "lenet" => cnn(input_shape, 20, 50, 500, classes),
        "tiny" => Ok(mlp(&[features, 8, classes])),
        other => Err(Error::UnknownArchitecture(other.to_string())),
    }
}

/// Default class counts: 2 for `tiny`, 10 for the MNIST-shaped networks.
pub fn default_classes(name: &str) -> usize {
    if name == "tiny" {
        2
    } else {
        10
    }
}

pub fn build_network(name: &str, input_shape: &[usize], seed: u64) -> Result<ModelParams> {
    build_network_with_classes(name, input_shape, default_classes(name), seed)
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
pub fn build_network_with_classes(name: &str, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelParams> {
    let specs = architecture(name, input_shape, classes)?;
    Ok(init_params(name, &specs, seed))
}

pub fn init_params(name: &str, specs: &[LayerSpec], seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = specs
        .iter()
        .map(|&spec| match spec.weight_dims() {
            Some((rows, cols)) => {
                let bound = 1.0 / (rows as f64).sqrt();
                let weight = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                let bias = (0..spec.bias_len()).map(|_| rng.random_range(-bound..bound)).collect();
                Layer { spec, weight, bias }
            }
            None => Layer {
                spec,
                weight: Vec::new(),
                bias: Vec::new(),
            },
        })
        .collect();
    ModelParams { name: name.to_string(), layers }
}
