use serde::Serialize;

use super::{Dataset, LayerSpec, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{add_row, channels_to_positions, col2im, column_sums, im2col, matmul, pool_scatter, pool_windows, positions_to_channels, transpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            local_epochs: 1,
            global_epochs: 1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Patches(Vec<f64>),
    ReluMask(Vec<bool>),
    PoolArgmax(Vec<u8>),
}

/// Per-layer inputs and the side data backprop needs.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn forward(model: &ModelParams, x: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardCache)> {
    if x.len() != batch * model.input_features() {
        return Err(Error::ShapeMismatch {
            expected: vec![batch, model.input_features()],
            got: vec![x.len()],
        });
    }
    let mut cache = ForwardCache {
        batch,
        inputs: Vec::with_capacity(model.layers.len()),
        aux: Vec::with_capacity(model.layers.len()),
    };
    let mut a = x.to_vec();
    for layer in &model.layers {
        let (out, aux) = match layer.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let mut z = matmul(&a, &layer.weight, batch, inputs, outputs);
                add_row(&mut z, &layer.bias);
                (z, Aux::None)
            }
            LayerSpec::Conv { out_ch, .. } => {
                let g = layer.spec.conv().unwrap();
                let p = im2col(&a, batch, g);
                let mut z = matmul(&p, &layer.weight, batch * g.positions(), g.patch_len(), out_ch);
                add_row(&mut z, &layer.bias);
                (positions_to_channels(&z, batch, g.positions(), out_ch), Aux::Patches(p))
            }
            LayerSpec::Relu { .. } => {
                let mask: Vec<bool> = a.iter().map(|&v| v >= 0.0).collect();
                (a.iter().map(|&v| if v >= 0.0 { v } else { 0.0 }).collect(), Aux::ReluMask(mask))
            }
            LayerSpec::MaxPool { .. } => {
                let g = layer.spec.pool().unwrap();
                let w = pool_windows(&a, batch, g);
                let mut out = Vec::with_capacity(w[0].len());
                let mut arg = Vec::with_capacity(w[0].len());
                for i in 0..w[0].len() {
                    // Same pairwise tree as the secure gate, ties to the earlier cell.
                    let (m01, i01) = if w[0][i] >= w[1][i] { (w[0][i], 0) } else { (w[1][i], 1) };
                    let (m23, i23) = if w[2][i] >= w[3][i] { (w[2][i], 2) } else { (w[3][i], 3) };
                    let (m, idx) = if m01 >= m23 { (m01, i01) } else { (m23, i23) };
                    out.push(m);
                    arg.push(idx);
                }
                (out, Aux::PoolArgmax(arg))
            }
        };
        cache.inputs.push(std::mem::replace(&mut a, out));
        cache.aux.push(aux);
    }
    Ok((a, cache))
}

/// Gradient sums over the batch for upstream gradient `dout`.
pub fn backward(model: &ModelParams, cache: &ForwardCache, dout: &[f64]) -> Vec<LayerGrad> {
    let batch = cache.batch;
    let mut grads: Vec<LayerGrad> = model
        .layers
        .iter()
        .map(|_| LayerGrad {
            weight: Vec::new(),
            bias: Vec::new(),
        })
        .collect();
    let mut d = dout.to_vec();
    for (i, layer) in model.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        let first = i == 0;
        match layer.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let at = transpose(input, batch, inputs);
                grads[i].weight = matmul(&at, &d, inputs, batch, outputs);
                grads[i].bias = column_sums(&d, batch, outputs);
                if !first {
                    let wt = transpose(&layer.weight, inputs, outputs);
                    d = matmul(&d, &wt, batch, outputs, inputs);
                }
            }
            LayerSpec::Conv { out_ch, .. } => {
                let g = layer.spec.conv().unwrap();
                let Aux::Patches(p) = &cache.aux[i] else { unreachable!() };
                let rows = batch * g.positions();
                let dz = channels_to_positions(&d, batch, g.positions(), out_ch);
                let pt = transpose(p, rows, g.patch_len());
                grads[i].weight = matmul(&pt, &dz, g.patch_len(), rows, out_ch);
                grads[i].bias = column_sums(&dz, rows, out_ch);
                if !first {
                    let wt = transpose(&layer.weight, g.patch_len(), out_ch);
                    let dp = matmul(&dz, &wt, rows, out_ch, g.patch_len());
                    d = col2im(&dp, batch, g);
                }
            }
            LayerSpec::Relu { .. } => {
                let Aux::ReluMask(mask) = &cache.aux[i] else { unreachable!() };
                for (v, &keep) in d.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            LayerSpec::MaxPool { .. } => {
                let g = layer.spec.pool().unwrap();
                let Aux::PoolArgmax(arg) = &cache.aux[i] else { unreachable!() };
                let mut parts: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; arg.len()]);
                for (j, &a) in arg.iter().enumerate() {
                    parts[a as usize][j] = d[j];
                }
                d = pool_scatter(&parts, batch, g);
            }
        }
    }
    grads
}

/// One-hot targets for `labels`, row-major B×classes.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        y[i * classes + l] = 1.0;
    }
    y
}

/// Mean-over-batch gradients of ½‖f(x) − y‖².
pub fn gradients(model: &ModelParams, x: &[f64], y: &[f64], batch: usize) -> Result<Vec<LayerGrad>> {
    let (out, cache) = forward(model, x, batch)?;
    if out.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![out.len()],
            got: vec![y.len()],
        });
    }
    let dout: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
    let inv = 1.0 / batch as f64;
    let mut g = backward(model, &cache, &dout);
    for lg in &mut g {
        lg.weight.iter_mut().for_each(|v| *v *= inv);
        lg.bias.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(g)
}

/// Momentum buffers, zero at creation.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    velocity: Vec<LayerGrad>,
}

impl Optimizer {
    pub fn new(model: &ModelParams) -> Self {
        Optimizer {
            velocity: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// v ← μv + g; w ← w − ηv.
    pub fn step(&mut self, model: &mut ModelParams, grads: &[LayerGrad], cfg: &TrainConfig) {
        for ((layer, v), g) in model.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, v), g) in layer.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
            for ((w, v), g) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
        }
    }
}

/// Contiguous batches, no shuffling: training is a pure function of its inputs.
pub fn batches(len: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len).step_by(batch_size.max(1)).map(move |s| s..(s + batch_size).min(len))
}

pub fn train_epochs(model: &mut ModelParams, opt: &mut Optimizer, data: &Dataset, cfg: &TrainConfig, epochs: usize) -> Result<()> {
    cfg.validate()?;
    if data.features() != model.input_features() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.input_features()],
            got: vec![data.features()],
        });
    }
    for _ in 0..epochs {
        for r in batches(data.len(), cfg.batch_size) {
            let (x, y) = data.batch(r.clone(), model.output_features());
            let g = gradients(model, &x, &y, r.len())?;
            opt.step(model, &g, cfg);
        }
    }
    Ok(())
}

/// `cfg.local_epochs` passes over `data` with fresh momentum.
pub fn train_plaintext(model: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut m = model.clone();
    let mut opt = Optimizer::new(&m);
    train_epochs(&mut m, &mut opt, data, cfg, cfg.local_epochs)?;
    Ok(m)
}

pub fn predict(model: &ModelParams, x: &[f64], batch: usize) -> Result<Vec<usize>> {
    let (out, _) = forward(model, x, batch)?;
    let c = model.output_features();
    Ok(out
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for r in batches(data.len(), 256) {
        let (x, _) = data.batch(r.clone(), model.output_features());
        let pred = predict(model, &x, r.len())?;
        correct += pred.iter().zip(&data.labels()[r]).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean over samples of ½‖f(x) − y‖².
pub fn mse_loss(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in batches(data.len(), 256) {
        let (x, y) = data.batch(r.clone(), model.output_features());
        let (out, _) = forward(model, &x, r.len())?;
        total += out.iter().zip(&y).map(|(o, t)| 0.5 * (o - t) * (o - t)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{build_network, build_network_with_classes, gaussian_blobs};

    fn loss_at(model: &ModelParams, x: &[f64], y: &[f64], batch: usize) -> f64 {
        let (out, _) = forward(model, x, batch).unwrap();
        out.iter().zip(y).map(|(o, t)| 0.5 * (o - t) * (o - t)).sum::<f64>() / batch as f64
    }

    fn finite_difference_check(model: &ModelParams, x: &[f64], y: &[f64], batch: usize) {
        let g = gradients(model, x, y, batch).unwrap();
        let analytic: Vec<f64> = g.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect();
        let flat = model.flatten();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += h;
            let up = loss_at(&model.with_flat(&p).unwrap(), x, y, batch);
            p[i] -= 2.0 * h;
            let down = loss_at(&model.with_flat(&p).unwrap(), x, y, batch);
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn tiny_gradients_match_finite_differences() {
        let model = build_network("tiny", &[4], 9).unwrap();
        let x = [0.3, -1.2, 0.8, 0.05, -0.4, 0.9, 1.1, -0.7];
        let y = one_hot(&[1, 0], 2);
        finite_difference_check(&model, &x, &y, 2);
        finite_difference_check(&model, &x[..4], &y[..2], 1);
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let specs = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: 2, kernel: 3, in_h: 6, in_w: 6 },
            LayerSpec::Relu { features: 32 },
            LayerSpec::MaxPool { channels: 2, in_h: 4, in_w: 4 },
            LayerSpec::Dense { inputs: 8, outputs: 3 },
        ];
        let model = crate::neural::init_params("small-cnn", &specs, 4);
        let x: Vec<f64> = (0..72).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0 + i as f64 * 1e-3).collect();
        let y = one_hot(&[2, 0], 3);
        finite_difference_check(&model, &x, &y, 2);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = gaussian_blobs(40, 4, 2, 0.5, 3);
        let model = build_network("tiny", &[4], 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(train_plaintext(&model, &data, &cfg).unwrap(), model);
    }

    #[test]
    fn tiny_learns_blobs() {
        let data = gaussian_blobs(400, 4, 2, 0.6, 11);
        let model = build_network("tiny", &[4], 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            local_epochs: 4,
            ..Default::default()
        };
        // 400/8 × 4 = 200 steps.
        let before = mse_loss(&model, &data).unwrap();
        let trained = train_plaintext(&model, &data, &cfg).unwrap();
        assert!(mse_loss(&trained, &data).unwrap() < before);
        assert!(accuracy(&trained, &data).unwrap() >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let data = gaussian_blobs(64, 4, 3, 0.6, 5);
        let model = build_network_with_classes("tiny", &[4], 3, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            ..Default::default()
        };
        assert_eq!(train_plaintext(&model, &data, &cfg).unwrap(), train_plaintext(&model, &data, &cfg).unwrap());
    }
}
