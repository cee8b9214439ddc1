//! Two-party secure training over shared models and data.

pub mod cost;
mod session;

pub use session::{open_session, SecureSession, SessionConfig};

use rand::RngCore;

use crate::error::{Error, Result};
use crate::neural::{Dataset, LayerSpec, ModelParams};
use crate::ring::FixedPointCodec;
use crate::sharing::{add_shares, scale_public, scale_public_sum, share_reals, ShareVector, SharePair, BYTES_PER_ELEMENT};

/// One party's share of every weight and bias, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShare {
    party: usize,
    name: String,
    specs: Vec<LayerSpec>,
    weights: Vec<ShareVector>,
    biases: Vec<ShareVector>,
}

impl ModelShare {
    pub fn party(&self) -> usize {
        self.party
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.weights[0].codec()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(|s| s.len()).sum()
    }

    /// Bytes on the wire when this share is sent whole.
    pub fn wire_bytes(&self) -> u64 {
        self.param_count() as u64 * BYTES_PER_ELEMENT
    }

    pub fn weight(&self, layer: usize) -> &ShareVector {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &ShareVector {
        &self.biases[layer]
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ShareVector> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &ShareVector> {
        self.weights.iter().zip(self.biases.iter()).flat_map(|(w, b)| [w, b])
    }

    pub fn zeros_like(&self) -> ModelShare {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            *t = ShareVector::zeros(t.party(), t.shape(), t.codec());
        }
        z
    }

    fn check_peer(&self, other: &ModelShare) -> Result<()> {
        if self.specs != other.specs {
            return Err(Error::ArchMismatch(format!("{} vs {}", self.name, other.name)));
        }
        Ok(())
    }
}

fn layer_shapes(spec: &LayerSpec) -> (Vec<usize>, Vec<usize>) {
    match spec.weight_dims() {
        Some((r, c)) => (vec![r, c], vec![spec.bias_len()]),
        None => (vec![0], vec![0]),
    }
}

pub fn share_model<R: RngCore>(model: &ModelParams, codec: FixedPointCodec, rng: &mut R) -> Result<[ModelShare; 2]> {
    let mut out: [ModelShare; 2] = [0, 1].map(|party| ModelShare {
        party,
        name: model.name.clone(),
        specs: model.specs(),
        weights: Vec::new(),
        biases: Vec::new(),
    });
    for layer in &model.layers {
        let (ws, bs) = layer_shapes(&layer.spec);
        let [w0, w1] = share_reals(&layer.weight, &ws, codec, rng)?;
        let [b0, b1] = share_reals(&layer.bias, &bs, codec, rng)?;
        out[0].weights.push(w0);
        out[0].biases.push(b0);
        out[1].weights.push(w1);
        out[1].biases.push(b1);
    }
    Ok(out)
}

/// The model owner's step: combine both halves into plaintext parameters.
pub fn reconstruct_model(shares: &[ModelShare; 2]) -> Result<ModelParams> {
    shares[0].check_peer(&shares[1])?;
    let layers = shares[0]
        .specs
        .iter()
        .enumerate()
        .map(|(i, &spec)| {
            Ok(crate::neural::Layer {
                spec,
                weight: crate::sharing::reconstruct_reals(&shares[0].weights[i], &shares[1].weights[i])?,
                bias: crate::sharing::reconstruct_reals(&shares[0].biases[i], &shares[1].biases[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        name: shares[0].name.clone(),
        layers,
    })
}

/// Fresh randomness on the same secret: party 0 adds r, party 1 subtracts it.
pub fn rerandomize<R: RngCore>(shares: &mut [ModelShare; 2], rng: &mut R) {
    let [a, b] = shares;
    for (t0, t1) in a.tensors_mut().zip(b.tensors_mut()) {
        let r = crate::sharing::random_ring(rng, t0.len());
        let v0: Vec<_> = t0.values().iter().zip(&r).map(|(&x, &r)| x + r).collect();
        let v1: Vec<_> = t1.values().iter().zip(&r).map(|(&x, &r)| x - r).collect();
        *t0 = ShareVector::new(0, v0, t0.shape().to_vec(), t0.codec()).expect("same shape");
        *t1 = ShareVector::new(1, v1, t1.shape().to_vec(), t1.codec()).expect("same shape");
    }
}

/// One server's (or aggregator's) weighted average of its shares:
/// Σ (n_k/n)·share_k. Local, no communication.
pub fn secure_fedavg(shares: &[ModelShare], weights: &[u64]) -> Result<ModelShare> {
    let first = shares.first().ok_or_else(|| Error::Config("aggregation over zero shares".into()))?;
    if weights.len() != shares.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![shares.len()],
            got: vec![weights.len()],
        });
    }
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::Config("aggregation weights sum to zero".into()));
    }
    for s in shares {
        first.check_peer(s)?;
        if s.party != first.party {
            return Err(Error::PartyMismatch(first.party, s.party));
        }
    }
    if shares.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = first.zeros_like();
    let coeffs: Vec<f64> = weights.iter().map(|&w| w as f64 / total as f64).collect();
    let per_tensor: Vec<Vec<&ShareVector>> = shares.iter().map(|s| s.tensors().collect()).collect();
    for (i, a) in acc.tensors_mut().enumerate() {
        let terms: Vec<(&ShareVector, f64)> = per_tensor.iter().zip(&coeffs).map(|(t, &c)| (t[i], c)).collect();
        *a = scale_public_sum(&terms)?;
    }
    Ok(acc)
}

/// Average of two shares held by the same party, weights n_a and n_b.
pub fn aggregate_pair(a: &ModelShare, b: &ModelShare, na: u64, nb: u64) -> Result<ModelShare> {
    secure_fedavg(&[a.clone(), b.clone()], &[na, nb])
}

/// Secret-shared features and one-hot targets of a dataset.
#[derive(Clone, Debug)]
pub struct DataShares {
    pub x: SharePair,
    pub y: SharePair,
    rows: usize,
}

impl DataShares {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Local row slice of both halves.
    pub fn batch(&self, r: std::ops::Range<usize>) -> Result<(SharePair, SharePair)> {
        let slice = |s: &SharePair| -> Result<SharePair> {
            let cols = s[0].shape()[1];
            let [a, b] = [0, 1].map(|j| s[j].map_layout(&[r.len(), cols], |v| v[r.start * cols..r.end * cols].to_vec()));
            Ok([a?, b?])
        };
        Ok((slice(&self.x)?, slice(&self.y)?))
    }
}

pub fn share_dataset<R: RngCore>(data: &Dataset, classes: usize, codec: FixedPointCodec, rng: &mut R) -> Result<DataShares> {
    let n = data.len();
    let x = share_reals(data.samples(), &[n, data.features()], codec, rng)?;
    let (_, y) = data.batch(0..n, classes);
    let y = share_reals(&y, &[n, classes], codec, rng)?;
    Ok(DataShares { x, y, rows: n })
}

/// Scale a shared model by a public real on both halves (one truncation each).
pub fn scale_model(s: &ModelShare, c: f64) -> Result<ModelShare> {
    let mut out = s.clone();
    for t in out.tensors_mut() {
        *t = scale_public(t, c)?;
    }
    Ok(out)
}

pub fn add_models(a: &ModelShare, b: &ModelShare) -> Result<ModelShare> {
    a.check_peer(b)?;
    let mut out = a.clone();
    for (o, t) in out.tensors_mut().zip(b.tensors()) {
        *o = add_shares(o, t)?;
    }
    Ok(out)
}
