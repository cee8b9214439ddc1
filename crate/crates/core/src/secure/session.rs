use super::cost::{self, StepShape};
use super::{DataShares, ModelShare};
use crate::error::{Error, Result};
use crate::fss::{complement_bit, secure_relu_with_mask, secure_sign, CmpBackend, KeyDealer, DEFAULT_DOMAIN_BITS};
use crate::neural::{LayerSpec, TrainConfig};
use crate::ring::{FixedPointCodec, RingValue};
use crate::sharing::{
    add_shares, both2, matmul_shares, mul_shares_raw, scale_public, sub_shares, ShareVector, SharePair, TripleDealer, TripleShape,
};
use crate::tensor::{add_row, channels_to_positions, col2im, column_sums, im2col, pool_scatter, pool_windows, positions_to_channels, transpose};
use crate::transcript::{Message, MessageKind, NodeId, PairLink, Phase, Transcript};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionConfig {
    pub codec: FixedPointCodec,
    pub domain_bits: u32,
    pub backend: CmpBackend,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            codec: FixedPointCodec::default(),
            domain_bits: DEFAULT_DOMAIN_BITS,
            backend: CmpBackend::Dcf,
        }
    }
}

enum Aux {
    None,
    Patches(SharePair),
    Keep(SharePair),
    PoolSelect([SharePair; 4]),
}

struct Cache {
    inputs: Vec<SharePair>,
    aux: Vec<Aux>,
}

/// A lock-step two-party training dialogue between `ends[0]` and `ends[1]`.
///
/// Nothing on this type hands out plaintext. Shares leave through
/// [`SecureSession::finish`] and are combined only by the model owner.
pub struct SecureSession {
    cfg: SessionConfig,
    link: PairLink,
    model: [ModelShare; 2],
    velocity: [ModelShare; 2],
    triples: TripleDealer,
    keys: KeyDealer,
    steps: u64,
}

/// Start a session. The handshake is logged as one zero-byte `SessionOpen`
/// message; the latency model charges its fixed setup cost.
pub fn open_session(model: [ModelShare; 2], ends: [NodeId; 2], triples: TripleDealer, keys: KeyDealer, cfg: SessionConfig, round: u32, wave: u32) -> Result<SecureSession> {
    if model[0].party() != 0 || model[1].party() != 1 {
        return Err(Error::PartyMismatch(model[0].party(), model[1].party()));
    }
    if model[0].specs() != model[1].specs() {
        return Err(Error::ArchMismatch("session shares disagree on layers".into()));
    }
    for (a, b) in model[0].tensors().zip(model[1].tensors()) {
        if a.shape() != b.shape() || a.codec() != cfg.codec || b.codec() != cfg.codec {
            return Err(Error::ShapeMismatch {
                expected: a.shape().to_vec(),
                got: b.shape().to_vec(),
            });
        }
    }
    if keys.domain_bits() != cfg.domain_bits || keys.backend() != cfg.backend {
        return Err(Error::Config("key dealer disagrees with session comparison settings".into()));
    }
    let mut link = PairLink::new(ends);
    link.round = round;
    link.wave = wave;
    link.phase = Phase::Setup;
    link.log.push(Message {
        round,
        phase: Phase::Setup,
        from: ends[0],
        to: ends[1],
        kind: MessageKind::SessionOpen,
        bytes: 0,
        count: 1,
        wave,
    });
    link.phase = Phase::Training;
    let velocity = [model[0].zeros_like(), model[1].zeros_like()];
    Ok(SecureSession {
        cfg,
        link,
        model,
        velocity,
        triples,
        keys,
        steps: 0,
    })
}

fn pair_map(x: &SharePair, shape: &[usize], f: impl Fn(&[RingValue]) -> Vec<RingValue>) -> Result<SharePair> {
    let [a, b] = [0, 1].map(|j| x[j].map_layout(shape, &f));
    Ok([a?, b?])
}

fn concat(parts: &[&SharePair]) -> Result<SharePair> {
    let len: usize = parts.iter().map(|p| p[0].len()).sum();
    let [a, b] = [0, 1].map(|j| {
        let mut v = Vec::with_capacity(len);
        for p in parts {
            v.extend_from_slice(p[j].values());
        }
        ShareVector::new(j, v, vec![len], parts[0][j].codec())
    });
    Ok([a?, b?])
}

fn split(x: &SharePair, pieces: usize) -> Result<Vec<SharePair>> {
    let l = x[0].len() / pieces;
    (0..pieces).map(|i| pair_map(x, &[l], |v| v[i * l..(i + 1) * l].to_vec())).collect()
}

fn flat(x: &SharePair) -> Result<SharePair> {
    let n = x[0].len();
    pair_map(x, &[n], |v| v.to_vec())
}

impl SecureSession {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn ends(&self) -> [NodeId; 2] {
        self.link.ends
    }

    pub fn transcript(&self) -> &Transcript {
        &self.link.log
    }

    pub fn triples_issued(&self) -> u64 {
        self.triples.issued_count()
    }

    pub fn model_share(&self, party: usize) -> &ModelShare {
        &self.model[party]
    }

    /// Hand back both shares and the session log.
    pub fn finish(self) -> ([ModelShare; 2], Transcript) {
        (self.model, self.link.log)
    }

    fn triple(&mut self, shape: TripleShape) -> Result<crate::sharing::BeaverTriple> {
        self.triples.deal_to(shape, &mut self.link)
    }

    fn matmul(&mut self, x: &SharePair, y: &SharePair) -> Result<SharePair> {
        let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
        let n = y[0].shape()[1];
        let mut t = self.triple(TripleShape::Matmul { m, k, n })?;
        matmul_shares(x, y, &mut t, &mut self.link)
    }

    fn mul_raw(&mut self, x: &SharePair, y: &SharePair) -> Result<SharePair> {
        let mut t = self.triple(TripleShape::Elementwise { len: x[0].len() })?;
        mul_shares_raw(x, y, &mut t, &mut self.link)
    }

    fn weight_pair(&self, i: usize) -> SharePair {
        [self.model[0].weight(i).clone(), self.model[1].weight(i).clone()]
    }

    fn bias_pair(&self, i: usize) -> SharePair {
        [self.model[0].bias(i).clone(), self.model[1].bias(i).clone()]
    }

    /// max(a, b) elementwise and the selector [a ≥ b]; ties keep `a`.
    fn pair_max(&mut self, a: &SharePair, b: &SharePair) -> Result<(SharePair, SharePair)> {
        let diff = both2(a, b, sub_shares)?;
        let mut keys = self.keys.deal_to(diff[0].len(), &mut self.link);
        let mut t = self.triple(TripleShape::Elementwise { len: diff[0].len() })?;
        let s = secure_sign(&diff, &mut keys, &mut self.link)?;
        let d = complement_bit(&s)?;
        let picked = mul_shares_raw(&diff, &d, &mut t, &mut self.link)?;
        Ok((both2(b, &picked, add_shares)?, d))
    }

    fn forward_cached(&mut self, x: &SharePair) -> Result<(SharePair, Cache)> {
        let batch = x[0].shape()[0];
        let specs = self.model[0].specs().to_vec();
        if x[0].shape() != [batch, specs[0].in_features()] {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, specs[0].in_features()],
                got: x[0].shape().to_vec(),
            });
        }
        let mut cache = Cache {
            inputs: Vec::with_capacity(specs.len()),
            aux: Vec::with_capacity(specs.len()),
        };
        let mut a = x.clone();
        for (i, spec) in specs.iter().enumerate() {
            let (out, aux) = match *spec {
                LayerSpec::Dense { outputs, .. } => {
                    let z = self.matmul(&a, &self.weight_pair(i))?;
                    let bias = self.bias_pair(i);
                    let z = [0, 1].map(|j| {
                        let mut v = z[j].values().to_vec();
                        add_row(&mut v, bias[j].values());
                        ShareVector::new(j, v, vec![batch, outputs], self.cfg.codec)
                    });
                    let [z0, z1] = z;
                    ([z0?, z1?], Aux::None)
                }
                LayerSpec::Conv { out_ch, .. } => {
                    let g = spec.conv().unwrap();
                    let rows = batch * g.positions();
                    let p = pair_map(&a, &[rows, g.patch_len()], |v| im2col(v, batch, g))?;
                    let z = self.matmul(&p, &self.weight_pair(i))?;
                    let bias = self.bias_pair(i);
                    let z = pair_map(&z, &[batch, spec.out_features()], |v| v.to_vec())?;
                    let z = [0, 1].map(|j| {
                        let mut v = z[j].values().to_vec();
                        add_row(&mut v, bias[j].values());
                        ShareVector::new(j, positions_to_channels(&v, batch, g.positions(), out_ch), vec![batch, spec.out_features()], self.cfg.codec)
                    });
                    let [z0, z1] = z;
                    ([z0?, z1?], Aux::Patches(p))
                }
                LayerSpec::Relu { .. } => {
                    let len = a[0].len();
                    let mut keys = self.keys.deal_to(len, &mut self.link);
                    let mut t = self.triple(TripleShape::Elementwise { len })?;
                    let (y, keep) = secure_relu_with_mask(&a, &mut keys, &mut t, &mut self.link)?;
                    (y, Aux::Keep(keep))
                }
                LayerSpec::MaxPool { .. } => {
                    let g = spec.pool().unwrap();
                    let l = batch * g.out_len();
                    let w: Vec<SharePair> = {
                        let parts = [0, 1].map(|j| pool_windows(a[j].values(), batch, g));
                        (0..4)
                            .map(|q| {
                                let [p0, p1] = [0, 1].map(|j| ShareVector::new(j, parts[j][q].clone(), vec![l], self.cfg.codec));
                                Ok([p0?, p1?])
                            })
                            .collect::<Result<_>>()?
                    };
                    let (m, d) = self.pair_max(&concat(&[&w[0], &w[2]])?, &concat(&[&w[1], &w[3]])?)?;
                    let m = split(&m, 2)?;
                    let d12 = split(&d, 2)?;
                    let (top, d3) = self.pair_max(&m[0], &m[1])?;
                    let prods = self.mul_raw(&concat(&[&d3, &d3])?, &d)?;
                    let p = split(&prods, 2)?;
                    let not_d3 = complement_bit(&d3)?;
                    let sel = [
                        p[0].clone(),
                        both2(&d3, &p[0], sub_shares)?,
                        both2(&d12[1], &p[1], sub_shares)?,
                        both2(&both2(&not_d3, &d12[1], sub_shares)?, &p[1], add_shares)?,
                    ];
                    let top = pair_map(&top, &[batch, g.out_len()], |v| v.to_vec())?;
                    (top, Aux::PoolSelect(sel))
                }
            };
            cache.inputs.push(std::mem::replace(&mut a, out));
            cache.aux.push(aux);
        }
        Ok((a, cache))
    }

    /// Shares of the network output for a shared batch.
    pub fn secure_forward(&mut self, x: &SharePair) -> Result<SharePair> {
        Ok(self.forward_cached(x)?.0)
    }

    /// One SGD-with-momentum step on a shared batch. Public constants
    /// (1/B, μ, η) are applied locally with one truncation each.
    pub fn secure_backward_step(&mut self, x: &SharePair, y: &SharePair, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        let batch = x[0].shape()[0];
        let (out, cache) = self.forward_cached(x)?;
        if out[0].shape() != y[0].shape() {
            return Err(Error::ShapeMismatch {
                expected: out[0].shape().to_vec(),
                got: y[0].shape().to_vec(),
            });
        }
        let specs = self.model[0].specs().to_vec();
        let mut grads: Vec<Option<(SharePair, SharePair)>> = vec![None; specs.len()];
        let mut d = both2(&out, y, sub_shares)?;
        for (i, spec) in specs.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let at = pair_map(input, &[inputs, batch], |v| transpose(v, batch, inputs))?;
                    let dw = self.matmul(&at, &d)?;
                    let db = pair_map(&d, &[outputs], |v| column_sums(v, batch, outputs))?;
                    grads[i] = Some((dw, db));
                    if i > 0 {
                        let wt = pair_map(&self.weight_pair(i), &[outputs, inputs], |v| transpose(v, inputs, outputs))?;
                        d = self.matmul(&d, &wt)?;
                    }
                }
                LayerSpec::Conv { out_ch, .. } => {
                    let g = spec.conv().unwrap();
                    let Aux::Patches(p) = &cache.aux[i] else { unreachable!() };
                    let rows = batch * g.positions();
                    let dz = pair_map(&d, &[rows, out_ch], |v| channels_to_positions(v, batch, g.positions(), out_ch))?;
                    let pt = pair_map(p, &[g.patch_len(), rows], |v| transpose(v, rows, g.patch_len()))?;
                    let dw = self.matmul(&pt, &dz)?;
                    let db = pair_map(&dz, &[out_ch], |v| column_sums(v, rows, out_ch))?;
                    grads[i] = Some((dw, db));
                    if i > 0 {
                        let wt = pair_map(&self.weight_pair(i), &[out_ch, g.patch_len()], |v| transpose(v, g.patch_len(), out_ch))?;
                        let dp = self.matmul(&dz, &wt)?;
                        d = pair_map(&dp, &[batch, g.in_len()], |v| col2im(v, batch, g))?;
                    }
                }
                LayerSpec::Relu { .. } => {
                    let Aux::Keep(keep) = &cache.aux[i] else { unreachable!() };
                    let shape = d[0].shape().to_vec();
                    let z = self.mul_raw(&flat(&d)?, &flat(keep)?)?;
                    d = pair_map(&z, &shape, |v| v.to_vec())?;
                }
                LayerSpec::MaxPool { .. } => {
                    let g = spec.pool().unwrap();
                    let Aux::PoolSelect(sel) = &cache.aux[i] else { unreachable!() };
                    let dy = flat(&d)?;
                    let routed = self.mul_raw(&concat(&[&dy, &dy, &dy, &dy])?, &concat(&[&sel[0], &sel[1], &sel[2], &sel[3]])?)?;
                    let parts = split(&routed, 4)?;
                    d = [0, 1].map(|j| {
                        let ps: [Vec<RingValue>; 4] = std::array::from_fn(|q| parts[q][j].values().to_vec());
                        ShareVector::new(j, pool_scatter(&ps, batch, g), vec![batch, g.in_len()], self.cfg.codec).expect("pool shape")
                    });
                }
            }
        }
        self.apply_update(grads, batch, cfg)?;
        self.steps += 1;
        Ok(())
    }

    fn apply_update(&mut self, grads: Vec<Option<(SharePair, SharePair)>>, batch: usize, cfg: &TrainConfig) -> Result<()> {
        let inv_b = 1.0 / batch as f64;
        for j in 0..2 {
            let mut gs = Vec::new();
            for g in grads.iter() {
                match g {
                    Some((w, b)) => {
                        gs.push(Some(w[j].clone()));
                        gs.push(Some(b[j].clone()));
                    }
                    None => {
                        gs.push(None);
                        gs.push(None);
                    }
                }
            }
            let [model, velocity] = [&mut self.model[j], &mut self.velocity[j]];
            for ((w, v), g) in model.tensors_mut().zip(velocity.tensors_mut()).zip(gs) {
                let Some(g) = g else { continue };
                let g = scale_public(&g.reshaped(w.shape())?, inv_b)?;
                *v = add_shares(&scale_public(v, cfg.momentum)?, &g)?;
                *w = sub_shares(w, &scale_public(v, cfg.learning_rate)?)?;
            }
        }
        Ok(())
    }

    /// `epochs` passes over contiguous batches of the shared data.
    pub fn train_local(&mut self, data: &DataShares, cfg: &TrainConfig, epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            for r in crate::neural::batches(data.rows(), cfg.batch_size) {
                let (x, y) = data.batch(r)?;
                self.secure_backward_step(&x, &y, cfg)?;
            }
        }
        Ok(())
    }

    /// Analytic shape of the step this session would take on a batch of `batch` rows.
    pub fn step_shape(&self, batch: usize) -> StepShape {
        StepShape {
            batch,
            domain_bits: self.cfg.domain_bits,
            backend: self.cfg.backend,
        }
    }

    /// Work units for the compute model, as predicted by the analytic cost model.
    pub fn predicted_ops(&self, batch: usize) -> u64 {
        cost::step_ops(self.model[0].specs(), &self.step_shape(batch))
    }
}
