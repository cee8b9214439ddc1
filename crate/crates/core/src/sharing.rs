//! Two-party additive sharing over Z_{2^64} and Beaver-triple products.
//!
//! Both parties are simulated in one process. Operations that need an exchange
//! take both halves, run each party's local step separately, and log the
//! exchange on a [`PairLink`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ring::{ring_matmul, truncate, FixedPointCodec, RingValue};
use crate::transcript::{MessageKind, NodeId, PairLink};

pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ShareVector {
    party: usize,
    values: Vec<RingValue>,
    shape: Vec<usize>,
    codec: FixedPointCodec,
}

/// Party 0's half and party 1's half of one secret.
pub type SharePair = [ShareVector; 2];

fn check_party(p: usize) -> Result<()> {
    if p > 1 {
        Err(Error::InvalidParty(p))
    } else {
        Ok(())
    }
}

impl ShareVector {
    pub fn new(party: usize, values: Vec<RingValue>, shape: Vec<usize>, codec: FixedPointCodec) -> Result<Self> {
        check_party(party)?;
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![values.len()],
            });
        }
        Ok(ShareVector { party, values, shape, codec })
    }

    pub fn zeros(party: usize, shape: &[usize], codec: FixedPointCodec) -> Self {
        let n = shape.iter().product();
        ShareVector {
            party,
            values: vec![RingValue::ZERO; n],
            shape: shape.to_vec(),
            codec,
        }
    }

    pub fn party(&self) -> usize {
        self.party
    }

    pub fn values(&self) -> &[RingValue] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codec(&self) -> FixedPointCodec {
        self.codec
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<RingValue> {
        self.values
    }

    /// Same values viewed under a different shape of equal size.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Apply a purely local, data-independent rearrangement (transpose, im2col, ...).
    pub fn map_layout<F: FnOnce(&[RingValue]) -> Vec<RingValue>>(&self, shape: &[usize], f: F) -> Result<Self> {
        ShareVector::new(self.party, f(&self.values), shape.to_vec(), self.codec)
    }

    fn same_frame(&self, other: &ShareVector) -> Result<()> {
        if self.party != other.party {
            return Err(Error::PartyMismatch(self.party, other.party));
        }
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        if self.codec != other.codec {
            return Err(Error::CodecMismatch);
        }
        Ok(())
    }
}

pub fn share<R: RngCore>(secret: &[RingValue], shape: &[usize], codec: FixedPointCodec, rng: &mut R) -> Result<SharePair> {
    let s0: Vec<RingValue> = secret.iter().map(|_| RingValue(rng.next_u64())).collect();
    let s1: Vec<RingValue> = secret.iter().zip(&s0).map(|(&x, &r)| x - r).collect();
    Ok([
        ShareVector::new(0, s0, shape.to_vec(), codec)?,
        ShareVector::new(1, s1, shape.to_vec(), codec)?,
    ])
}

pub fn share_reals<R: RngCore>(xs: &[f64], shape: &[usize], codec: FixedPointCodec, rng: &mut R) -> Result<SharePair> {
    share(&codec.encode_slice(xs)?, shape, codec, rng)
}

/// Shares of a public value with no randomness: party 1 holds it, party 0 holds zero.
pub fn share_public(values: &[RingValue], shape: &[usize], codec: FixedPointCodec) -> Result<SharePair> {
    Ok([
        ShareVector::new(0, vec![RingValue::ZERO; values.len()], shape.to_vec(), codec)?,
        ShareVector::new(1, values.to_vec(), shape.to_vec(), codec)?,
    ])
}

pub fn reconstruct(s0: &ShareVector, s1: &ShareVector) -> Result<Vec<RingValue>> {
    if s0.shape != s1.shape {
        return Err(Error::ShapeMismatch {
            expected: s0.shape.clone(),
            got: s1.shape.clone(),
        });
    }
    if s0.codec != s1.codec {
        return Err(Error::CodecMismatch);
    }
    if s0.party == s1.party {
        return Err(Error::PartyMismatch(s0.party, s1.party));
    }
    Ok(s0.values.iter().zip(&s1.values).map(|(&a, &b)| a + b).collect())
}

pub fn reconstruct_reals(s0: &ShareVector, s1: &ShareVector) -> Result<Vec<f64>> {
    let codec = s0.codec;
    Ok(codec.decode_slice(&reconstruct(s0, s1)?))
}

pub fn add_shares(x: &ShareVector, y: &ShareVector) -> Result<ShareVector> {
    x.same_frame(y)?;
    let values = x.values.iter().zip(&y.values).map(|(&a, &b)| a + b).collect();
    Ok(ShareVector { values, ..x.clone() })
}

pub fn sub_shares(x: &ShareVector, y: &ShareVector) -> Result<ShareVector> {
    x.same_frame(y)?;
    let values = x.values.iter().zip(&y.values).map(|(&a, &b)| a - b).collect();
    Ok(ShareVector { values, ..x.clone() })
}

pub fn neg_share(x: &ShareVector) -> ShareVector {
    ShareVector {
        values: x.values.iter().map(|&v| -v).collect(),
        ..x.clone()
    }
}

/// Multiply by a public integer; exact, no rescaling.
pub fn scale_int(x: &ShareVector, alpha: i64) -> ShareVector {
    let a = RingValue::from_signed(alpha);
    ShareVector {
        values: x.values.iter().map(|&v| v * a).collect(),
        ..x.clone()
    }
}

/// Add a public ring tensor; only party 1 folds it in.
pub fn add_public(x: &ShareVector, c: &[RingValue]) -> Result<ShareVector> {
    if c.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: x.shape.clone(),
            got: vec![c.len()],
        });
    }
    if x.party == 0 {
        return Ok(x.clone());
    }
    Ok(ShareVector {
        values: x.values.iter().zip(c).map(|(&a, &b)| a + b).collect(),
        ..x.clone()
    })
}

/// Local rescaling of one share after a fixed-point product.
///
/// Party 1 shifts the negation so the two rounding errors are not both
/// downward; the reconstructed result is off by at most one ulp except with
/// probability about |x|/2^63.
pub fn truncate_share(x: &ShareVector) -> ShareVector {
    truncate_share_by(x, x.codec.frac_bits())
}

pub fn truncate_share_by(x: &ShareVector, bits: u32) -> ShareVector {
    let values = if x.party == 0 {
        x.values.iter().map(|&v| truncate(v, bits)).collect()
    } else {
        x.values.iter().map(|&v| -truncate(-v, bits)).collect()
    };
    ShareVector { values, ..x.clone() }
}

/// Fractional bits of public constants in [`scale_public`]. Wider than the
/// data codec so that, e.g., a learning rate of 0.01 is not off by 5·10^-4
/// relative on every step.
pub const PUBLIC_SCALE_BITS: u32 = 24;

/// round(c · 2^PUBLIC_SCALE_BITS) as a ring element.
pub fn encode_public(c: f64) -> Result<RingValue> {
    FixedPointCodec::new(PUBLIC_SCALE_BITS).expect("in codec range").encode(c)
}

/// Multiply by a public real; local.
pub fn scale_public(x: &ShareVector, c: f64) -> Result<ShareVector> {
    scale_public_sum(&[(x, c)])
}

const DIGIT_BITS: u32 = 8;

/// Σ c_k · x_k for public reals c_k, all terms sharing one party and shape.
///
/// The constants carry PUBLIC_SCALE_BITS fractional bits, so a product taken
/// whole would sit near 2^(16+24)·|x·c| in the ring, and local truncation
/// fails with probability about that over 2^63. Instead the constant is
/// applied one 8-bit digit at a time from the low end, truncating by 8 after
/// each digit. No intermediate exceeds about 2^24·Σ|x_k|, and the result
/// still has a single ulp of rounding error.
pub fn scale_public_sum(terms: &[(&ShareVector, f64)]) -> Result<ShareVector> {
    let (first, _) = *terms.first().ok_or_else(|| Error::Config("empty public scaling".into()))?;
    let mut ks = Vec::with_capacity(terms.len());
    for &(x, c) in terms {
        if x.party != first.party || x.values.len() != first.values.len() {
            return Err(Error::ShapeMismatch {
                expected: first.shape.clone(),
                got: x.shape.clone(),
            });
        }
        let k = encode_public(c)?.signed();
        ks.push((k < 0, k.unsigned_abs()));
    }
    let stages = PUBLIC_SCALE_BITS / DIGIT_BITS;
    let mut acc = ShareVector {
        values: vec![RingValue::ZERO; first.values.len()],
        ..first.clone()
    };
    for i in 0..stages {
        for (&(x, _), &(neg, k)) in terms.iter().zip(&ks) {
            // The top stage takes all remaining high bits.
            let d = k >> (i * DIGIT_BITS);
            let d = RingValue(if i + 1 == stages { d } else { d & ((1 << DIGIT_BITS) - 1) });
            let d = if neg { -d } else { d };
            for (a, &v) in acc.values.iter_mut().zip(&x.values) {
                *a += v * d;
            }
        }
        acc = truncate_share_by(&acc, DIGIT_BITS);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripleShape {
    Elementwise { len: usize },
    /// a: m×k, b: k×n, c = a·b: m×n.
    Matmul { m: usize, k: usize, n: usize },
}

impl TripleShape {
    fn dims(&self) -> (usize, usize, usize) {
        match *self {
            TripleShape::Elementwise { len } => (len, len, len),
            TripleShape::Matmul { m, k, n } => (m * k, k * n, m * n),
        }
    }

    /// Bytes of a, b and c shares delivered to one party.
    pub fn material_bytes(&self) -> u64 {
        let (a, b, c) = self.dims();
        (a + b + c) as u64 * BYTES_PER_ELEMENT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripleShare {
    pub a: Vec<RingValue>,
    pub b: Vec<RingValue>,
    pub c: Vec<RingValue>,
}

#[derive(Clone, Debug)]
pub struct BeaverTriple {
    id: u64,
    shape: TripleShape,
    parts: [TripleShare; 2],
    consumed: bool,
}

impl BeaverTriple {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> TripleShape {
        self.shape
    }

    pub fn part(&self, party: usize) -> &TripleShare {
        &self.parts[party]
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn take(&mut self) -> Result<()> {
        if self.consumed {
            return Err(Error::TripleReuse(self.id));
        }
        self.consumed = true;
        Ok(())
    }
}

/// Seeded trusted dealer for Beaver triples.
#[derive(Clone, Debug)]
pub struct TripleDealer {
    seed: u64,
    rng: ChaCha8Rng,
    issued_count: u64,
    budget: Option<u64>,
    offline_bytes: u64,
}

impl TripleDealer {
    pub fn new(seed: u64) -> Self {
        TripleDealer {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            issued_count: 0,
            budget: None,
            offline_bytes: 0,
        }
    }

    pub fn with_budget(seed: u64, budget: u64) -> Self {
        TripleDealer {
            budget: Some(budget),
            ..Self::new(seed)
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn issued_count(&self) -> u64 {
        self.issued_count
    }

    pub fn offline_bytes(&self) -> u64 {
        self.offline_bytes
    }

    fn random_vec(&mut self, n: usize) -> Vec<RingValue> {
        (0..n).map(|_| RingValue(self.rng.random())).collect()
    }

    pub fn deal(&mut self, shape: TripleShape) -> Result<BeaverTriple> {
        if let Some(budget) = self.budget {
            if self.issued_count >= budget {
                return Err(Error::DealerExhausted {
                    issued: self.issued_count,
                    budget,
                });
            }
        }
        let (na, nb, _) = shape.dims();
        let a = self.random_vec(na);
        let b = self.random_vec(nb);
        let c: Vec<RingValue> = match shape {
            TripleShape::Elementwise { .. } => a.iter().zip(&b).map(|(&x, &y)| x * y).collect(),
            TripleShape::Matmul { m, k, n } => ring_matmul(&a, &b, m, k, n),
        };
        let a0 = self.random_vec(a.len());
        let b0 = self.random_vec(b.len());
        let c0 = self.random_vec(c.len());
        let minus = |s: &[RingValue], r: &[RingValue]| -> Vec<RingValue> { s.iter().zip(r).map(|(&x, &y)| x - y).collect() };
        let p1 = TripleShare {
            a: minus(&a, &a0),
            b: minus(&b, &b0),
            c: minus(&c, &c0),
        };
        let p0 = TripleShare { a: a0, b: b0, c: c0 };
        let id = self.issued_count;
        self.issued_count += 1;
        self.offline_bytes += 2 * shape.material_bytes();
        Ok(BeaverTriple {
            id,
            shape,
            parts: [p0, p1],
            consumed: false,
        })
    }

    /// Deal one triple and log its delivery to both session endpoints.
    pub fn deal_to(&mut self, shape: TripleShape, link: &mut PairLink) -> Result<BeaverTriple> {
        let t = self.deal(shape)?;
        let bytes = shape.material_bytes();
        for end in link.ends {
            link.send(NodeId::Dealer, end, MessageKind::TripleMaterial, bytes);
        }
        Ok(t)
    }

    pub fn deal_triples(&mut self, shape: TripleShape, count: usize) -> Result<Vec<BeaverTriple>> {
        (0..count).map(|_| self.deal(shape)).collect()
    }
}

/// Party j's masked difference, e.g. E_j = X_j − a_j.
pub fn beaver_mask(x_j: &[RingValue], a_j: &[RingValue]) -> Vec<RingValue> {
    x_j.iter().zip(a_j).map(|(&x, &a)| x - a).collect()
}

fn open(d0: &[RingValue], d1: &[RingValue]) -> Vec<RingValue> {
    d0.iter().zip(d1).map(|(&a, &b)| a + b).collect()
}

/// Party j's product share from the opened E, F: j·E∘F + E∘b_j + a_j∘F + c_j.
pub fn beaver_combine(party: usize, e: &[RingValue], f: &[RingValue], t: &TripleShare) -> Vec<RingValue> {
    (0..e.len())
        .map(|i| {
            let mut z = e[i] * t.b[i] + t.a[i] * f[i] + t.c[i];
            if party == 1 {
                z += e[i] * f[i];
            }
            z
        })
        .collect()
}

/// Matrix version: j·E·F + E·B_j + A_j·F + C_j.
pub fn beaver_combine_matmul(party: usize, e: &[RingValue], f: &[RingValue], t: &TripleShare, m: usize, k: usize, n: usize) -> Vec<RingValue> {
    let mut z = ring_matmul(e, &t.b, m, k, n);
    let af = ring_matmul(&t.a, f, m, k, n);
    for ((zi, ai), ci) in z.iter_mut().zip(af).zip(&t.c) {
        *zi += ai + *ci;
    }
    if party == 1 {
        let ef = ring_matmul(e, f, m, k, n);
        for (zi, v) in z.iter_mut().zip(ef) {
            *zi += v;
        }
    }
    z
}

fn check_pair(x: &[ShareVector; 2]) -> Result<()> {
    if x[0].party != 0 || x[1].party != 1 {
        return Err(Error::PartyMismatch(x[0].party, x[1].party));
    }
    if x[0].shape != x[1].shape {
        return Err(Error::ShapeMismatch {
            expected: x[0].shape.clone(),
            got: x[1].shape.clone(),
        });
    }
    if x[0].codec != x[1].codec {
        return Err(Error::CodecMismatch);
    }
    Ok(())
}

/// Elementwise Beaver product with no rescaling. Use when one factor is a raw
/// bit, or to inspect the exact in-ring product.
pub fn mul_shares_raw(x: &[ShareVector; 2], y: &[ShareVector; 2], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<SharePair> {
    check_pair(x)?;
    check_pair(y)?;
    let len = x[0].len();
    if y[0].len() != len {
        return Err(Error::ShapeMismatch {
            expected: x[0].shape.clone(),
            got: y[0].shape.clone(),
        });
    }
    if triple.shape != (TripleShape::Elementwise { len }) {
        return Err(Error::ShapeMismatch {
            expected: vec![len],
            got: vec![triple.shape.dims().0],
        });
    }
    triple.take()?;
    let e: [Vec<RingValue>; 2] = [0, 1].map(|j| beaver_mask(&x[j].values, &triple.parts[j].a));
    let f: [Vec<RingValue>; 2] = [0, 1].map(|j| beaver_mask(&y[j].values, &triple.parts[j].b));
    link.exchange(MessageKind::BeaverOpen, 2 * len as u64 * BYTES_PER_ELEMENT);
    let e_pub = open(&e[0], &e[1]);
    let f_pub = open(&f[0], &f[1]);
    let z = [0, 1].map(|j| ShareVector {
        values: beaver_combine(j, &e_pub, &f_pub, &triple.parts[j]),
        ..x[j].clone()
    });
    Ok(z)
}

/// Fixed-point elementwise product: Beaver multiply, then truncate each share.
pub fn mul_shares(x: &[ShareVector; 2], y: &[ShareVector; 2], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<SharePair> {
    let z = mul_shares_raw(x, y, triple, link)?;
    Ok([truncate_share(&z[0]), truncate_share(&z[1])])
}

fn matrix_dims(s: &ShareVector) -> Result<(usize, usize)> {
    match s.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            expected: vec![0, 0],
            got: other.to_vec(),
        }),
    }
}

/// Matrix Beaver product (m×k)·(k×n) with no rescaling.
pub fn matmul_shares_raw(x: &[ShareVector; 2], y: &[ShareVector; 2], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<SharePair> {
    check_pair(x)?;
    check_pair(y)?;
    let (m, k) = matrix_dims(&x[0])?;
    let (k2, n) = matrix_dims(&y[0])?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            expected: vec![k, n],
            got: y[0].shape.clone(),
        });
    }
    if triple.shape != (TripleShape::Matmul { m, k, n }) {
        return Err(Error::ShapeMismatch {
            expected: vec![m, k, n],
            got: match triple.shape {
                TripleShape::Matmul { m, k, n } => vec![m, k, n],
                TripleShape::Elementwise { len } => vec![len],
            },
        });
    }
    triple.take()?;
    let e: [Vec<RingValue>; 2] = [0, 1].map(|j| beaver_mask(&x[j].values, &triple.parts[j].a));
    let f: [Vec<RingValue>; 2] = [0, 1].map(|j| beaver_mask(&y[j].values, &triple.parts[j].b));
    link.exchange(MessageKind::BeaverOpen, (m * k + k * n) as u64 * BYTES_PER_ELEMENT);
    let e_pub = open(&e[0], &e[1]);
    let f_pub = open(&f[0], &f[1]);
    let z = [0, 1].map(|j| {
        ShareVector::new(
            j,
            beaver_combine_matmul(j, &e_pub, &f_pub, &triple.parts[j], m, k, n),
            vec![m, n],
            x[j].codec,
        )
    });
    let [z0, z1] = z;
    Ok([z0?, z1?])
}

pub fn matmul_shares(x: &[ShareVector; 2], y: &[ShareVector; 2], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<SharePair> {
    let z = matmul_shares_raw(x, y, triple, link)?;
    Ok([truncate_share(&z[0]), truncate_share(&z[1])])
}

/// Apply a local op to both halves.
pub fn both<F: Fn(&ShareVector) -> ShareVector>(x: &[ShareVector; 2], f: F) -> SharePair {
    [f(&x[0]), f(&x[1])]
}

pub fn both2<F: Fn(&ShareVector, &ShareVector) -> Result<ShareVector>>(x: &[ShareVector; 2], y: &[ShareVector; 2], f: F) -> Result<SharePair> {
    Ok([f(&x[0], &y[0])?, f(&x[1], &y[1])?])
}

pub fn reconstruct_pair(x: &[ShareVector; 2]) -> Result<Vec<RingValue>> {
    reconstruct(&x[0], &x[1])
}

pub fn reconstruct_pair_reals(x: &[ShareVector; 2]) -> Result<Vec<f64>> {
    reconstruct_reals(&x[0], &x[1])
}

/// Uniform random ring elements, handy for masks and tests.
pub fn random_ring<R: Rng>(rng: &mut R, n: usize) -> Vec<RingValue> {
    (0..n).map(|_| RingValue(rng.random())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> FixedPointCodec {
        FixedPointCodec::default()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn share_zero_and_seven() {
        let c = codec();
        let mut r = rng();
        let [s0, s1] = share(&[RingValue::ZERO], &[1], c, &mut r).unwrap();
        assert_eq!(s0.values()[0], -s1.values()[0]);
        let p = share_reals(&[7.0], &[1], c, &mut r).unwrap();
        assert_eq!(reconstruct_pair(&p).unwrap(), vec![c.encode(7.0).unwrap()]);
        let p = share_reals(&[-2.5], &[1], c, &mut r).unwrap();
        assert_eq!(reconstruct_pair_reals(&p).unwrap(), vec![-2.5]);
    }

    #[test]
    fn reconstruct_with_zero_share() {
        let c = codec();
        let x = ShareVector::new(0, vec![RingValue(5), RingValue(9)], vec![2], c).unwrap();
        let z = ShareVector::zeros(1, &[2], c);
        assert_eq!(reconstruct(&x, &z).unwrap(), vec![RingValue(5), RingValue(9)]);
        let bad = ShareVector::zeros(1, &[3], c);
        assert!(matches!(reconstruct(&x, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn add_rejects_cross_party() {
        let c = codec();
        let a = ShareVector::zeros(0, &[2], c);
        let b = ShareVector::zeros(1, &[2], c);
        assert!(matches!(add_shares(&a, &b), Err(Error::PartyMismatch(0, 1))));
    }

    #[test]
    fn doubling() {
        let c = codec();
        let mut r = rng();
        let x = share_reals(&[1.25, -3.0], &[2], c, &mut r).unwrap();
        let d = both2(&x, &x, add_shares).unwrap();
        assert_eq!(reconstruct_pair_reals(&d).unwrap(), vec![2.5, -6.0]);
    }

    #[test]
    fn mul_three_by_five() {
        let c = codec();
        let mut r = rng();
        let mut dealer = TripleDealer::new(1);
        let mut link = PairLink::loopback();
        let x = share_reals(&[3.0], &[1], c, &mut r).unwrap();
        let y = share_reals(&[5.0], &[1], c, &mut r).unwrap();
        let mut t = dealer.deal(TripleShape::Elementwise { len: 1 }).unwrap();
        let z = mul_shares(&x, &y, &mut t, &mut link).unwrap();
        let v = reconstruct_pair_reals(&z).unwrap()[0];
        assert!((v - 15.0).abs() <= c.ulp());
        assert_eq!(link.log.message_count(), 2);
        assert_eq!(link.log.total_bytes(), 2 * 16);
        assert!(matches!(mul_shares(&x, &y, &mut t, &mut link), Err(Error::TripleReuse(0))));
    }

    #[test]
    fn mul_by_zero() {
        let c = codec();
        let mut r = rng();
        let mut dealer = TripleDealer::new(2);
        let mut link = PairLink::loopback();
        let x = share_reals(&[0.0; 4], &[4], c, &mut r).unwrap();
        let y = share_reals(&[1.0, -7.5, 100.0, 0.25], &[4], c, &mut r).unwrap();
        let mut t = dealer.deal(TripleShape::Elementwise { len: 4 }).unwrap();
        let z = mul_shares(&x, &y, &mut t, &mut link).unwrap();
        for v in reconstruct_pair_reals(&z).unwrap() {
            assert!(v.abs() <= c.ulp());
        }
    }

    #[test]
    fn matmul_two_by_two() {
        let c = codec();
        let mut r = rng();
        let mut dealer = TripleDealer::new(3);
        let mut link = PairLink::loopback();
        let x = share_reals(&[1.0, 2.0, 3.0, 4.0], &[2, 2], c, &mut r).unwrap();
        let y = share_reals(&[5.0, 6.0, 7.0, 8.0], &[2, 2], c, &mut r).unwrap();
        let mut t = dealer.deal(TripleShape::Matmul { m: 2, k: 2, n: 2 }).unwrap();
        let z = matmul_shares(&x, &y, &mut t, &mut link).unwrap();
        let got = reconstruct_pair_reals(&z).unwrap();
        for (g, w) in got.iter().zip([19.0, 22.0, 43.0, 50.0]) {
            assert!((g - w).abs() <= 2.0 * c.ulp(), "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_identity() {
        let c = codec();
        let mut r = rng();
        let mut dealer = TripleDealer::new(4);
        let mut link = PairLink::loopback();
        let eye = share_reals(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3], c, &mut r).unwrap();
        let ys = [0.5, -1.0, 2.0, 3.25, 0.0, -0.125];
        let y = share_reals(&ys, &[3, 2], c, &mut r).unwrap();
        let mut t = dealer.deal(TripleShape::Matmul { m: 3, k: 3, n: 2 }).unwrap();
        let z = matmul_shares(&eye, &y, &mut t, &mut link).unwrap();
        for (g, w) in reconstruct_pair_reals(&z).unwrap().iter().zip(ys) {
            assert!((g - w).abs() <= c.ulp());
        }
    }

    #[test]
    fn dealer_is_deterministic_and_counts() {
        let mut a = TripleDealer::new(11);
        let mut b = TripleDealer::new(11);
        let ta = a.deal_triples(TripleShape::Matmul { m: 2, k: 3, n: 4 }, 5).unwrap();
        let tb = b.deal_triples(TripleShape::Matmul { m: 2, k: 3, n: 4 }, 5).unwrap();
        assert_eq!(a.issued_count(), 5);
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.part(0), y.part(0));
            assert_eq!(x.part(1), y.part(1));
        }
        assert_eq!(a.offline_bytes(), 5 * 2 * (6 + 12 + 8) * 8);
    }

    #[test]
    fn dealer_budget() {
        let mut d = TripleDealer::with_budget(0, 2);
        d.deal(TripleShape::Elementwise { len: 1 }).unwrap();
        d.deal(TripleShape::Elementwise { len: 1 }).unwrap();
        assert!(matches!(d.deal(TripleShape::Elementwise { len: 1 }), Err(Error::DealerExhausted { .. })));
    }

    #[test]
    fn public_scaling_of_large_values_does_not_wrap() {
        // Taken whole, 1000 · 0.9 at 40 fractional bits wraps about once in 10^4.
        let c = codec();
        let mut r = rng();
        let xs: Vec<f64> = (0..200_000).map(|i| if i % 2 == 0 { 1000.0 } else { -999.5 }).collect();
        let p = share_reals(&xs, &[xs.len()], c, &mut r).unwrap();
        for coef in [0.9, -0.03, 1.0 / 7.0, 2.5] {
            let got = reconstruct_pair_reals(&both(&p, |s| scale_public(s, coef).unwrap())).unwrap();
            let k = encode_public(coef).unwrap().signed() as f64 / (1u64 << PUBLIC_SCALE_BITS) as f64;
            let worst = got.iter().zip(&xs).map(|(g, x)| (g - x * k).abs()).fold(0.0, f64::max);
            assert!(worst <= 1.01 / 65536.0, "{coef}: {worst}");
        }
    }

    #[test]
    fn weighted_sum_matches_the_plain_sum() {
        let c = codec();
        let mut r = rng();
        let a = share_reals(&[1.5, -2.0, 0.25], &[3], c, &mut r).unwrap();
        let b = share_reals(&[0.5, 4.0, -8.0], &[3], c, &mut r).unwrap();
        let z = [0, 1].map(|j| scale_public_sum(&[(&a[j], 0.25), (&b[j], 0.75)]).unwrap());
        let got = reconstruct_pair_reals(&z).unwrap();
        for (g, w) in got.iter().zip([0.75, 2.5, -5.9375]) {
            assert!((g - w).abs() <= 1.0 / 65536.0, "{g} vs {w}");
        }
    }

    #[test]
    fn truncation_error_at_most_one_ulp() {
        let c = codec();
        let mut r = rng();
        for _ in 0..2000 {
            let v: i64 = r.random_range(-(1i64 << 40)..(1i64 << 40));
            let secret = RingValue::from_signed(v);
            let p = share(&[secret], &[1], c, &mut r).unwrap();
            let t = both(&p, truncate_share);
            let got = reconstruct_pair(&t).unwrap()[0].signed();
            let exact = v >> 16;
            assert!((got - exact).abs() <= 1, "{v}: {got} vs {exact}");
        }
    }
}
