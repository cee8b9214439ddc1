//! Secure sign gate from a distributed comparison function (DCF).
//!
//! The dealer masks the secret with R and hands each party a key. The parties
//! open X + R on the low `domain_bits` and evaluate their keys locally to get
//! additive shares of [X < 0]. Writing the opened value as (x_hi, x_lo) and the
//! mask as (r_hi, r_lo), with hi the top bit:
//!
//!   msb(X) = x_hi ^ r_hi ^ [x_lo < r_lo]
//!
//! so one DCF on `domain_bits - 1` bits with payload ±1 plus a shared copy of
//! r_hi yields the bit. The opened value is exact as long as |X| < 2^(N-1).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ring::RingValue;
use crate::sharing::{beaver_mask, mul_shares_raw, BeaverTriple, SharePair, ShareVector};
use crate::transcript::{MessageKind, NodeId, PairLink};

pub const DEFAULT_DOMAIN_BITS: u32 = 32;

type Seed = [u8; 16];

struct Expansion {
    s: [Seed; 2],
    v: [u64; 2],
    t: [bool; 2],
}

/// Length-doubling PRG: one ChaCha8 block keyed by the seed.
fn prg(seed: &Seed) -> Expansion {
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(seed);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut buf = [0u8; 64];
    rng.fill_bytes(&mut buf);
    let mut s = [[0u8; 16]; 2];
    s[0].copy_from_slice(&buf[0..16]);
    s[1].copy_from_slice(&buf[24..40]);
    Expansion {
        s,
        v: [
            u64::from_le_bytes(buf[16..24].try_into().unwrap()),
            u64::from_le_bytes(buf[40..48].try_into().unwrap()),
        ],
        t: [buf[48] & 1 == 1, buf[49] & 1 == 1],
    }
}

fn seed_to_u64(s: &Seed) -> u64 {
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

fn xor_seed(a: &Seed, b: &Seed) -> Seed {
    let mut o = [0u8; 16];
    for i in 0..16 {
        o[i] = a[i] ^ b[i];
    }
    o
}

fn sign_of(t: bool, v: u64) -> u64 {
    if t {
        v.wrapping_neg()
    } else {
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CorrectionWord {
    s: Seed,
    v: u64,
    t: [bool; 2],
}

/// One party's key for f(x) = beta · [x < alpha] over `bits`-bit inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DcfKey {
    party: u8,
    bits: u32,
    seed: Seed,
    cws: Vec<CorrectionWord>,
    last: u64,
}

pub fn dcf_gen<R: RngCore>(rng: &mut R, bits: u32, alpha: u64, beta: u64) -> [DcfKey; 2] {
    let mut s0 = [0u8; 16];
    let mut s1 = [0u8; 16];
    rng.fill_bytes(&mut s0);
    rng.fill_bytes(&mut s1);
    let roots = (s0, s1);
    let (mut t0, mut t1) = (false, true);
    let mut v_alpha: u64 = 0;
    let mut cws = Vec::with_capacity(bits as usize);
    for i in (0..bits).rev() {
        let a = (alpha >> i) & 1 == 1;
        let e0 = prg(&s0);
        let e1 = prg(&s1);
        let (keep, lose) = if a { (1, 0) } else { (0, 1) };
        let s_cw = xor_seed(&e0.s[lose], &e1.s[lose]);
        let mut v_cw = sign_of(t1, e1.v[lose].wrapping_sub(e0.v[lose]).wrapping_sub(v_alpha));
        if lose == 0 {
            v_cw = v_cw.wrapping_add(sign_of(t1, beta));
        }
        v_alpha = v_alpha
            .wrapping_sub(e1.v[keep])
            .wrapping_add(e0.v[keep])
            .wrapping_add(sign_of(t1, v_cw));
        let t_cw = [e0.t[0] ^ e1.t[0] ^ a ^ true, e0.t[1] ^ e1.t[1] ^ a];
        s0 = if t0 { xor_seed(&e0.s[keep], &s_cw) } else { e0.s[keep] };
        s1 = if t1 { xor_seed(&e1.s[keep], &s_cw) } else { e1.s[keep] };
        t0 = e0.t[keep] ^ (t0 & t_cw[keep]);
        t1 = e1.t[keep] ^ (t1 & t_cw[keep]);
        cws.push(CorrectionWord { s: s_cw, v: v_cw, t: t_cw });
    }
    let last = sign_of(t1, seed_to_u64(&s1).wrapping_sub(seed_to_u64(&s0)).wrapping_sub(v_alpha));
    [
        DcfKey {
            party: 0,
            bits,
            seed: roots.0,
            cws: cws.clone(),
            last,
        },
        DcfKey {
            party: 1,
            bits,
            seed: roots.1,
            cws,
            last,
        },
    ]
}

impl DcfKey {
    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn eval(&self, x: u64) -> u64 {
        let neg = self.party == 1;
        let mut s = self.seed;
        let mut t = self.party == 1;
        let mut acc: u64 = 0;
        for (level, cw) in self.cws.iter().enumerate() {
            let i = self.bits - 1 - level as u32;
            let e = prg(&s);
            let dir = ((x >> i) & 1) as usize;
            let mut v = e.v[dir];
            if t {
                v = v.wrapping_add(cw.v);
            }
            acc = acc.wrapping_add(sign_of(neg, v));
            s = if t { xor_seed(&e.s[dir], &cw.s) } else { e.s[dir] };
            t = e.t[dir] ^ (t & cw.t[dir]);
        }
        let mut tail = seed_to_u64(&s);
        if t {
            tail = tail.wrapping_add(self.last);
        }
        acc.wrapping_add(sign_of(neg, tail))
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seed);
        for cw in &self.cws {
            out.extend_from_slice(&cw.s);
            out.extend_from_slice(&cw.v.to_le_bytes());
            out.push(cw.t[0] as u8 | ((cw.t[1] as u8) << 1));
        }
        out.extend_from_slice(&self.last.to_le_bytes());
    }

    fn read(party: u8, bits: u32, buf: &mut &[u8]) -> Result<Self> {
        let seed = take::<16>(buf)?;
        let mut cws = Vec::with_capacity(bits as usize);
        for _ in 0..bits {
            let s = take::<16>(buf)?;
            let v = u64::from_le_bytes(take::<8>(buf)?);
            let t = take::<1>(buf)?[0];
            cws.push(CorrectionWord {
                s,
                v,
                t: [t & 1 == 1, t & 2 == 2],
            });
        }
        let last = u64::from_le_bytes(take::<8>(buf)?);
        Ok(DcfKey { party, bits, seed, cws, last })
    }
}

fn take<const N: usize>(buf: &mut &[u8]) -> Result<[u8; N]> {
    if buf.len() < N {
        return Err(Error::BadKey("truncated"));
    }
    let (head, rest) = buf.split_at(N);
    *buf = rest;
    Ok(head.try_into().unwrap())
}

/// Which evaluation program the keys carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CmpBackend {
    #[default]
    Dcf,
    /// Not secure: party 1's key holds the mask in the clear. For fast tests only.
    DealerTable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Program {
    Dcf(DcfKey),
    Table { prf: u64, mask: Option<u64> },
}

/// One party's half of a comparison gate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CmpKey {
    party: u8,
    domain_bits: u32,
    mask_share: RingValue,
    offset_share: u64,
    program: Program,
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// [signed_N(x - r) < 0] for N-bit x and r.
pub fn plain_sign_bit(x: u64, r: u64, domain_bits: u32) -> u64 {
    let y = x.wrapping_sub(r) & low_mask(domain_bits);
    (y >> (domain_bits - 1)) & 1
}

impl CmpKey {
    pub fn party(&self) -> usize {
        self.party as usize
    }

    pub fn domain_bits(&self) -> u32 {
        self.domain_bits
    }

    pub fn mask_share(&self) -> RingValue {
        self.mask_share
    }

    /// Evaluate on an opened N-bit masked value; returns this party's share of the bit.
    pub fn eval(&self, masked: u64) -> u64 {
        let n = self.domain_bits;
        let masked = masked & low_mask(n);
        let hi = (masked >> (n - 1)) & 1 == 1;
        let t = match &self.program {
            Program::Dcf(k) => self.offset_share.wrapping_add(k.eval(masked & low_mask(n - 1))),
            Program::Table { prf, mask } => {
                let r = splitmix(prf ^ masked.wrapping_mul(0xA24B_AED4_963E_E407));
                match mask {
                    None => r,
                    Some(m) => plain_sign_bit(masked, *m, n).wrapping_sub(r),
                }
            }
        };
        match (&self.program, hi) {
            (Program::Table { .. }, _) | (_, false) => t,
            (Program::Dcf(_), true) => (self.party as u64).wrapping_sub(t),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.party, self.domain_bits as u8];
        out.extend_from_slice(&self.mask_share.0.to_le_bytes());
        out.extend_from_slice(&self.offset_share.to_le_bytes());
        match &self.program {
            Program::Dcf(k) => {
                out.push(0);
                k.write(&mut out);
            }
            Program::Table { prf, mask } => {
                out.push(1);
                out.extend_from_slice(&prf.to_le_bytes());
                out.extend_from_slice(&mask.unwrap_or(0).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut buf = bytes;
        let [party, bits] = take::<2>(&mut buf)?;
        let domain_bits = bits as u32;
        if party > 1 {
            return Err(Error::BadKey("party"));
        }
        if !(8..=64).contains(&domain_bits) {
            return Err(Error::BadDomain(domain_bits));
        }
        let mask_share = RingValue(u64::from_le_bytes(take::<8>(&mut buf)?));
        let offset_share = u64::from_le_bytes(take::<8>(&mut buf)?);
        let program = match take::<1>(&mut buf)?[0] {
            0 => Program::Dcf(DcfKey::read(party, domain_bits - 1, &mut buf)?),
            1 => {
                let prf = u64::from_le_bytes(take::<8>(&mut buf)?);
                let m = u64::from_le_bytes(take::<8>(&mut buf)?);
                Program::Table {
                    prf,
                    mask: (party == 1).then_some(m),
                }
            }
            _ => return Err(Error::BadKey("program tag")),
        };
        if !buf.is_empty() {
            return Err(Error::BadKey("trailing bytes"));
        }
        Ok(CmpKey {
            party,
            domain_bits,
            mask_share,
            offset_share,
            program,
        })
    }
}

/// Serialized key size, the offline bytes one party receives per gate.
pub fn key_bytes(backend: CmpBackend, domain_bits: u32) -> u64 {
    let head = 2 + 8 + 8 + 1;
    match backend {
        CmpBackend::Dcf => head + 16 + (domain_bits as u64 - 1) * 25 + 8,
        CmpBackend::DealerTable => head + 16,
    }
}

#[derive(Clone, Debug)]
pub struct CmpKeyPair {
    id: u64,
    keys: [CmpKey; 2],
    consumed: bool,
}

impl CmpKeyPair {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn key(&self, party: usize) -> &CmpKey {
        &self.keys[party]
    }

    pub fn domain_bits(&self) -> u32 {
        self.keys[0].domain_bits
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// The mask R (mod 2^64) reassembled from both halves. Test support.
    pub fn mask(&self) -> u64 {
        (self.keys[0].mask_share + self.keys[1].mask_share).0 & low_mask(self.domain_bits())
    }

    pub fn to_bytes(&self) -> [Vec<u8>; 2] {
        [self.keys[0].to_bytes(), self.keys[1].to_bytes()]
    }
}

pub fn keygen_cmp<R: RngCore>(rng: &mut R, domain_bits: u32, backend: CmpBackend, id: u64) -> Result<CmpKeyPair> {
    if !(8..=64).contains(&domain_bits) {
        return Err(Error::BadDomain(domain_bits));
    }
    let n = domain_bits;
    let r = rng.next_u64() & low_mask(n);
    let r0 = rng.next_u64();
    let r1 = r.wrapping_sub(r0);
    let keys = match backend {
        CmpBackend::Dcf => {
            let r_hi = (r >> (n - 1)) & 1;
            let r_lo = r & low_mask(n - 1);
            let beta = 1u64.wrapping_sub(2 * r_hi);
            let [k0, k1] = dcf_gen(rng, n - 1, r_lo, beta);
            let c0 = rng.next_u64();
            let c1 = r_hi.wrapping_sub(c0);
            [(0u8, r0, c0, k0), (1u8, r1, c1, k1)].map(|(party, ms, c, k)| CmpKey {
                party,
                domain_bits: n,
                mask_share: RingValue(ms),
                offset_share: c,
                program: Program::Dcf(k),
            })
        }
        CmpBackend::DealerTable => {
            let prf = rng.next_u64();
            [(0u8, r0, None), (1u8, r1, Some(r))].map(|(party, ms, mask)| CmpKey {
                party,
                domain_bits: n,
                mask_share: RingValue(ms),
                offset_share: 0,
                program: Program::Table { prf, mask },
            })
        }
    };
    Ok(CmpKeyPair {
        id,
        keys,
        consumed: false,
    })
}

/// Seeded source of comparison keys.
#[derive(Clone, Debug)]
pub struct KeyDealer {
    rng: ChaCha8Rng,
    domain_bits: u32,
    backend: CmpBackend,
    issued: u64,
}

impl KeyDealer {
    pub fn new(seed: u64, domain_bits: u32, backend: CmpBackend) -> Result<Self> {
        if !(8..=64).contains(&domain_bits) {
            return Err(Error::BadDomain(domain_bits));
        }
        Ok(KeyDealer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            domain_bits,
            backend,
            issued: 0,
        })
    }

    pub fn domain_bits(&self) -> u32 {
        self.domain_bits
    }

    pub fn backend(&self) -> CmpBackend {
        self.backend
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn keygen(&mut self) -> CmpKeyPair {
        let id = self.issued;
        self.issued += 1;
        keygen_cmp(&mut self.rng, self.domain_bits, self.backend, id).expect("domain checked at construction")
    }

    /// `count` keys, with their delivery logged as one offline message per party.
    pub fn deal_to(&mut self, count: usize, link: &mut PairLink) -> Vec<CmpKeyPair> {
        let keys: Vec<_> = (0..count).map(|_| self.keygen()).collect();
        let bytes = count as u64 * key_bytes(self.backend, self.domain_bits);
        for end in link.ends {
            link.send(NodeId::Dealer, end, MessageKind::KeyMaterial, bytes);
        }
        keys
    }
}

/// Bytes one party sends to open `len` masked values.
pub fn reveal_bytes(len: usize, domain_bits: u32) -> u64 {
    len as u64 * domain_bits.div_ceil(8) as u64
}

/// Shares of the raw bit [X < 0] per element (0/1, not fixed-point scaled).
pub fn secure_sign(x: &[ShareVector; 2], keys: &mut [CmpKeyPair], link: &mut PairLink) -> Result<SharePair> {
    let len = x[0].len();
    if x[0].party() != 0 || x[1].party() != 1 {
        return Err(Error::PartyMismatch(x[0].party(), x[1].party()));
    }
    if keys.len() != len || x[1].len() != len {
        return Err(Error::ShapeMismatch {
            expected: x[0].shape().to_vec(),
            got: vec![keys.len()],
        });
    }
    if let Some(k) = keys.iter().find(|k| k.consumed) {
        return Err(Error::KeyReuse(k.id));
    }
    let n = keys.first().map(|k| k.domain_bits()).unwrap_or(DEFAULT_DOMAIN_BITS);
    if keys.iter().any(|k| k.domain_bits() != n) {
        return Err(Error::BadKey("mixed domain sizes in one batch"));
    }
    for k in keys.iter_mut() {
        k.consumed = true;
    }
    let lm = low_mask(n);
    // Each party adds its mask share and sends the low N bits.
    let masked: [Vec<u64>; 2] = [0, 1].map(|j| {
        let neg_mask: Vec<RingValue> = keys.iter().map(|k| -k.keys[j].mask_share).collect();
        beaver_mask(x[j].values(), &neg_mask).into_iter().map(|v| v.0 & lm).collect()
    });
    link.exchange(MessageKind::MaskedReveal, reveal_bytes(len, n));
    let opened: Vec<u64> = masked[0].iter().zip(&masked[1]).map(|(a, b)| a.wrapping_add(*b) & lm).collect();
    let out = [0, 1].map(|j| {
        let vals = opened.iter().zip(keys.iter()).map(|(&o, k)| RingValue(k.keys[j].eval(o))).collect();
        ShareVector::new(j, vals, x[j].shape().to_vec(), x[j].codec())
    });
    let [a, b] = out;
    Ok([a?, b?])
}

/// Shares of 1 - b for a shared bit b.
pub fn complement_bit(b: &[ShareVector; 2]) -> Result<SharePair> {
    let one = vec![RingValue::ONE; b[0].len()];
    let neg = [0, 1].map(|j| crate::sharing::neg_share(&b[j]));
    Ok([neg[0].clone(), crate::sharing::add_public(&neg[1], &one)?])
}

/// ReLU plus the derivative mask 1 - [X < 0] it used.
pub fn secure_relu_with_mask(x: &[ShareVector; 2], keys: &mut [CmpKeyPair], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<(SharePair, SharePair)> {
    let b = secure_sign(x, keys, link)?;
    let keep = complement_bit(&b)?;
    let y = mul_shares_raw(x, &keep, triple, link)?;
    Ok((y, keep))
}

pub fn secure_relu(x: &[ShareVector; 2], keys: &mut [CmpKeyPair], triple: &mut BeaverTriple, link: &mut PairLink) -> Result<SharePair> {
    Ok(secure_relu_with_mask(x, keys, triple, link)?.0)
}

/// Fresh uniform 64-bit value, exposed for share-uniformity smoke tests.
pub fn random_u64<R: Rng>(rng: &mut R) -> u64 {
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::FixedPointCodec;
    use crate::sharing::{reconstruct_pair, reconstruct_pair_reals, share_reals, TripleDealer, TripleShape};

    #[test]
    fn dcf_small_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bits in [1u32, 3, 8] {
            for _ in 0..4 {
                let alpha = rng.next_u64() & low_mask(bits);
                let beta = rng.next_u64();
                let [k0, k1] = dcf_gen(&mut rng, bits, alpha, beta);
                for x in 0..(1u64 << bits) {
                    let got = k0.eval(x).wrapping_add(k1.eval(x));
                    let want = if x < alpha { beta } else { 0 };
                    assert_eq!(got, want, "bits {bits} alpha {alpha} x {x}");
                }
            }
        }
    }

    #[test]
    fn sign_of_minus_three_and_zero() {
        let c = FixedPointCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut kd = KeyDealer::new(9, 32, CmpBackend::Dcf).unwrap();
        let mut link = PairLink::loopback();
        let x = share_reals(&[-3.0, 0.0, 2.0, -1.0 / 65536.0], &[4], c, &mut rng).unwrap();
        let mut keys = kd.deal_to(4, &mut link);
        let b = secure_sign(&x, &mut keys, &mut link).unwrap();
        let bits: Vec<u64> = reconstruct_pair(&b).unwrap().iter().map(|v| v.0).collect();
        assert_eq!(bits, vec![1, 0, 0, 1]);
        let reveals: Vec<_> = link.log.filter(|m| m.kind == MessageKind::MaskedReveal).collect();
        assert_eq!(reveals.len(), 2);
        assert_eq!(reveals[0].bytes, 16);
        assert!(matches!(secure_sign(&x, &mut keys, &mut link), Err(Error::KeyReuse(0))));
    }

    #[test]
    fn key_bytes_round_trip_and_determinism() {
        for backend in [CmpBackend::Dcf, CmpBackend::DealerTable] {
            let mut a = KeyDealer::new(3, 20, backend).unwrap();
            let mut b = KeyDealer::new(3, 20, backend).unwrap();
            let ka = a.keygen();
            let kb = b.keygen();
            assert_eq!(ka.to_bytes(), kb.to_bytes());
            for j in 0..2 {
                let bytes = ka.key(j).to_bytes();
                assert_eq!(bytes.len() as u64, key_bytes(backend, 20));
                assert_eq!(&CmpKey::from_bytes(&bytes).unwrap(), ka.key(j));
            }
        }
        assert!(CmpKey::from_bytes(&[0, 40, 1]).is_err());
    }

    #[test]
    fn table_backend_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = keygen_cmp(&mut rng, 12, CmpBackend::DealerTable, 0).unwrap();
        let r = k.mask();
        for x in 0..(1u64 << 12) {
            let s = k.key(0).eval(x).wrapping_add(k.key(1).eval(x));
            assert_eq!(s, plain_sign_bit(x, r, 12));
        }
    }

    #[test]
    fn relu_examples() {
        let c = FixedPointCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut kd = KeyDealer::new(4, 32, CmpBackend::Dcf).unwrap();
        let mut td = TripleDealer::new(4);
        let mut link = PairLink::loopback();
        let x = share_reals(&[2.5, -2.5, 0.0], &[3], c, &mut rng).unwrap();
        let mut keys = kd.deal_to(3, &mut link);
        let mut t = td.deal(TripleShape::Elementwise { len: 3 }).unwrap();
        let y = secure_relu(&x, &mut keys, &mut t, &mut link).unwrap();
        assert_eq!(reconstruct_pair_reals(&y).unwrap(), vec![2.5, 0.0, 0.0]);
    }
}
