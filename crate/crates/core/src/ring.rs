//! Arithmetic in Z_{2^64} and the fixed-point encoding of reals into it.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RingValue(pub u64);

impl RingValue {
    pub const ZERO: RingValue = RingValue(0);
    pub const ONE: RingValue = RingValue(1);

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn signed(self) -> i64 {
        self.0 as i64
    }

    pub fn from_signed(v: i64) -> Self {
        RingValue(v as u64)
    }
}

impl fmt::Debug for RingValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({})", self.0 as i64)
    }
}

impl Add for RingValue {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        RingValue(self.0.wrapping_add(rhs.0))
    }
}

impl Sub for RingValue {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        RingValue(self.0.wrapping_sub(rhs.0))
    }
}

impl Mul for RingValue {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        RingValue(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingValue {
    type Output = Self;
    fn neg(self) -> Self {
        RingValue(self.0.wrapping_neg())
    }
}

impl AddAssign for RingValue {
    fn add_assign(&mut self, rhs: Self) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl SubAssign for RingValue {
    fn sub_assign(&mut self, rhs: Self) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

/// Arithmetic shift right of the signed interpretation.
pub fn truncate(v: RingValue, frac_bits: u32) -> RingValue {
    RingValue(((v.0 as i64) >> frac_bits) as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec { frac_bits: 16 }
    }
}

impl FixedPointCodec {
    pub const TOTAL_BITS: u32 = 64;

    pub fn new(frac_bits: u32) -> Result<Self> {
        if !(8..=24).contains(&frac_bits) {
            return Err(Error::BadFracBits(frac_bits));
        }
        Ok(FixedPointCodec { frac_bits })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// One unit in the last fractional place.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    pub fn encode(&self, x: f64) -> Result<RingValue> {
        let bound = (1u64 << (63 - self.frac_bits)) as f64;
        if !x.is_finite() || x.abs() >= bound {
            return Err(Error::OutOfRange {
                value: x,
                frac_bits: self.frac_bits,
            });
        }
        // f64::round is half-away-from-zero; the scaling is exact.
        let scaled = (x * self.scale()).round();
        Ok(RingValue::from_signed(scaled as i64))
    }

    pub fn decode(&self, v: RingValue) -> f64 {
        v.signed() as f64 / self.scale()
    }

    pub fn truncate(&self, v: RingValue) -> RingValue {
        truncate(v, self.frac_bits)
    }

    pub fn quantize(&self, x: f64) -> Result<f64> {
        Ok(self.decode(self.encode(x)?))
    }

    pub fn encode_slice(&self, xs: &[f64]) -> Result<Vec<RingValue>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn decode_slice(&self, vs: &[RingValue]) -> Vec<f64> {
        vs.iter().map(|&v| self.decode(v)).collect()
    }
}

/// Row-major ring matrix product: (m×k)·(k×n).
pub fn ring_matmul(a: &[RingValue], b: &[RingValue], m: usize, k: usize, n: usize) -> Vec<RingValue> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0u64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p].0;
            if av == 0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = o.wrapping_add(av.wrapping_mul(bv.0));
            }
        }
    }
    out.into_iter().map(RingValue).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let c = FixedPointCodec::default();
        assert_eq!(c.encode(0.0).unwrap(), RingValue(0));
        assert_eq!(c.encode(1.5).unwrap(), RingValue(98304));
        assert_eq!(c.encode(-1.0).unwrap(), RingValue(0u64.wrapping_sub(65536)));
        assert_eq!(c.decode(RingValue(98304)), 1.5);
        assert_eq!(c.decode(RingValue(0)), 0.0);
    }

    #[test]
    fn encode_rounds_half_away() {
        let c = FixedPointCodec::new(8).unwrap();
        assert_eq!(c.encode(0.5 / 256.0).unwrap().signed(), 1);
        assert_eq!(c.encode(-0.5 / 256.0).unwrap().signed(), -1);
        assert_eq!(c.encode(0.49 / 256.0).unwrap().signed(), 0);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let c = FixedPointCodec::default();
        let bound = (1u64 << 47) as f64;
        assert!(matches!(c.encode(bound), Err(Error::OutOfRange { .. })));
        assert!(matches!(c.encode(-bound), Err(Error::OutOfRange { .. })));
        assert!(c.encode(bound - 1.0).is_ok());
        assert!(c.encode(f64::NAN).is_err());
    }

    #[test]
    fn frac_bits_bounds() {
        assert!(FixedPointCodec::new(7).is_err());
        assert!(FixedPointCodec::new(25).is_err());
        assert!(FixedPointCodec::new(24).is_ok());
    }

    #[test]
    fn truncate_product() {
        let c = FixedPointCodec::default();
        let p = c.encode(1.5).unwrap() * c.encode(2.0).unwrap();
        assert_eq!(c.truncate(p), c.encode(3.0).unwrap());
        assert_eq!(truncate(RingValue(0), 16), RingValue(0));
        let n = c.encode(-1.5).unwrap() * c.encode(2.0).unwrap();
        assert_eq!(c.truncate(n), c.encode(-3.0).unwrap());
    }

    #[test]
    fn wrapping_never_traps() {
        let max = RingValue(u64::MAX);
        assert_eq!(max + RingValue::ONE, RingValue::ZERO);
        assert_eq!(RingValue::ZERO - RingValue::ONE, max);
        assert_eq!(max * max, RingValue::ONE);
        assert_eq!(-RingValue::ONE, max);
    }

    #[test]
    fn ring_matmul_small() {
        let a: Vec<_> = [1u64, 2, 3, 4].iter().map(|&v| RingValue(v)).collect();
        let b: Vec<_> = [5u64, 6, 7, 8].iter().map(|&v| RingValue(v)).collect();
        let c = ring_matmul(&a, &b, 2, 2, 2);
        assert_eq!(c, vec![RingValue(19), RingValue(22), RingValue(43), RingValue(50)]);
    }
}
