//! Weighted model averaging with exact accumulation.
//!
//! Every f64 is a dyadic rational, so Σ n_k·w_k is held exactly and rounded
//! once at the end. The result depends only on the multiset of (n_k, w_k), not
//! on summation order or on how partial sums were grouped; a two-level average
//! (pairs first, then pairs of pairs) lands on the same bits as a flat one.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct Dyadic {
    m: BigInt,
    e: i32,
}

fn decompose(x: f64) -> (i64, i32) {
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as i64;
    if exp == 0 {
        (sign * frac, -1074)
    } else {
        (sign * (frac | (1i64 << 52)), exp - 1075)
    }
}

fn pow2(exp: i32) -> f64 {
    // Split so neither factor under- or overflows on its own.
    let half = exp / 2;
    2f64.powi(half) * 2f64.powi(exp - half)
}

impl Dyadic {
    fn add_term(&mut self, m: BigInt, e: i32) {
        if m.is_zero() {
            return;
        }
        if self.m.is_zero() {
            self.m = m;
            self.e = e;
        } else if e < self.e {
            self.m <<= (self.e - e) as usize;
            self.m += m;
            self.e = e;
        } else {
            self.m += m << (e - self.e) as usize;
        }
    }

    fn add_scaled(&mut self, weight: u64, x: f64) {
        if x == 0.0 || weight == 0 {
            return;
        }
        let (m, e) = decompose(x);
        self.add_term(BigInt::from(m) * weight, e);
    }

    /// m·2^e / n rounded to nearest, ties to even.
    fn div_round(&self, n: u64) -> f64 {
        if self.m.is_zero() {
            return 0.0;
        }
        let negative = self.m.sign() == Sign::Minus;
        let a: BigUint = self.m.magnitude().clone();
        let nb = BigUint::from(n);
        let shift = (66 + nb.bits() as i64 - a.bits() as i64).max(0) as usize;
        let num = a << shift;
        let q = &num / &nb;
        let sticky = !(num % &nb).is_zero();
        let drop = q.bits() as usize - 53;
        let mut mant = (&q >> drop).to_u64().unwrap();
        let rem = &q - (BigUint::from(mant) << drop);
        let half = BigUint::from(1u8) << (drop - 1);
        let up = rem > half || (rem == half && (sticky || mant & 1 == 1));
        let mut drop = drop as i32;
        if up {
            mant += 1;
            if mant == 1u64 << 53 {
                mant >>= 1;
                drop += 1;
            }
        }
        let v = mant as f64 * pow2(self.e - shift as i32 + drop);
        if negative {
            -v
        } else {
            v
        }
    }
}

/// Running Σ n_k·w_k per parameter. Partial accumulators merge exactly.
#[derive(Clone, Debug)]
pub struct ModelAccumulator {
    template: ModelParams,
    sums: Vec<Dyadic>,
    total_weight: u64,
}

impl ModelAccumulator {
    pub fn new(template: &ModelParams) -> Self {
        ModelAccumulator {
            template: template.clone(),
            sums: vec![Dyadic::default(); template.param_count()],
            total_weight: 0,
        }
    }

    pub fn total_weight(&self) -> u64 {
        self.total_weight
    }

    pub fn add(&mut self, model: &ModelParams, weight: u64) -> Result<()> {
        self.template.check_arch(model)?;
        for (s, w) in self.sums.iter_mut().zip(model.flatten()) {
            s.add_scaled(weight, w);
        }
        self.total_weight += weight;
        Ok(())
    }

    pub fn merge(&mut self, other: &ModelAccumulator) -> Result<()> {
        self.template.check_arch(&other.template)?;
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            s.add_term(o.m.clone(), o.e);
        }
        self.total_weight += other.total_weight;
        Ok(())
    }

    pub fn finish(&self) -> Result<ModelParams> {
        if self.total_weight == 0 {
            return Err(Error::Config("FedAvg needs a positive total weight".into()));
        }
        let flat: Vec<f64> = self.sums.iter().map(|s| s.div_round(self.total_weight)).collect();
        self.template.with_flat(&flat)
    }
}

/// Σ (n_k / Σn) · w_k, correctly rounded per parameter.
pub fn fedavg_plaintext(models: &[ModelParams], weights: &[u64]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::Config("FedAvg over zero models".into()))?;
    if weights.len() != models.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![models.len()],
            got: vec![weights.len()],
        });
    }
    let mut acc = ModelAccumulator::new(first);
    for (m, &w) in models.iter().zip(weights) {
        acc.add(m, w)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::build_network;

    fn scalar(v: f64) -> ModelParams {
        let specs = [crate::neural::LayerSpec::Dense { inputs: 1, outputs: 1 }];
        let m = crate::neural::init_params("scalar", &specs, 0);
        m.with_flat(&[v, 0.0]).unwrap()
    }

    #[test]
    fn midpoint_and_idempotence() {
        let avg = fedavg_plaintext(&[scalar(2.0), scalar(4.0)], &[5, 5]).unwrap();
        assert_eq!(avg.flatten()[0], 3.0);
        let m = build_network("tiny", &[4], 3).unwrap();
        let same = fedavg_plaintext(&[m.clone(), m.clone(), m.clone()], &[1, 7, 3]).unwrap();
        assert_eq!(same, m);
    }

    #[test]
    fn division_is_correctly_rounded() {
        for (x, n) in [(1.0, 3u64), (0.1, 7), (-2.5, 9), (1e-300, 3), (123456.789, 11)] {
            let mut d = Dyadic::default();
            d.add_scaled(1, x);
            assert_eq!(d.div_round(n), x / n as f64, "{x}/{n}");
        }
    }

    #[test]
    fn grouping_does_not_matter() {
        let models: Vec<_> = (0..4).map(|s| build_network("tiny", &[4], s).unwrap()).collect();
        let flat = fedavg_plaintext(&models, &[3, 3, 3, 3]).unwrap();
        let mut a = ModelAccumulator::new(&models[0]);
        a.add(&models[2], 3).unwrap();
        a.add(&models[0], 3).unwrap();
        let mut b = ModelAccumulator::new(&models[0]);
        b.add(&models[3], 3).unwrap();
        b.add(&models[1], 3).unwrap();
        b.merge(&a).unwrap();
        assert_eq!(b.finish().unwrap(), flat);
    }

    #[test]
    fn arch_mismatch() {
        let a = build_network("tiny", &[4], 0).unwrap();
        let b = build_network("tiny", &[5], 0).unwrap();
        assert!(matches!(fedavg_plaintext(&[a, b], &[1, 1]), Err(Error::ArchMismatch(_))));
    }
}
