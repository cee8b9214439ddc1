//! Closed-form message schedule of one secure training step.
//!
//! The engine in `session.rs` and this model are written independently; the
//! audit tests require the engine's transcript to equal this schedule message
//! for message. Twin and metering-only runs emit this schedule instead of
//! doing share arithmetic.

use std::collections::BTreeMap;

use crate::fss::{key_bytes, reveal_bytes, CmpBackend};
use crate::neural::LayerSpec;
use crate::sharing::{TripleShape, BYTES_PER_ELEMENT};
use crate::transcript::{Message, MessageKind, NodeId, Phase, Transcript};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepShape {
    pub batch: usize,
    pub domain_bits: u32,
    pub backend: CmpBackend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Planned {
    /// Dealer delivers one triple to each party.
    Triple(TripleShape),
    /// Dealer delivers `n` comparison keys to each party.
    Keys(usize),
    /// Both parties send `bytes` to each other.
    Open { kind: MessageKind, bytes: u64 },
}

fn beaver_open(elems: usize) -> Planned {
    Planned::Open {
        kind: MessageKind::BeaverOpen,
        bytes: elems as u64 * BYTES_PER_ELEMENT,
    }
}

fn sign_then_mul(plan: &mut Vec<Planned>, len: usize, s: &StepShape) {
    plan.push(Planned::Keys(len));
    plan.push(Planned::Triple(TripleShape::Elementwise { len }));
    plan.push(Planned::Open {
        kind: MessageKind::MaskedReveal,
        bytes: reveal_bytes(len, s.domain_bits),
    });
    plan.push(beaver_open(2 * len));
}

fn matmul(plan: &mut Vec<Planned>, m: usize, k: usize, n: usize) {
    plan.push(Planned::Triple(TripleShape::Matmul { m, k, n }));
    plan.push(beaver_open(m * k + k * n));
}

fn elementwise(plan: &mut Vec<Planned>, len: usize) {
    plan.push(Planned::Triple(TripleShape::Elementwise { len }));
    plan.push(beaver_open(2 * len));
}

pub fn step_plan(specs: &[LayerSpec], s: &StepShape) -> Vec<Planned> {
    let b = s.batch;
    let mut plan = Vec::new();
    for spec in specs {
        match *spec {
            LayerSpec::Dense { inputs, outputs } => matmul(&mut plan, b, inputs, outputs),
            LayerSpec::Conv { out_ch, .. } => {
                let g = spec.conv().unwrap();
                matmul(&mut plan, b * g.positions(), g.patch_len(), out_ch);
            }
            LayerSpec::Relu { features } => sign_then_mul(&mut plan, b * features, s),
            LayerSpec::MaxPool { .. } => {
                let l = b * spec.out_features();
                sign_then_mul(&mut plan, 2 * l, s);
                sign_then_mul(&mut plan, l, s);
                elementwise(&mut plan, 2 * l);
            }
        }
    }
    for (i, spec) in specs.iter().enumerate().rev() {
        match *spec {
            LayerSpec::Dense { inputs, outputs } => {
                matmul(&mut plan, inputs, b, outputs);
                if i > 0 {
                    matmul(&mut plan, b, outputs, inputs);
                }
            }
            LayerSpec::Conv { out_ch, .. } => {
                let g = spec.conv().unwrap();
                let rows = b * g.positions();
                matmul(&mut plan, g.patch_len(), rows, out_ch);
                if i > 0 {
                    matmul(&mut plan, rows, out_ch, g.patch_len());
                }
            }
            LayerSpec::Relu { features } => elementwise(&mut plan, b * features),
            LayerSpec::MaxPool { .. } => elementwise(&mut plan, 4 * b * spec.out_features()),
        }
    }
    plan
}

/// Replay a plan as individual messages between `ends`.
pub fn emit_plan(plan: &[Planned], ends: [NodeId; 2], s: &StepShape, round: u32, wave: u32, log: &mut Transcript) {
    let msg = |from, to, kind, bytes| Message {
        round,
        phase: Phase::Training,
        from,
        to,
        kind,
        bytes,
        count: 1,
        wave,
    };
    for p in plan {
        match *p {
            Planned::Triple(t) => {
                for e in ends {
                    log.push(msg(NodeId::Dealer, e, MessageKind::TripleMaterial, t.material_bytes()));
                }
            }
            Planned::Keys(n) => {
                for e in ends {
                    log.push(msg(NodeId::Dealer, e, MessageKind::KeyMaterial, n as u64 * key_bytes(s.backend, s.domain_bits)));
                }
            }
            Planned::Open { kind, bytes } => {
                log.push(msg(ends[0], ends[1], kind, bytes));
                log.push(msg(ends[1], ends[0], kind, bytes));
            }
        }
    }
}

/// Who sends a message within a session, relative to its two ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Leg {
    DealerTo(usize),
    Peer(usize),
}

impl Leg {
    fn nodes(self, ends: [NodeId; 2]) -> (NodeId, NodeId) {
        match self {
            Leg::DealerTo(j) => (NodeId::Dealer, ends[j]),
            Leg::Peer(j) => (ends[j], ends[1 - j]),
        }
    }
}

/// Aggregated (count, bytes) per (leg, kind) over a run of steps, plus work units.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanTotals {
    entries: BTreeMap<(Leg, MessageKind), (u64, u64)>,
    pub ops: u64,
}

impl PlanTotals {
    fn add(&mut self, leg: Leg, kind: MessageKind, count: u64, bytes: u64) {
        let e = self.entries.entry((leg, kind)).or_default();
        e.0 += count;
        e.1 += bytes;
    }

    pub fn add_step(&mut self, specs: &[LayerSpec], s: &StepShape) {
        for p in step_plan(specs, s) {
            match p {
                Planned::Triple(t) => {
                    for j in 0..2 {
                        self.add(Leg::DealerTo(j), MessageKind::TripleMaterial, 1, t.material_bytes());
                    }
                }
                Planned::Keys(n) => {
                    for j in 0..2 {
                        self.add(Leg::DealerTo(j), MessageKind::KeyMaterial, 1, n as u64 * key_bytes(s.backend, s.domain_bits));
                    }
                }
                Planned::Open { kind, bytes } => {
                    for j in 0..2 {
                        self.add(Leg::Peer(j), kind, 1, bytes);
                    }
                }
            }
        }
        self.ops += step_ops(specs, s);
    }

    /// All steps of `epochs` passes over `rows` rows in batches of `batch_size`.
    pub fn add_epochs(&mut self, specs: &[LayerSpec], rows: usize, batch_size: usize, epochs: usize, domain_bits: u32, backend: CmpBackend) {
        let full = rows / batch_size.max(1);
        let tail = rows % batch_size.max(1);
        let mut one = |batch: usize, times: u64| {
            if times == 0 || batch == 0 {
                return;
            }
            let mut t = PlanTotals::default();
            t.add_step(specs, &StepShape { batch, domain_bits, backend });
            self.merge_scaled(&t, times);
        };
        one(batch_size, (full * epochs) as u64);
        one(tail, epochs as u64);
    }

    /// Replace the online traffic by a flat figure: `bytes_total` split evenly
    /// between the two directions, one message each. Offline material and work
    /// units are kept.
    pub fn override_online(&mut self, bytes_total: u64) {
        self.entries.retain(|(leg, _), _| matches!(leg, Leg::DealerTo(_)));
        self.add(Leg::Peer(0), MessageKind::BeaverOpen, 1, bytes_total / 2);
        self.add(Leg::Peer(1), MessageKind::BeaverOpen, 1, bytes_total - bytes_total / 2);
    }

    pub fn merge_scaled(&mut self, other: &PlanTotals, times: u64) {
        for (&k, &(c, b)) in &other.entries {
            self.add(k.0, k.1, c * times, b * times);
        }
        self.ops += other.ops * times;
    }

    pub fn online_bytes(&self) -> u64 {
        self.entries.iter().filter(|((leg, _), _)| matches!(leg, Leg::Peer(_))).map(|(_, v)| v.1).sum()
    }

    pub fn offline_bytes(&self) -> u64 {
        self.entries.iter().filter(|((leg, _), _)| matches!(leg, Leg::DealerTo(_))).map(|(_, v)| v.1).sum()
    }

    /// One compact message per (leg, kind).
    pub fn emit(&self, ends: [NodeId; 2], round: u32, wave: u32, log: &mut Transcript) {
        for (&(leg, kind), &(count, bytes)) in &self.entries {
            let (from, to) = leg.nodes(ends);
            log.push(Message {
                round,
                phase: Phase::Training,
                from,
                to,
                kind,
                bytes,
                count,
                wave,
            });
        }
    }
}

/// Multiply-accumulate count charged for one PRG expansion in a DCF walk.
pub const PRG_OPS: u64 = 32;

/// Work units of one step on the busier party: each Beaver product costs
/// three local products, each sign costs one PRG call per tree level, and the
/// update costs a handful of ops per parameter.
pub fn step_ops(specs: &[LayerSpec], s: &StepShape) -> u64 {
    let mut ops = 0u64;
    for p in step_plan(specs, s) {
        ops += match p {
            Planned::Triple(TripleShape::Matmul { m, k, n }) => 3 * (m * k * n) as u64,
            Planned::Triple(TripleShape::Elementwise { len }) => 3 * len as u64,
            Planned::Keys(n) => n as u64 * (s.domain_bits as u64 - 1) * PRG_OPS,
            Planned::Open { .. } => 0,
        };
    }
    let params: u64 = specs.iter().map(|l| l.param_count() as u64).sum();
    ops + 8 * params
}

/// Online bytes (both directions) of one step.
pub fn step_online_bytes(specs: &[LayerSpec], s: &StepShape) -> u64 {
    step_plan(specs, s)
        .iter()
        .map(|p| match p {
            Planned::Open { bytes, .. } => 2 * bytes,
            _ => 0,
        })
        .sum()
}

/// Exchange rounds of one step: every Beaver product opens once and every
/// sign batch reveals once.
pub fn step_rounds(specs: &[LayerSpec], s: &StepShape) -> usize {
    step_plan(specs, s).iter().filter(|p| matches!(p, Planned::Open { .. })).count()
}
