//! Deterministic cost simulator over transcripts: bytes per channel, a
//! link-level latency model, a compute makespan, and model-instance census.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transcript::{Channel, MessageKind, NodeId, Phase, Transcript};

/// Per-node access links. Each node's link is half-duplex: a phase costs the
/// node (bytes in + bytes out) / bandwidth, and a phase lasts as long as its
/// busiest link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkModel {
    /// Bytes per second on each server's link.
    pub server_bandwidth: f64,
    /// Bytes per second on each client's link.
    pub client_bandwidth: f64,
    /// Client pairs talk over independent links. When false, all client-side
    /// traffic shares one fabric of `client_bandwidth`.
    pub c2c_parallel: bool,
    /// Charged once per exchange round inside a session, and once per other phase.
    pub base_rtt: f64,
    /// Fixed cost per wave of session handshakes.
    pub session_setup: f64,
    /// Both servers sit behind one uplink instead of two.
    pub serialize_servers: bool,
    /// Charge the global-model distribution phase to latency. Bytes are always counted.
    pub charge_distribution: bool,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel::lan()
    }
}

pub const PROFILES: [&str; 3] = ["lan", "wan", "paper-calibration"];

impl LinkModel {
    /// 10 Gbit/s servers, 1 Gbit/s clients, 0.2 ms round trip.
    pub fn lan() -> Self {
        LinkModel {
            server_bandwidth: 1.25e9,
            client_bandwidth: 1.25e8,
            c2c_parallel: true,
            base_rtt: 2e-4,
            session_setup: 0.030,
            serialize_servers: false,
            charge_distribution: true,
        }
    }

    /// 1 Gbit/s servers, 100 Mbit/s clients, 40 ms round trip.
    pub fn wan() -> Self {
        LinkModel {
            server_bandwidth: 1.25e8,
            client_bandwidth: 1.25e7,
            base_rtt: 0.040,
            ..LinkModel::lan()
        }
    }

    /// Same bandwidth everywhere, no round-trip term.
    pub fn uniform(bandwidth: f64) -> Self {
        LinkModel {
            server_bandwidth: bandwidth,
            client_bandwidth: bandwidth,
            base_rtt: 0.0,
            ..LinkModel::lan()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, what: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive, got {v}")))
            }
        };
        pos(self.server_bandwidth, "server_bandwidth")?;
        pos(self.client_bandwidth, "client_bandwidth")?;
        for (v, what) in [(self.base_rtt, "base_rtt"), (self.session_setup, "session_setup")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Seconds per work unit of the analytic op count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    pub sec_per_op: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        ComputeModel { sec_per_op: 2e-9 }
    }
}

/// Peak live model-sized share buffers per party.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryCensus {
    pub server1: u64,
    pub server2: u64,
    /// Sum over all clients.
    pub clients: u64,
    pub client_aggregator: u64,
}

#[derive(Clone, Debug, Default)]
pub struct MemoryLedger {
    live: BTreeMap<NodeId, u64>,
    peak: BTreeMap<NodeId, u64>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, node: NodeId, k: u64) {
        let v = self.live.entry(node).or_default();
        *v += k;
        let p = self.peak.entry(node).or_default();
        *p = (*p).max(*v);
    }

    pub fn release(&mut self, node: NodeId, k: u64) {
        let v = self.live.entry(node).or_default();
        *v = v.checked_sub(k).expect("released more buffers than allocated");
    }

    pub fn live(&self, node: NodeId) -> u64 {
        self.live.get(&node).copied().unwrap_or(0)
    }

    pub fn peak(&self, node: NodeId) -> u64 {
        self.peak.get(&node).copied().unwrap_or(0)
    }

    pub fn peaks(&self) -> &BTreeMap<NodeId, u64> {
        &self.peak
    }
}

pub const SERVER1: NodeId = NodeId::Server(1);
pub const SERVER2: NodeId = NodeId::Server(2);

pub fn memory_census(ledger: &MemoryLedger) -> MemoryCensus {
    MemoryCensus {
        server1: ledger.peak(SERVER1),
        server2: ledger.peak(SERVER2),
        clients: ledger.peaks().iter().filter(|(n, _)| matches!(n, NodeId::Client(_))).map(|(_, &v)| v).sum(),
        client_aggregator: ledger.peak(NodeId::ClientAggregator),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub bytes_c2c: u64,
    pub bytes_s2c: u64,
    pub bytes_c2s: u64,
    pub bytes_offline: u64,
    pub messages: u64,
    /// Critical-path communication time: phases run back to back.
    pub latency_s: f64,
    /// Time spent on client-to-client traffic.
    pub c2c_time_s: f64,
    /// Time spent on server-to-client and client-to-server traffic.
    pub server_time_s: f64,
    pub setup_time_s: f64,
    /// Secure-training makespan under the compute model.
    pub compute_s: f64,
    pub stored_models: MemoryCensus,
    /// Most secure sessions open in one wave.
    pub concurrent_sessions: u64,
    /// Distinct clients training in the busiest wave.
    pub throughput_clients: u64,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    #[serde(skip)]
    pub phase_times: Vec<(Phase, f64)>,
}

impl RoundReport {
    /// Communication plus compute.
    pub fn epoch_time_s(&self) -> f64 {
        self.latency_s + self.compute_s
    }

    pub fn phase_time(&self, p: Phase) -> f64 {
        self.phase_times.iter().filter(|(q, _)| *q == p).map(|(_, t)| t).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Resource {
    Node(NodeId),
    ServerUplink,
    ClientFabric,
}

fn resource(n: NodeId, ch: Channel, link: &LinkModel) -> Resource {
    match n {
        NodeId::Server(_) if link.serialize_servers => Resource::ServerUplink,
        NodeId::ClientAggregator | NodeId::Client(_) if ch == Channel::C2C && !link.c2c_parallel => Resource::ClientFabric,
        // The aggregator shares client 0's machine.
        NodeId::ClientAggregator => Resource::Node(NodeId::Client(0)),
        n => Resource::Node(n),
    }
}

fn bandwidth(r: Resource, link: &LinkModel) -> f64 {
    match r {
        Resource::ServerUplink | Resource::Node(NodeId::Server(_)) => link.server_bandwidth,
        _ => link.client_bandwidth,
    }
}

fn is_open(k: MessageKind) -> bool {
    matches!(k, MessageKind::BeaverOpen | MessageKind::MaskedReveal)
}

/// Time of one phase: the slowest link, plus round trips.
fn phase_time(t: &Transcript, phase: Phase, link: &LinkModel, only: Option<Channel>) -> f64 {
    let keep = |m: &crate::transcript::Message| {
        let ch = m.channel();
        m.phase == phase
            && ch != Channel::Offline
            && match only {
                None => true,
                Some(Channel::C2C) => ch == Channel::C2C,
                Some(_) => ch != Channel::C2C,
            }
    };
    let mut load: BTreeMap<Resource, f64> = BTreeMap::new();
    let mut any = false;
    for m in t.filter(keep) {
        let ch = m.channel();
        any |= m.count > 0;
        let (a, b) = (resource(m.from, ch, link), resource(m.to, ch, link));
        if a == b {
            // A shared fabric carries the bytes once; a node talking to itself is free.
            if a == Resource::ClientFabric {
                *load.entry(a).or_default() += m.bytes as f64;
            }
            continue;
        }
        for r in [a, b] {
            *load.entry(r).or_default() += m.bytes as f64;
        }
    }
    let wire = load.iter().map(|(&r, &b)| b / bandwidth(r, link)).fold(0.0, f64::max);
    let rtt = if phase == Phase::Training {
        // Sessions of one wave run side by side; waves run one after another.
        let mut rounds: BTreeMap<(u32, NodeId, NodeId), u64> = BTreeMap::new();
        for m in t.filter(|m| keep(m) && is_open(m.kind)) {
            let (a, b) = if m.from < m.to { (m.from, m.to) } else { (m.to, m.from) };
            if m.from == a {
                *rounds.entry((m.wave, a, b)).or_default() += m.count;
            }
        }
        let mut per_wave: BTreeMap<u32, u64> = BTreeMap::new();
        for ((w, _, _), r) in rounds {
            let e = per_wave.entry(w).or_default();
            *e = (*e).max(r);
        }
        per_wave.values().sum::<u64>() as f64 * link.base_rtt
    } else if any {
        link.base_rtt
    } else {
        0.0
    };
    wire + rtt
}

const TIMED_PHASES: [Phase; 6] = [Phase::Distribution, Phase::DataSharing, Phase::Training, Phase::Upload, Phase::Aggregation, Phase::Redistribution];

fn charged(p: Phase, link: &LinkModel) -> bool {
    link.charge_distribution || p != Phase::Distribution
}

/// Bytes and communication latency of one round's transcript.
pub fn charge_transcript(t: &Transcript, link: &LinkModel) -> RoundReport {
    let mut r = RoundReport {
        round: t.rounds().first().copied().unwrap_or(0),
        bytes_c2c: t.bytes_on(Channel::C2C),
        bytes_s2c: t.bytes_on(Channel::S2C),
        bytes_c2s: t.bytes_on(Channel::C2S),
        bytes_offline: t.bytes_on(Channel::Offline),
        messages: t.message_count(),
        ..RoundReport::default()
    };
    let waves: BTreeSet<u32> = t.filter(|m| m.kind == MessageKind::SessionOpen).map(|m| m.wave).collect();
    r.setup_time_s = waves.len() as f64 * link.session_setup;
    for p in TIMED_PHASES {
        if !charged(p, link) {
            continue;
        }
        let total = phase_time(t, p, link, None);
        if total > 0.0 {
            r.phase_times.push((p, total));
        }
        r.latency_s += total;
        r.c2c_time_s += phase_time(t, p, link, Some(Channel::C2C));
        r.server_time_s += phase_time(t, p, link, Some(Channel::S2C));
    }
    r.latency_s += r.setup_time_s;

    let mut per_wave: BTreeMap<u32, (u64, BTreeSet<NodeId>)> = BTreeMap::new();
    for m in t.filter(|m| m.kind == MessageKind::SessionOpen) {
        let e = per_wave.entry(m.wave).or_default();
        e.0 += m.count;
        for n in [m.from, m.to] {
            if matches!(n, NodeId::Client(_)) {
                e.1.insert(n);
            }
        }
    }
    r.concurrent_sessions = per_wave.values().map(|v| v.0).max().unwrap_or(0);
    r.throughput_clients = per_wave.values().map(|v| v.1.len() as u64).max().unwrap_or(0);
    r
}

/// Makespan of the logged work: within a phase, each (executor, stream) lane
/// runs its items back to back and lanes run in parallel.
pub fn charge_compute(t: &Transcript, c: &ComputeModel) -> f64 {
    let mut lanes: BTreeMap<(Phase, NodeId, u32), u64> = BTreeMap::new();
    for w in t.work() {
        *lanes.entry((w.phase, w.executor, w.stream)).or_default() += w.ops;
    }
    let mut per_phase: BTreeMap<Phase, u64> = BTreeMap::new();
    for ((p, _, _), ops) in lanes {
        let e = per_phase.entry(p).or_default();
        *e = (*e).max(ops);
    }
    per_phase.values().map(|&o| o as f64 * c.sec_per_op).sum()
}

pub fn report(t: &Transcript, link: &LinkModel, c: &ComputeModel) -> RoundReport {
    let mut r = charge_transcript(t, link);
    r.compute_s = charge_compute(t, c);
    r
}

/// Data-upload view used for the offloading comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct UploadTable {
    /// All bytes clients send while sharing data.
    pub total_uploaded: u64,
    /// Largest amount one client sends.
    pub per_client: u64,
    /// Busiest single link (in + out) in the data-sharing phase.
    pub critical_path: u64,
}

pub fn upload_table(t: &Transcript) -> UploadTable {
    let mut sent: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut link: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut total = 0;
    for m in t.filter(|m| m.phase == Phase::DataSharing && m.kind == MessageKind::DataShare) {
        if matches!(m.from, NodeId::Client(_)) {
            total += m.bytes;
            *sent.entry(m.from).or_default() += m.bytes;
        }
        *link.entry(m.from).or_default() += m.bytes;
        *link.entry(m.to).or_default() += m.bytes;
    }
    UploadTable {
        total_uploaded: total,
        per_client: sent.values().copied().max().unwrap_or(0),
        critical_path: link.values().copied().max().unwrap_or(0),
    }
}

/// Bytes of model shares that land on `node` during the upload phase.
pub fn upload_bytes_to(t: &Transcript, node: NodeId) -> u64 {
    t.filter(|m| m.phase == Phase::Upload && m.to == node).map(|m| m.bytes).sum()
}

pub fn upload_bytes_total(t: &Transcript) -> u64 {
    t.filter(|m| m.phase == Phase::Upload).map(|m| m.bytes).sum()
}

/// Find x in [lo, hi] with f(x) = target for monotone f, to relative precision `tol`.
pub fn bisect(mut lo: f64, mut hi: f64, target: f64, tol: f64, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let (flo, fhi) = (f(lo)?, f(hi)?);
    let increasing = fhi > flo;
    if (target - flo) * (target - fhi) > 0.0 {
        return Err(Error::Config(format!("bisection target {target} outside [{flo}, {fhi}]")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if (fm < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= tol * hi.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One row of a scaling sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheme: String,
    pub n: usize,
    pub bytes_c2c: u64,
    pub bytes_s2c: u64,
    pub bytes_c2s: u64,
    pub bytes_offline: u64,
    pub latency_s: f64,
    pub c2c_time_s: f64,
    pub server_time_s: f64,
    pub compute_s: f64,
    pub stored_models_server1: u64,
    pub stored_models_server2: u64,
    pub stored_models_clients: u64,
    pub stored_models_client_aggregator: u64,
    pub concurrent_sessions: u64,
    pub throughput_clients: u64,
    /// Model-share bytes landing on the busiest aggregator in the upload phase.
    pub upload_bytes_per_server: u64,
    /// Total upload bytes of the baseline over this row's per-server upload,
    /// filled for the two-server scheme when both ran at this n.
    pub s2c_ratio: Option<f64>,
}

impl SweepRow {
    pub fn new(scheme: &str, n: usize, r: &RoundReport, upload_bytes_per_server: u64) -> Self {
        SweepRow {
            scheme: scheme.to_string(),
            n,
            bytes_c2c: r.bytes_c2c,
            bytes_s2c: r.bytes_s2c,
            bytes_c2s: r.bytes_c2s,
            bytes_offline: r.bytes_offline,
            latency_s: r.latency_s,
            c2c_time_s: r.c2c_time_s,
            server_time_s: r.server_time_s,
            compute_s: r.compute_s,
            stored_models_server1: r.stored_models.server1,
            stored_models_server2: r.stored_models.server2,
            stored_models_clients: r.stored_models.clients,
            stored_models_client_aggregator: r.stored_models.client_aggregator,
            concurrent_sessions: r.concurrent_sessions,
            throughput_clients: r.throughput_clients,
            upload_bytes_per_server,
            s2c_ratio: None,
        }
    }
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
