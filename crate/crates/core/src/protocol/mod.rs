//! Training runs: the two-server paired-client scheme in its serial and
//! parallel forms, the single-server baseline with a client aggregator, and a
//! data-offloading baseline that is metered only.

pub mod calibration;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fss::KeyDealer;
use crate::grouping::{schedule_next_round, GroupAssignment, GroupingPolicy, RiskMatrix};
use crate::netsim::{memory_census, report, ComputeModel, LinkModel, MemoryCensus, MemoryLedger, RoundReport, SERVER1, SERVER2};
use crate::neural::{accuracy, fedavg_plaintext, mse_loss, train_epochs, Dataset, LayerSpec, ModelAccumulator, ModelParams, Optimizer, TrainConfig};
use crate::secure::cost::PlanTotals;
use crate::secure::{aggregate_pair, open_session, reconstruct_model, rerandomize, secure_fedavg, share_dataset, share_model, ModelShare, SessionConfig};
use crate::sharing::{TripleDealer, BYTES_PER_ELEMENT};
use crate::transcript::{Message, MessageKind, NodeId, Phase, Transcript, Work};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FuseflSerial,
    FuseflParallel,
    AriannFl,
    WwflLike,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::FuseflSerial, Scheme::FuseflParallel, Scheme::AriannFl, Scheme::WwflLike];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::FuseflSerial => "fusefl_serial",
            Scheme::FuseflParallel => "fusefl_parallel",
            Scheme::AriannFl => "ariann_fl",
            Scheme::WwflLike => "wwfl_like",
        }
    }

    pub fn is_paired(self) -> bool {
        matches!(self, Scheme::FuseflSerial | Scheme::FuseflParallel)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// How much of a run is actually computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Full two-party arithmetic on shares.
    Secure,
    /// Plaintext math in the same order, with transcripts from the analytic
    /// cost model (same byte totals as the secure engine).
    Twin,
    /// Transcripts only, no model math.
    MeterOnly,
}

/// Online traffic of one secure session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficModel {
    /// Bytes follow the engine's own message schedule.
    Engine,
    /// A flat figure per pass over one client's dataset, both directions together.
    PerDataset { online_bytes: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub n_clients: usize,
    pub cores_per_server: usize,
    pub train: TrainConfig,
    pub session: SessionConfig,
    pub mode: ExecMode,
    pub grouping: GroupingPolicy,
    pub traffic: TrafficModel,
    /// Clients per cluster in the offloading baseline.
    pub cluster_size: usize,
    pub seed: u64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            scheme: Scheme::FuseflSerial,
            n_clients: 4,
            cores_per_server: 16,
            train: TrainConfig::default(),
            session: SessionConfig::default(),
            mode: ExecMode::Twin,
            grouping: GroupingPolicy::default(),
            traffic: TrafficModel::Engine,
            cluster_size: 10,
            seed: 0,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        if self.scheme.is_paired() && self.n_clients % 2 == 1 {
            return Err(Error::OddClientCount(self.n_clients));
        }
        if self.cores_per_server == 0 || self.cluster_size == 0 {
            return Err(Error::Config("cores_per_server and cluster_size must be positive".into()));
        }
        if self.mode == ExecMode::Secure && self.traffic != TrafficModel::Engine {
            return Err(Error::Config("a traffic override only applies to twin or metering runs".into()));
        }
        if self.scheme == Scheme::WwflLike && self.mode != ExecMode::MeterOnly {
            return Err(Error::Config("the offloading baseline runs in metering mode only".into()));
        }
        Ok(())
    }
}

/// Size of one client's dataset without its contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientShape {
    pub rows: usize,
    /// Bytes of one share of the dataset.
    pub share_bytes: u64,
}

impl ClientShape {
    pub fn of(d: &Dataset) -> Self {
        ClientShape {
            rows: d.len(),
            share_bytes: d.sample_bytes(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Clients<'a> {
    Data(&'a [Dataset]),
    Shapes(&'a [ClientShape]),
}

impl Clients<'_> {
    fn len(&self) -> usize {
        match self {
            Clients::Data(d) => d.len(),
            Clients::Shapes(s) => s.len(),
        }
    }

    fn shape(&self, i: usize) -> ClientShape {
        match self {
            Clients::Data(d) => ClientShape::of(&d[i]),
            Clients::Shapes(s) => s[i],
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    pub round: u32,
    pub transcript: Transcript,
    pub census: MemoryCensus,
    pub groups: Option<GroupAssignment>,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
}

impl RoundOutcome {
    pub fn report(&self, link: &LinkModel, compute: &ComputeModel) -> RoundReport {
        let mut r = report(&self.transcript, link, compute);
        r.round = self.round;
        r.stored_models = self.census;
        r.accuracy = self.accuracy;
        r.loss = self.loss;
        r
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// None for metering runs.
    pub model: Option<ModelParams>,
    pub rounds: Vec<RoundOutcome>,
}

impl RunOutput {
    pub fn reports(&self, link: &LinkModel, compute: &ComputeModel) -> Vec<RoundReport> {
        self.rounds.iter().map(|r| r.report(link, compute)).collect()
    }
}

/// Independent stream for (round, index, purpose) under one run seed.
pub fn derive_seed(seed: u64, round: u32, index: u64, purpose: u64) -> u64 {
    let mut z = seed;
    for v in [round as u64, index, purpose] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_SHARE: u64 = 1;
const SEED_TRIPLES: u64 = 2;
const SEED_KEYS: u64 = 3;
const SEED_RERAND: u64 = 4;
const SEED_INIT: u64 = 5;

/// Global model as the aggregators hold it.
#[derive(Clone, Debug)]
enum Global {
    Shares([ModelShare; 2]),
    Plain(ModelParams),
    Absent,
}

/// One secure two-party training session over one or more client datasets.
struct Job {
    ends: [NodeId; 2],
    datasets: Vec<usize>,
    wave: u32,
    streams: [u32; 2],
}

enum Trained {
    Shares([ModelShare; 2]),
    Plain(ModelParams),
    Absent,
}

struct Ctx<'a> {
    cfg: &'a SchemeConfig,
    specs: Vec<LayerSpec>,
    clients: Clients<'a>,
}

impl Ctx<'_> {
    fn data(&self, i: usize) -> Result<&Dataset> {
        match self.clients {
            Clients::Data(d) => Ok(&d[i]),
            Clients::Shapes(_) => Err(Error::Config("secure and twin runs need client datasets".into())),
        }
    }

    fn plan(&self, job: &Job) -> PlanTotals {
        let c = self.cfg;
        let mut t = PlanTotals::default();
        for &i in &job.datasets {
            t.add_epochs(&self.specs, self.clients.shape(i).rows, c.train.batch_size, c.train.local_epochs, c.session.domain_bits, c.session.backend);
        }
        if let TrafficModel::PerDataset { online_bytes } = c.traffic {
            t.override_online(online_bytes * (job.datasets.len() * c.train.local_epochs) as u64);
        }
        t
    }

    fn run_job(&self, job: &Job, plan: &PlanTotals, global: &Global, round: u32, index: u64) -> Result<(Trained, Transcript)> {
        let c = self.cfg;
        let mut log = Transcript::new();
        let trained = match global {
            Global::Shares(g) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, round, index, SEED_SHARE));
                let shared = job
                    .datasets
                    .iter()
                    .map(|&i| share_dataset(self.data(i)?, self.specs.last().map_or(1, |l| l.out_features()), c.session.codec, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let triples = TripleDealer::new(derive_seed(c.seed, round, index, SEED_TRIPLES));
                let keys = KeyDealer::new(derive_seed(c.seed, round, index, SEED_KEYS), c.session.domain_bits, c.session.backend)?;
                let mut s = open_session(g.clone(), job.ends, triples, keys, c.session, round, job.wave)?;
                for d in &shared {
                    s.train_local(d, &c.train, c.train.local_epochs)?;
                }
                let (m, t) = s.finish();
                log.append(t);
                Trained::Shares(m)
            }
            Global::Plain(g) => {
                let mut m = g.clone();
                let mut opt = Optimizer::new(&m);
                for &i in &job.datasets {
                    train_epochs(&mut m, &mut opt, self.data(i)?, &c.train, c.train.local_epochs)?;
                }
                session_open(&mut log, job, round);
                plan.emit(job.ends, round, job.wave, &mut log);
                Trained::Plain(m)
            }
            Global::Absent => {
                session_open(&mut log, job, round);
                plan.emit(job.ends, round, job.wave, &mut log);
                Trained::Absent
            }
        };
        for e in 0..2 {
            log.push_work(Work {
                round,
                phase: Phase::Training,
                executor: job.ends[e],
                stream: job.streams[e],
                ops: plan.ops,
            });
        }
        Ok((trained, log))
    }

    fn run_jobs(&self, jobs: &[Job], global: &Global, round: u32) -> Result<(Vec<Trained>, Transcript)> {
        // Jobs over equally sized datasets share one plan.
        let mut plans: HashMap<Vec<usize>, PlanTotals> = HashMap::new();
        for j in jobs {
            let key: Vec<usize> = j.datasets.iter().map(|&i| self.clients.shape(i).rows).collect();
            plans.entry(key).or_insert_with(|| self.plan(j));
        }
        let out: Vec<_> = jobs
            .par_iter()
            .enumerate()
            .map(|(i, j)| {
                let key: Vec<usize> = j.datasets.iter().map(|&d| self.clients.shape(d).rows).collect();
                self.run_job(j, &plans[&key], global, round, i as u64)
            })
            .collect::<Result<_>>()?;
        let mut log = Transcript::new();
        let mut trained = Vec::with_capacity(out.len());
        for (m, t) in out {
            trained.push(m);
            log.append(t);
        }
        Ok((trained, log))
    }
}

fn session_open(log: &mut Transcript, job: &Job, round: u32) {
    log.push(Message {
        round,
        phase: Phase::Setup,
        from: job.ends[0],
        to: job.ends[1],
        kind: MessageKind::SessionOpen,
        bytes: 0,
        count: 1,
        wave: job.wave,
    });
}

fn send(log: &mut Transcript, round: u32, phase: Phase, from: NodeId, to: NodeId, kind: MessageKind, bytes: u64) {
    log.push(Message {
        round,
        phase,
        from,
        to,
        kind,
        bytes,
        count: 1,
        wave: 0,
    });
}

fn client(i: usize) -> NodeId {
    NodeId::Client(i as u32)
}

/// Pairs (0,1), (2,3), ... used when no risk matrix is supplied.
pub fn sequential_pairs(round: u32, n: usize) -> GroupAssignment {
    GroupAssignment::new(round, (0..n / 2).map(|g| (2 * g, 2 * g + 1)))
}

/// Log the global-model shares each group receives: [GM]_0 from server 1 to
/// the first client, [GM]_1 from server 2 to the second.
pub fn distribute_model(assignment: &GroupAssignment, model_bytes: u64, log: &mut Transcript) {
    for &(k, l) in &assignment.pairs {
        send(log, assignment.round, Phase::Distribution, SERVER1, client(k), MessageKind::ModelShare, model_bytes);
        send(log, assignment.round, Phase::Distribution, SERVER2, client(l), MessageKind::ModelShare, model_bytes);
    }
}

fn evaluate(global: &Global, eval: Option<&Dataset>) -> Result<(Option<f64>, Option<f64>)> {
    let Some(data) = eval else {
        return Ok((None, None));
    };
    let model = match global {
        Global::Shares(s) => reconstruct_model(s)?,
        Global::Plain(m) => m.clone(),
        Global::Absent => return Ok((None, None)),
    };
    Ok((Some(accuracy(&model, data)?), Some(mse_loss(&model, data)?)))
}

fn final_model(global: Global) -> Result<Option<ModelParams>> {
    Ok(match global {
        Global::Shares(s) => Some(reconstruct_model(&s)?),
        Global::Plain(m) => Some(m),
        Global::Absent => None,
    })
}

fn initial_global(cfg: &SchemeConfig, init: &ModelParams) -> Result<Global> {
    Ok(match cfg.mode {
        ExecMode::Secure => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0, SEED_INIT));
            Global::Shares(share_model(init, cfg.session.codec, &mut rng)?)
        }
        ExecMode::Twin => Global::Plain(init.clone()),
        ExecMode::MeterOnly => Global::Absent,
    })
}

fn model_bytes(init: &ModelParams) -> u64 {
    init.param_count() as u64 * BYTES_PER_ELEMENT
}

/// Run `cfg.train.global_epochs` rounds of the configured scheme.
///
/// `risk` drives regrouping for the paired schemes; without it clients are
/// paired in index order every round. `eval` is scored after each round.
pub fn run_scheme(cfg: &SchemeConfig, init: &ModelParams, clients: Clients, risk: Option<&RiskMatrix>, eval: Option<&Dataset>) -> Result<RunOutput> {
    cfg.validate()?;
    if clients.len() != cfg.n_clients {
        return Err(Error::Config(format!("{} client datasets for n_clients = {}", clients.len(), cfg.n_clients)));
    }
    if let Some(r) = risk {
        if r.n() != cfg.n_clients {
            return Err(Error::BadRiskMatrix(format!("{} rows for {} clients", r.n(), cfg.n_clients)));
        }
    }
    if cfg.mode != ExecMode::MeterOnly {
        if let Clients::Shapes(_) = clients {
            return Err(Error::Config("secure and twin runs need client datasets".into()));
        }
    }
    let ctx = Ctx {
        cfg,
        specs: init.specs(),
        clients,
    };
    match cfg.scheme {
        Scheme::FuseflSerial | Scheme::FuseflParallel => run_paired(&ctx, init, risk, eval),
        Scheme::AriannFl => run_ariann(&ctx, init, eval),
        Scheme::WwflLike => run_offload(&ctx, init),
    }
}

pub fn run_fusefl_serial(cfg: &SchemeConfig, init: &ModelParams, data: &[Dataset], risk: Option<&RiskMatrix>, eval: Option<&Dataset>) -> Result<RunOutput> {
    let cfg = SchemeConfig {
        scheme: Scheme::FuseflSerial,
        ..cfg.clone()
    };
    run_scheme(&cfg, init, Clients::Data(data), risk, eval)
}

pub fn run_fusefl_parallel(cfg: &SchemeConfig, init: &ModelParams, data: &[Dataset], risk: Option<&RiskMatrix>, eval: Option<&Dataset>) -> Result<RunOutput> {
    let cfg = SchemeConfig {
        scheme: Scheme::FuseflParallel,
        ..cfg.clone()
    };
    run_scheme(&cfg, init, Clients::Data(data), risk, eval)
}

pub fn run_ariann_fl(cfg: &SchemeConfig, init: &ModelParams, data: &[Dataset], eval: Option<&Dataset>) -> Result<RunOutput> {
    let cfg = SchemeConfig {
        scheme: Scheme::AriannFl,
        ..cfg.clone()
    };
    run_scheme(&cfg, init, Clients::Data(data), None, eval)
}

pub fn run_wwfl_like(cfg: &SchemeConfig, init: &ModelParams, clients: &[ClientShape]) -> Result<RunOutput> {
    let cfg = SchemeConfig {
        scheme: Scheme::WwflLike,
        mode: ExecMode::MeterOnly,
        ..cfg.clone()
    };
    run_scheme(&cfg, init, Clients::Shapes(clients), None, None)
}

fn run_paired(ctx: &Ctx, init: &ModelParams, risk: Option<&RiskMatrix>, eval: Option<&Dataset>) -> Result<RunOutput> {
    let cfg = ctx.cfg;
    let n = cfg.n_clients;
    let parallel = cfg.scheme == Scheme::FuseflParallel;
    let x = model_bytes(init);
    let mut global = initial_global(cfg, init)?;
    let mut history: Vec<GroupAssignment> = Vec::new();
    let mut rounds = Vec::new();
    for round in 0..cfg.train.global_epochs as u32 {
        let groups = match risk {
            Some(r) => schedule_next_round(&history, r, &cfg.grouping)?,
            None => sequential_pairs(round, n),
        };
        let mut log = Transcript::new();
        let mut mem = MemoryLedger::new();
        mem.alloc(SERVER1, 1);
        mem.alloc(SERVER2, 1);

        // Fresh share randomness every round, no traffic.
        if let Global::Shares(s) = &mut global {
            rerandomize(s, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, round, 0, SEED_RERAND)));
        }
        distribute_model(&groups, x, &mut log);
        for &(k, l) in &groups.pairs {
            mem.alloc(client(k), 1);
            mem.alloc(client(l), 1);
        }

        // Crosswise data sharing inside each group.
        for &(k, l) in &groups.pairs {
            let (sk, sl) = (ctx.clients.shape(k), ctx.clients.shape(l));
            send(&mut log, round, Phase::DataSharing, client(k), client(l), MessageKind::DataShare, sk.share_bytes);
            send(&mut log, round, Phase::DataSharing, client(l), client(k), MessageKind::DataShare, sl.share_bytes);
        }

        let mut jobs = Vec::new();
        for &(k, l) in &groups.pairs {
            let ends = [client(k), client(l)];
            if parallel {
                jobs.push(Job { ends, datasets: vec![k], wave: 0, streams: [0, 0] });
                jobs.push(Job { ends, datasets: vec![l], wave: 0, streams: [1, 1] });
                // Second model instance, then the local aggregate.
                for c in [k, l] {
                    mem.alloc(client(c), 2);
                }
            } else {
                jobs.push(Job { ends, datasets: vec![k, l], wave: 0, streams: [0, 0] });
            }
        }
        let (trained, tlog) = ctx.run_jobs(&jobs, &global, round)?;
        log.append(tlog);

        let weights: Vec<u64> = groups.pairs.iter().map(|&(k, l)| (ctx.clients.shape(k).rows + ctx.clients.shape(l).rows) as u64).collect();
        for &(k, l) in &groups.pairs {
            send(&mut log, round, Phase::Upload, client(k), SERVER1, MessageKind::ModelShare, x);
            send(&mut log, round, Phase::Upload, client(l), SERVER2, MessageKind::ModelShare, x);
            mem.alloc(SERVER1, 1);
            mem.alloc(SERVER2, 1);
        }

        global = match global {
            Global::Shares(_) => {
                let per_group: Vec<[ModelShare; 2]> = if parallel {
                    trained
                        .chunks(2)
                        .zip(&groups.pairs)
                        .map(|(pair, &(k, l))| {
                            let (Trained::Shares(a), Trained::Shares(b)) = (&pair[0], &pair[1]) else { unreachable!() };
                            let (nk, nl) = (ctx.clients.shape(k).rows as u64, ctx.clients.shape(l).rows as u64);
                            Ok([aggregate_pair(&a[0], &b[0], nk, nl)?, aggregate_pair(&a[1], &b[1], nk, nl)?])
                        })
                        .collect::<Result<_>>()?
                } else {
                    trained.into_iter().map(|t| if let Trained::Shares(s) = t { s } else { unreachable!() }).collect()
                };
                let [s0, s1]: [Vec<ModelShare>; 2] = [0, 1].map(|j| per_group.iter().map(|g| g[j].clone()).collect());
                Global::Shares([secure_fedavg(&s0, &weights)?, secure_fedavg(&s1, &weights)?])
            }
            Global::Plain(g) => {
                if parallel {
                    // Each group averages its two models; the servers merge group
                    // averages. Exact accumulation keeps this equal to flat FedAvg.
                    let mut server = ModelAccumulator::new(&g);
                    for (pair, &(k, l)) in trained.chunks(2).zip(&groups.pairs) {
                        let (Trained::Plain(a), Trained::Plain(b)) = (&pair[0], &pair[1]) else { unreachable!() };
                        let mut acc = ModelAccumulator::new(&g);
                        acc.add(a, ctx.clients.shape(k).rows as u64)?;
                        acc.add(b, ctx.clients.shape(l).rows as u64)?;
                        server.merge(&acc)?;
                    }
                    Global::Plain(server.finish()?)
                } else {
                    let models: Vec<ModelParams> = trained.into_iter().map(|t| if let Trained::Plain(m) = t { m } else { unreachable!() }).collect();
                    Global::Plain(fedavg_plaintext(&models, &weights)?)
                }
            }
            Global::Absent => Global::Absent,
        };

        let (acc, loss) = evaluate(&global, eval)?;
        rounds.push(RoundOutcome {
            round,
            transcript: log,
            census: memory_census(&mem),
            groups: Some(groups.clone()),
            accuracy: acc,
            loss,
        });
        history.push(groups);
    }
    Ok(RunOutput {
        model: final_model(global)?,
        rounds,
    })
}

/// Server 1 trains with every client, at most `cores_per_server` sessions at a
/// time. Party 0 is the server, party 1 the client. Client 0 also acts as the
/// client aggregator, which holds [GM]_1 and averages the clients' halves.
fn run_ariann(ctx: &Ctx, init: &ModelParams, eval: Option<&Dataset>) -> Result<RunOutput> {
    let cfg = ctx.cfg;
    let n = cfg.n_clients;
    let cores = cfg.cores_per_server;
    let x = model_bytes(init);
    let agg = NodeId::ClientAggregator;
    let mut global = initial_global(cfg, init)?;
    let mut rounds = Vec::new();
    for round in 0..cfg.train.global_epochs as u32 {
        let mut log = Transcript::new();
        let mut mem = MemoryLedger::new();
        mem.alloc(SERVER1, 1);
        mem.alloc(agg, 1);
        if let Global::Shares(s) = &mut global {
            rerandomize(s, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, round, 0, SEED_RERAND)));
        }
        for i in 0..n {
            send(&mut log, round, Phase::Distribution, agg, client(i), MessageKind::ModelShare, x);
            mem.alloc(client(i), 1);
        }
        for i in 0..n {
            send(&mut log, round, Phase::DataSharing, client(i), SERVER1, MessageKind::DataShare, ctx.clients.shape(i).share_bytes);
        }
        let jobs: Vec<Job> = (0..n)
            .map(|i| Job {
                ends: [SERVER1, client(i)],
                datasets: vec![i],
                wave: (i / cores) as u32,
                streams: [(i % cores) as u32, 0],
            })
            .collect();
        // The server keeps its half of every local model until aggregation.
        mem.alloc(SERVER1, n as u64);
        let (trained, tlog) = ctx.run_jobs(&jobs, &global, round)?;
        log.append(tlog);
        for i in 0..n {
            send(&mut log, round, Phase::Upload, client(i), agg, MessageKind::ModelShare, x);
            mem.alloc(agg, 1);
        }
        let weights: Vec<u64> = (0..n).map(|i| ctx.clients.shape(i).rows as u64).collect();
        global = match global {
            Global::Shares(_) => {
                let shares: Vec<[ModelShare; 2]> = trained.into_iter().map(|t| if let Trained::Shares(s) = t { s } else { unreachable!() }).collect();
                let [s0, s1]: [Vec<ModelShare>; 2] = [0, 1].map(|j| shares.iter().map(|g| g[j].clone()).collect());
                Global::Shares([secure_fedavg(&s0, &weights)?, secure_fedavg(&s1, &weights)?])
            }
            Global::Plain(_) => {
                let models: Vec<ModelParams> = trained.into_iter().map(|t| if let Trained::Plain(m) = t { m } else { unreachable!() }).collect();
                Global::Plain(fedavg_plaintext(&models, &weights)?)
            }
            Global::Absent => Global::Absent,
        };
        let (acc, loss) = evaluate(&global, eval)?;
        rounds.push(RoundOutcome {
            round,
            transcript: log,
            census: memory_census(&mem),
            groups: None,
            accuracy: acc,
            loss,
        });
    }
    Ok(RunOutput {
        model: final_model(global)?,
        rounds,
    })
}

/// Training servers of cluster `c`: two per cluster, numbered after the aggregators.
pub fn cluster_servers(c: usize) -> [NodeId; 2] {
    [NodeId::Server((3 + 2 * c) as u8), NodeId::Server((4 + 2 * c) as u8)]
}

/// Clients hand both shares of their data to their cluster's two training
/// servers, which train together and upload to the two aggregators.
fn run_offload(ctx: &Ctx, init: &ModelParams) -> Result<RunOutput> {
    let cfg = ctx.cfg;
    let n = cfg.n_clients;
    let clusters = n.div_ceil(cfg.cluster_size);
    if 3 + 2 * clusters > u8::MAX as usize {
        return Err(Error::Config(format!("{clusters} clusters exceed the server id range")));
    }
    let x = model_bytes(init);
    let mut rounds = Vec::new();
    for round in 0..cfg.train.global_epochs as u32 {
        let mut log = Transcript::new();
        let mut mem = MemoryLedger::new();
        mem.alloc(SERVER1, 1);
        mem.alloc(SERVER2, 1);
        let mut jobs = Vec::new();
        for c in 0..clusters {
            let [a, b] = cluster_servers(c);
            let members: Vec<usize> = (c * cfg.cluster_size..((c + 1) * cfg.cluster_size).min(n)).collect();
            send(&mut log, round, Phase::Distribution, SERVER1, a, MessageKind::ModelShare, x);
            send(&mut log, round, Phase::Distribution, SERVER2, b, MessageKind::ModelShare, x);
            for &i in &members {
                let bytes = ctx.clients.shape(i).share_bytes;
                send(&mut log, round, Phase::DataSharing, client(i), a, MessageKind::DataShare, bytes);
                send(&mut log, round, Phase::DataSharing, client(i), b, MessageKind::DataShare, bytes);
            }
            jobs.push(Job {
                ends: [a, b],
                datasets: members,
                wave: 0,
                streams: [0, 0],
            });
            send(&mut log, round, Phase::Upload, a, SERVER1, MessageKind::ModelShare, x);
            send(&mut log, round, Phase::Upload, b, SERVER2, MessageKind::ModelShare, x);
            mem.alloc(SERVER1, 1);
            mem.alloc(SERVER2, 1);
        }
        let (_, tlog) = ctx.run_jobs(&jobs, &Global::Absent, round)?;
        log.append(tlog);
        rounds.push(RoundOutcome {
            round,
            transcript: log,
            census: memory_census(&mem),
            groups: None,
            accuracy: None,
            loss: None,
        });
    }
    Ok(RunOutput { model: None, rounds })
}

/// `n` identical clients of `rows` rows and `share_bytes` bytes each.
pub fn uniform_shapes(n: usize, rows: usize, share_bytes: u64) -> Vec<ClientShape> {
    vec![ClientShape { rows, share_bytes }; n]
}

/// One metering round of `scheme` at each n.
pub fn scaling_sweep(base: &SchemeConfig, init: &ModelParams, shape: ClientShape, n_list: &[usize], link: &LinkModel, compute: &ComputeModel) -> Result<Vec<(usize, RoundReport, Transcript)>> {
    if n_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep sizes must be ascending".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let cfg = SchemeConfig {
                n_clients: n,
                mode: ExecMode::MeterOnly,
                train: TrainConfig { global_epochs: 1, ..base.train },
                ..base.clone()
            };
            let shapes = vec![shape; n];
            let out = run_scheme(&cfg, init, Clients::Shapes(&shapes), None, None)?;
            let r = &out.rounds[0];
            Ok((n, r.report(link, compute), r.transcript.clone()))
        })
        .collect()
}
