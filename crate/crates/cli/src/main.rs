mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fusefl::grouping::{match_exact, match_greedy, GroupAssignment, RiskMatrix, DEFAULT_EXACT_CAP};
use fusefl::netsim::{upload_bytes_to, upload_bytes_total, write_csv, LinkModel, RoundReport, SweepRow, SERVER1, SERVER2};
use fusefl::neural::{build_network_with_classes, gaussian_blobs, load_mnist_idx, partition_uniform, Dataset, ModelParams};
use fusefl::protocol::calibration::{anchor_shape, calibration_model, paper_calibration, Calibration};
use fusefl::protocol::{run_scheme, scaling_sweep, ClientShape, Clients, ExecMode, Scheme, SchemeConfig, TrafficModel};
use fusefl::transcript::Transcript;

use config::{DatasetConfig, ExperimentConfig};

pub const OUT_DIR_ENV: &str = "FUSEFL_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<fusefl::Error> for CliError {
    fn from(e: fusefl::Error) -> Self {
        use fusefl::Error as E;
        match e {
            E::Config(_) | E::OddClientCount(_) | E::TooLarge { .. } | E::BadRiskMatrix(_) | E::UnknownArchitecture(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "fusefl", version, about = "Secure federated training runs, metering sweeps and client grouping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train with the configured scheme and write per-round metrics.
    Run { config: PathBuf },
    /// One metering round per client count; writes sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long = "n", num_args = 1.., required = true)]
        n: Vec<usize>,
        /// Comma-separated schemes; defaults to the configured one plus ariann_fl.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
    },
    /// Pair clients from a risk matrix file.
    Match {
        matrix: PathBuf,
        #[arg(long, conflicts_with = "greedy")]
        exact: bool,
        #[arg(long)]
        greedy: bool,
    },
    /// Summarize an IDX image/label pair.
    MnistInfo { images: PathBuf, labels: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Run { config } => cmd_run(&config),
        Cmd::Sweep { config, n, schemes } => cmd_sweep(&config, &n, &schemes),
        Cmd::Match { matrix, greedy, .. } => cmd_match(&matrix, greedy),
        Cmd::MnistInfo { images, labels } => cmd_mnist_info(&images, &labels),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

struct Inputs {
    train: Dataset,
    eval: Dataset,
    shape: Vec<usize>,
    classes: usize,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs, CliError> {
    match &cfg.dataset {
        &DatasetConfig::Synthetic { samples, dim, classes, spread, test_samples } => {
            let all = gaussian_blobs(samples + test_samples, dim, classes, spread, cfg.seed);
            let train = all.slice(0..samples);
            let eval = if test_samples > 0 { all.slice(samples..samples + test_samples) } else { train.clone() };
            Ok(Inputs { train, eval, shape: vec![dim], classes })
        }
        DatasetConfig::Mnist { images, labels, limit, test_images, test_labels } => {
            let mut train = input(images, load_mnist_idx(images, labels))?;
            if let Some(l) = limit {
                train = train.slice(0..(*l).min(train.len()));
            }
            let eval = match (test_images, test_labels) {
                (Some(i), Some(l)) => input(i, load_mnist_idx(i, l))?,
                (None, None) => train.clone(),
                _ => return Err(CliError::Config("test_images and test_labels go together".into())),
            };
            let shape = train.feature_shape().to_vec();
            let classes = train.classes();
            Ok(Inputs { train, eval, shape, classes })
        }
    }
}

fn scheme_config(cfg: &ExperimentConfig, scheme: Scheme, n: usize) -> SchemeConfig {
    SchemeConfig {
        scheme,
        n_clients: n,
        cores_per_server: cfg.cores_per_server,
        train: cfg.train(),
        mode: if scheme == Scheme::WwflLike { ExecMode::MeterOnly } else { cfg.mode },
        grouping: cfg.grouping,
        cluster_size: cfg.cluster_size,
        seed: cfg.seed,
        ..SchemeConfig::default()
    }
}

fn resolve_link(cfg: &ExperimentConfig) -> Result<(LinkModel, Option<Calibration>), CliError> {
    match cfg.link.named()? {
        Some(base) => Ok((cfg.link.apply(base)?, None)),
        None => {
            let cal = paper_calibration()?;
            Ok((cfg.link.apply(cal.link)?, Some(cal)))
        }
    }
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

#[derive(Serialize)]
struct RoundRow<'a> {
    scheme: &'a str,
    n: usize,
    round: u32,
    bytes_c2c: u64,
    bytes_s2c: u64,
    bytes_c2s: u64,
    bytes_offline: u64,
    messages: u64,
    latency_s: f64,
    c2c_time_s: f64,
    server_time_s: f64,
    compute_s: f64,
    stored_models_server1: u64,
    stored_models_server2: u64,
    stored_models_clients: u64,
    stored_models_client_aggregator: u64,
    concurrent_sessions: u64,
    throughput_clients: u64,
    accuracy: Option<f64>,
    loss: Option<f64>,
    groups: String,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    scheme: &'a str,
    n: usize,
    network: &'a str,
    mode: &'a str,
    rounds: usize,
    bytes_online: u64,
    bytes_offline: u64,
    latency_s: f64,
    compute_s: f64,
    final_accuracy: Option<f64>,
    final_loss: Option<f64>,
}

#[derive(Serialize)]
struct LayerOut<'a> {
    kind: &'a str,
    inputs: usize,
    outputs: usize,
    weight: &'a [f64],
    bias: &'a [f64],
}

#[derive(Serialize)]
struct ModelOut<'a> {
    name: &'a str,
    layers: Vec<LayerOut<'a>>,
}

fn write_model(path: &Path, m: &ModelParams) -> Result<(), CliError> {
    let out = ModelOut {
        name: &m.name,
        layers: m
            .layers
            .iter()
            .map(|l| LayerOut {
                kind: l.spec.kind(),
                inputs: l.spec.in_features(),
                outputs: l.spec.out_features(),
                weight: &l.weight,
                bias: &l.bias,
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn mode_name(m: ExecMode) -> &'static str {
    match m {
        ExecMode::Secure => "secure",
        ExecMode::Twin => "twin",
        ExecMode::MeterOnly => "meter_only",
    }
}

fn cmd_run(path: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(path)?;
    let inputs = load_inputs(&cfg)?;
    let parts = partition_uniform(&inputs.train, cfg.n_clients)?;
    let init = build_network_with_classes(&cfg.network, &inputs.shape, inputs.classes, cfg.seed)?;
    let risk = cfg.risk_matrix.as_deref().map(|p| input(p, RiskMatrix::load(p))).transpose()?;
    let (link, _) = resolve_link(&cfg)?;
    let sc = scheme_config(&cfg, cfg.scheme, cfg.n_clients);
    let out = run_scheme(&sc, &init, Clients::Data(&parts), risk.as_ref(), Some(&inputs.eval))?;
    let reports = out.reports(&link, &cfg.compute);

    let dir = prepare_out(&cfg)?;
    let name = cfg.scheme.name();
    let rows: Vec<RoundRow> = reports
        .iter()
        .zip(&out.rounds)
        .map(|(r, o)| round_row(name, cfg.n_clients, r, o.groups.as_ref()))
        .collect();
    write_csv(fs::File::create(dir.join("rounds.csv"))?, &rows)?;
    let last = reports.last();
    let summary = SummaryRow {
        scheme: name,
        n: cfg.n_clients,
        network: &cfg.network,
        mode: mode_name(sc.mode),
        rounds: reports.len(),
        bytes_online: reports.iter().map(|r| r.bytes_c2c + r.bytes_s2c + r.bytes_c2s).sum(),
        bytes_offline: reports.iter().map(|r| r.bytes_offline).sum(),
        latency_s: reports.iter().map(|r| r.latency_s).sum(),
        compute_s: reports.iter().map(|r| r.compute_s).sum(),
        final_accuracy: last.and_then(|r| r.accuracy),
        final_loss: last.and_then(|r| r.loss),
    };
    write_csv(fs::File::create(dir.join("summary.csv"))?, std::slice::from_ref(&summary))?;
    if let Some(m) = &out.model {
        write_model(&dir.join("model.json"), m)?;
    }

    println!("{:>5} {:>12} {:>12} {:>12} {:>10} {:>9} {:>9}", "round", "c2c", "s2c", "c2s", "latency_s", "accuracy", "loss");
    for r in &reports {
        println!(
            "{:>5} {:>12} {:>12} {:>12} {:>10.4} {:>9} {:>9}",
            r.round,
            r.bytes_c2c,
            r.bytes_s2c,
            r.bytes_c2s,
            r.latency_s,
            r.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            r.loss.map_or("-".into(), |l| format!("{l:.5}")),
        );
    }
    println!("{name}: n={} rounds={} online_bytes={} latency_s={:.4} -> {}", cfg.n_clients, summary.rounds, summary.bytes_online, summary.latency_s, dir.display());
    Ok(())
}

fn round_row<'a>(scheme: &'a str, n: usize, r: &RoundReport, groups: Option<&GroupAssignment>) -> RoundRow<'a> {
    RoundRow {
        scheme,
        n,
        round: r.round,
        bytes_c2c: r.bytes_c2c,
        bytes_s2c: r.bytes_s2c,
        bytes_c2s: r.bytes_c2s,
        bytes_offline: r.bytes_offline,
        messages: r.messages,
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
        accuracy: r.accuracy,
        loss: r.loss,
        groups: groups.map(|g| g.describe()).unwrap_or_default(),
    }
}

fn max_upload_per_server(t: &Transcript) -> u64 {
    [SERVER1, SERVER2, fusefl::transcript::NodeId::ClientAggregator].into_iter().map(|s| upload_bytes_to(t, s)).max().unwrap_or(0)
}

fn cmd_sweep(path: &Path, ns: &[usize], schemes: &[String]) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(path)?;
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let schemes: Vec<Scheme> = if schemes.is_empty() {
        let mut v = vec![cfg.scheme];
        if cfg.scheme != Scheme::AriannFl {
            v.push(Scheme::AriannFl);
        }
        v
    } else {
        schemes.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    for &s in &schemes {
        if let Some(&odd) = ns.iter().find(|&&n| n == 0 || (s.is_paired() && n % 2 == 1)) {
            return Err(fusefl::Error::OddClientCount(odd).into());
        }
    }
    let (link, cal) = resolve_link(&cfg)?;
    // The calibration profile carries its own model, data size and traffic figure.
    let (init, shape, traffic) = match &cal {
        Some(c) => (calibration_model()?, anchor_shape(&c.anchors), TrafficModel::PerDataset { online_bytes: c.online_bytes_per_dataset }),
        None => {
            let inputs = load_inputs(&cfg)?;
            let parts = partition_uniform(&inputs.train, cfg.n_clients)?;
            let init = build_network_with_classes(&cfg.network, &inputs.shape, inputs.classes, cfg.seed)?;
            (init, ClientShape::of(&parts[0]), TrafficModel::Engine)
        }
    };
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut baseline_upload: Vec<(usize, u64)> = Vec::new();
    for &s in &schemes {
        let base = SchemeConfig { traffic, ..scheme_config(&cfg, s, cfg.n_clients) };
        for (n, r, t) in scaling_sweep(&base, &init, shape, &ns, &link, &cfg.compute)? {
            rows.push(SweepRow::new(s.name(), n, &r, max_upload_per_server(&t)));
            if s == Scheme::AriannFl {
                baseline_upload.push((n, upload_bytes_total(&t)));
            }
        }
    }
    for r in rows.iter_mut().filter(|r| r.scheme.starts_with("fusefl")) {
        if let Some(&(_, total)) = baseline_upload.iter().find(|(n, _)| *n == r.n) {
            r.s2c_ratio = Some(total as f64 / r.upload_bytes_per_server as f64);
        }
    }
    let dir = prepare_out(&cfg)?;
    write_csv(fs::File::create(dir.join("sweep.csv"))?, &rows)?;
    println!("{:<16} {:>7} {:>14} {:>12} {:>8} {:>8} {:>9}", "scheme", "n", "latency_s", "compute_s", "server1", "clients", "s2c_ratio");
    for r in &rows {
        println!(
            "{:<16} {:>7} {:>14.3} {:>12.6} {:>8} {:>8} {:>9}",
            r.scheme,
            r.n,
            r.latency_s,
            r.compute_s,
            r.stored_models_server1,
            r.stored_models_clients,
            r.s2c_ratio.map_or("-".into(), |x| format!("{x:.3}")),
        );
    }
    println!("{} rows -> {}", rows.len(), dir.join("sweep.csv").display());
    Ok(())
}

/// A missing or unreadable input named on the command line is a usage problem.
fn input<T>(path: &Path, r: fusefl::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        fusefl::Error::Io(io) => CliError::Config(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn cmd_match(path: &Path, greedy: bool) -> Result<(), CliError> {
    let risk = input(path, RiskMatrix::load(path))?;
    let g = if greedy { match_greedy(&risk)? } else { match_exact(&risk, DEFAULT_EXACT_CAP)? };
    println!("{} cost {:.3}", g.describe(), g.cost(&risk));
    Ok(())
}

fn cmd_mnist_info(images: &Path, labels: &Path) -> Result<(), CliError> {
    let d = input(images, load_mnist_idx(images, labels))?;
    let shape = d.feature_shape();
    println!("images {} of {}x{}", d.len(), shape[0], shape.get(1).copied().unwrap_or(1));
    let mut counts = vec![0usize; d.classes()];
    for &l in d.labels() {
        counts[l] += 1;
    }
    for (c, k) in counts.iter().enumerate() {
        println!("label {c}: {k}");
    }
    let mean = d.samples().iter().sum::<f64>() / d.samples().len().max(1) as f64;
    println!("mean pixel {mean:.4}");
    Ok(())
}
