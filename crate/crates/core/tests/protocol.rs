use fusefl::grouping::RiskMatrix;
use fusefl::netsim::{upload_bytes_to, upload_bytes_total, upload_table, ComputeModel, LinkModel, SERVER1, SERVER2};
use fusefl::neural::{build_network, build_network_with_classes, fedavg_plaintext, gaussian_blobs, partition_uniform, train_epochs, Dataset, ModelParams, Optimizer, TrainConfig};
use fusefl::protocol::calibration::{meter, paper_calibration, FUSEFL_TOTAL_S};
use fusefl::protocol::{
    run_ariann_fl, run_fusefl_parallel, run_fusefl_serial, run_scheme, run_wwfl_like, scaling_sweep, uniform_shapes, ClientShape, Clients, ExecMode, Scheme, SchemeConfig,
};
use fusefl::transcript::{Channel, MessageKind, NodeId, Phase};
use fusefl::Error;

fn train_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        local_epochs: 2,
        global_epochs: 2,
        batch_size: 8,
        seed: 3,
    }
}

fn setup(n: usize, rows: usize, seed: u64) -> (ModelParams, Vec<Dataset>, Dataset) {
    let data = gaussian_blobs(rows * n, 4, 3, 0.6, seed);
    let parts = partition_uniform(&data, n).unwrap();
    let model = build_network_with_classes("tiny", &[4], 3, seed).unwrap();
    (model, parts, data)
}

fn cfg(scheme: Scheme, n: usize, mode: ExecMode) -> SchemeConfig {
    SchemeConfig {
        scheme,
        n_clients: n,
        mode,
        train: train_cfg(),
        cores_per_server: 4,
        ..SchemeConfig::default()
    }
}

/// Plain FedAvg over clients, each training from the global model with fresh momentum.
fn fedavg_oracle(init: &ModelParams, clients: &[Vec<&Dataset>], t: &TrainConfig) -> ModelParams {
    let mut g = init.clone();
    for _ in 0..t.global_epochs {
        let mut models = Vec::new();
        let mut weights = Vec::new();
        for c in clients {
            let mut m = g.clone();
            let mut opt = Optimizer::new(&m);
            for d in c {
                train_epochs(&mut m, &mut opt, d, t, t.local_epochs).unwrap();
            }
            models.push(m);
            weights.push(c.iter().map(|d| d.len() as u64).sum());
        }
        g = fedavg_plaintext(&models, &weights).unwrap();
    }
    g
}

#[test]
fn twin_runs_equal_their_fedavg_oracles_bit_for_bit() {
    for n in [4, 8] {
        let (init, parts, _) = setup(n, 20, n as u64);
        let t = train_cfg();
        let singles: Vec<Vec<&Dataset>> = parts.iter().map(|d| vec![d]).collect();
        let supers: Vec<Vec<&Dataset>> = (0..n / 2).map(|g| vec![&parts[2 * g], &parts[2 * g + 1]]).collect();

        let flat = fedavg_oracle(&init, &singles, &t);
        let par = run_fusefl_parallel(&cfg(Scheme::FuseflParallel, n, ExecMode::Twin), &init, &parts, None, None).unwrap();
        assert_eq!(par.model.as_ref().unwrap(), &flat, "parallel, n = {n}");
        let ari = run_ariann_fl(&cfg(Scheme::AriannFl, n, ExecMode::Twin), &init, &parts, None).unwrap();
        assert_eq!(ari.model.as_ref().unwrap(), &flat, "baseline, n = {n}");

        let sup = fedavg_oracle(&init, &supers, &t);
        let ser = run_fusefl_serial(&cfg(Scheme::FuseflSerial, n, ExecMode::Twin), &init, &parts, None, None).unwrap();
        assert_eq!(ser.model.as_ref().unwrap(), &sup, "serial, n = {n}");
    }
}

#[test]
fn one_group_with_one_local_epoch_equals_training_on_the_union() {
    let (init, parts, _) = setup(2, 16, 9);
    let t = TrainConfig {
        local_epochs: 1,
        global_epochs: 1,
        ..train_cfg()
    };
    let c = SchemeConfig { train: t, ..cfg(Scheme::FuseflSerial, 2, ExecMode::Twin) };
    let ser = run_fusefl_serial(&c, &init, &parts, None, None).unwrap();
    let union = Dataset::concat(&parts).unwrap();
    let mut m = init.clone();
    let mut opt = Optimizer::new(&m);
    train_epochs(&mut m, &mut opt, &union, &t, 1).unwrap();
    assert_eq!(ser.model.unwrap(), m);
}

#[test]
fn secure_runs_track_their_twins() {
    let n = 4;
    let (init, parts, test) = setup(n, 16, 21);
    let t = TrainConfig {
        learning_rate: 0.02,
        local_epochs: 1,
        ..train_cfg()
    };
    for scheme in [Scheme::FuseflSerial, Scheme::FuseflParallel, Scheme::AriannFl] {
        let c = SchemeConfig { train: t, ..cfg(scheme, n, ExecMode::Secure) };
        let sec = run_scheme(&c, &init, Clients::Data(&parts), None, Some(&test)).unwrap();
        let twin = run_scheme(&SchemeConfig { mode: ExecMode::Twin, ..c.clone() }, &init, Clients::Data(&parts), None, Some(&test)).unwrap();
        let d = sec.model.as_ref().unwrap().max_abs_diff(twin.model.as_ref().unwrap());
        assert!(d < 40.0 / 65536.0, "{scheme}: {d}");
        // Same bytes per channel, message by message totals.
        for (a, b) in sec.rounds.iter().zip(&twin.rounds) {
            assert_eq!(a.transcript.summary(), b.transcript.summary(), "{scheme}");
            assert_eq!(a.census, b.census);
        }
        let (sa, ta) = (sec.rounds[1].accuracy.unwrap(), twin.rounds[1].accuracy.unwrap());
        assert!((sa - ta).abs() <= 0.05, "{scheme}: {sa} vs {ta}");
    }
}

#[test]
fn runs_are_deterministic() {
    let (init, parts, test) = setup(4, 12, 5);
    let risk = RiskMatrix::from_fn(4, |i, j| ((i * 7 + j * 7) % 5) as f64 / 10.0).unwrap();
    let c = SchemeConfig { train: TrainConfig { local_epochs: 1, ..train_cfg() }, ..cfg(Scheme::FuseflParallel, 4, ExecMode::Secure) };
    let a = run_scheme(&c, &init, Clients::Data(&parts), Some(&risk), Some(&test)).unwrap();
    let b = run_scheme(&c, &init, Clients::Data(&parts), Some(&risk), Some(&test)).unwrap();
    assert_eq!(a.model, b.model);
    for (x, y) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(x.transcript, y.transcript);
        assert_eq!(x.groups, y.groups);
    }
    // Regrouping avoids repeating the first round's pairs.
    let (g0, g1) = (a.rounds[0].groups.as_ref().unwrap(), a.rounds[1].groups.as_ref().unwrap());
    assert!(g0.pairs.iter().all(|&(k, l)| !g1.contains(k, l)));
}

#[test]
fn odd_client_counts_are_rejected() {
    let (init, parts, _) = setup(3, 8, 1);
    let err = run_fusefl_serial(&cfg(Scheme::FuseflSerial, 3, ExecMode::Twin), &init, &parts, None, None).unwrap_err();
    assert!(matches!(err, Error::OddClientCount(3)));
    assert!(run_ariann_fl(&cfg(Scheme::AriannFl, 3, ExecMode::Twin), &init, &parts, None).is_ok());
}

fn meter_round(scheme: Scheme, n: usize) -> fusefl::protocol::RoundOutcome {
    let init = build_network("tiny", &[4], 0).unwrap();
    let shapes = uniform_shapes(n, 16, 1000);
    let c = SchemeConfig {
        train: TrainConfig { global_epochs: 1, ..train_cfg() },
        ..cfg(scheme, n, ExecMode::MeterOnly)
    };
    run_scheme(&c, &init, Clients::Shapes(&shapes), None, None).unwrap().rounds.remove(0)
}

#[test]
fn memory_census_matches_the_instance_table() {
    for n in [4u64, 16, 64, 128] {
        let s = meter_round(Scheme::FuseflSerial, n as usize).census;
        assert_eq!((s.server1, s.server2, s.clients, s.client_aggregator), (n / 2 + 1, n / 2 + 1, n, 0));
        let p = meter_round(Scheme::FuseflParallel, n as usize).census;
        assert_eq!((p.server1, p.server2, p.clients, p.client_aggregator), (n / 2 + 1, n / 2 + 1, 3 * n, 0));
        let a = meter_round(Scheme::AriannFl, n as usize).census;
        assert_eq!((a.server1, a.server2, a.clients, a.client_aggregator), (n + 1, 0, n, n + 1));
    }
}

#[test]
fn distribution_and_upload_message_counts() {
    let n = 16;
    let r = meter_round(Scheme::FuseflSerial, n);
    let t = &r.transcript;
    let x = build_network("tiny", &[4], 0).unwrap().param_count() as u64 * 8;
    let dist: Vec<_> = t.filter(|m| m.phase == Phase::Distribution).collect();
    assert_eq!(dist.len(), n);
    assert!(dist.iter().all(|m| m.channel() == Channel::S2C && m.bytes == x));
    let up: Vec<_> = t.filter(|m| m.phase == Phase::Upload).collect();
    assert_eq!(up.len(), n);
    assert!(up.iter().all(|m| m.channel() == Channel::C2S));
    assert_eq!(upload_bytes_to(t, SERVER1), (n as u64 / 2) * x);
    assert_eq!(upload_bytes_to(t, SERVER2), (n as u64 / 2) * x);
    // Every training byte of the paired scheme stays between clients.
    assert!(t.filter(|m| m.phase == Phase::Training).all(|m| matches!(m.channel(), Channel::C2C | Channel::Offline)));
}

#[test]
fn per_server_upload_is_half_the_baseline() {
    for n in [4, 16, 64, 128, 1000] {
        let f = meter_round(Scheme::FuseflSerial, n).transcript;
        let p = meter_round(Scheme::FuseflParallel, n).transcript;
        let a = meter_round(Scheme::AriannFl, n).transcript;
        assert_eq!(upload_bytes_total(&a), 2 * upload_bytes_to(&f, SERVER1));
        assert_eq!(upload_bytes_total(&a), 2 * upload_bytes_to(&p, SERVER2));
    }
}

#[test]
fn offloading_table_for_one_hundred_clients() {
    let init = build_network("tiny", &[4], 0).unwrap();
    let mb = 1_000_000;
    let shapes = vec![ClientShape { rows: 100, share_bytes: mb }; 100];
    let c = SchemeConfig { train: TrainConfig { global_epochs: 1, ..train_cfg() }, ..cfg(Scheme::WwflLike, 100, ExecMode::MeterOnly) };
    let ww = run_wwfl_like(&c, &init, &shapes).unwrap();
    let w = upload_table(&ww.rounds[0].transcript);
    assert_eq!((w.total_uploaded, w.per_client, w.critical_path), (200 * mb, 2 * mb, 10 * mb));
    let fs = run_scheme(&SchemeConfig { scheme: Scheme::FuseflSerial, ..c }, &init, Clients::Shapes(&shapes), None, None).unwrap();
    let f = upload_table(&fs.rounds[0].transcript);
    assert_eq!((f.total_uploaded, f.per_client, f.critical_path), (100 * mb, mb, 2 * mb));
    // Twenty cluster servers train; the clients never do.
    let trainers: std::collections::BTreeSet<_> = ww.rounds[0].transcript.filter(|m| m.kind == MessageKind::SessionOpen).flat_map(|m| [m.from, m.to]).collect();
    assert_eq!(trainers.len(), 20);
    assert!(trainers.iter().all(|n| matches!(n, NodeId::Server(s) if *s >= 3)));
}

#[test]
fn epoch_time_scales_with_server_waves_only_for_the_baseline() {
    let init = build_network("tiny", &[4], 0).unwrap();
    let base = SchemeConfig {
        cores_per_server: 16,
        train: TrainConfig { global_epochs: 1, ..train_cfg() },
        ..SchemeConfig::default()
    };
    let shape = ClientShape { rows: 32, share_bytes: 32 * 56 };
    let ns = [16, 32, 48, 64, 80, 96, 112, 128];
    let compute = ComputeModel::default();
    let link = LinkModel::lan();
    let a = scaling_sweep(&SchemeConfig { scheme: Scheme::AriannFl, ..base.clone() }, &init, shape, &ns, &link, &compute).unwrap();
    let unit = a[0].1.compute_s;
    for (n, r, _) in &a {
        let waves = n.div_ceil(16) as f64;
        assert!((r.compute_s / unit - waves).abs() < 1e-9, "n = {n}");
        assert_eq!(r.concurrent_sessions, 16);
    }
    for scheme in [Scheme::FuseflSerial, Scheme::FuseflParallel] {
        let f = scaling_sweep(&SchemeConfig { scheme, ..base.clone() }, &init, shape, &ns, &link, &compute).unwrap();
        let lo = f.iter().map(|x| x.1.compute_s).fold(f64::INFINITY, f64::min);
        let hi = f.iter().map(|x| x.1.compute_s).fold(0.0, f64::max);
        assert!(hi / lo < 1.10);
        for (n, r, _) in &f {
            assert_eq!(r.throughput_clients, *n as u64);
        }
    }
    // A parallel group finishes its two trainings side by side.
    let s = scaling_sweep(&SchemeConfig { scheme: Scheme::FuseflSerial, ..base.clone() }, &init, shape, &[16], &link, &compute).unwrap();
    let p = scaling_sweep(&SchemeConfig { scheme: Scheme::FuseflParallel, ..base }, &init, shape, &[16], &link, &compute).unwrap();
    assert!(p[0].1.compute_s < s[0].1.compute_s);
}

#[test]
fn calibrated_profile_reproduces_the_published_latencies() {
    let cal = paper_calibration().unwrap();
    let model = fusefl::protocol::calibration::calibration_model().unwrap();
    let a = meter(&cal, &model, Scheme::AriannFl, 10_000).unwrap();
    assert!((a.latency_s - 1123.0).abs() < 1e-3, "{}", a.latency_s);
    let f = meter(&cal, &model, Scheme::FuseflSerial, 10_000).unwrap();
    assert!((f.latency_s - FUSEFL_TOTAL_S).abs() <= 0.10 * FUSEFL_TOTAL_S, "{}", f.latency_s);
    let c2c: Vec<f64> = [100, 1000, 10_000].iter().map(|&n| meter(&cal, &model, Scheme::FuseflSerial, n).unwrap().c2c_time_s).collect();
    let (lo, hi) = (c2c.iter().cloned().fold(f64::INFINITY, f64::min), c2c.iter().cloned().fold(0.0, f64::max));
    assert!(hi / lo < 1.05, "{c2c:?}");
}
