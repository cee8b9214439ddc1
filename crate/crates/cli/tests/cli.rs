use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fusefl(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusefl")).args(args).env("FUSEFL_OUT_DIR", out_dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

const ROUNDS_HEADER: &str = "scheme,n,round,bytes_c2c,bytes_s2c,bytes_c2s,bytes_offline,messages,latency_s,c2c_time_s,server_time_s,compute_s,stored_models_server1,stored_models_server2,stored_models_clients,stored_models_client_aggregator,concurrent_sessions,throughput_clients,accuracy,loss,groups";
const SUMMARY_HEADER: &str = "scheme,n,network,mode,rounds,bytes_online,bytes_offline,latency_s,compute_s,final_accuracy,final_loss";
const SWEEP_HEADER: &str = "scheme,n,bytes_c2c,bytes_s2c,bytes_c2s,bytes_offline,latency_s,c2c_time_s,server_time_s,compute_s,stored_models_server1,stored_models_server2,stored_models_clients,stored_models_client_aggregator,concurrent_sessions,throughput_clients,upload_bytes_per_server,s2c_ratio";

#[test]
fn smoke_run_writes_two_rounds_with_falling_loss() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusefl(&["run", fixture("smoke.toml").to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rounds = fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().next().unwrap(), ROUNDS_HEADER);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER);
    assert!(dir.path().join("model.json").exists());

    let (h, rows) = csv_rows(&dir.path().join("rounds.csv"));
    assert_eq!(rows.len(), 2);
    let loss: Vec<f64> = rows.iter().map(|r| r[col(&h, "loss")].parse().unwrap()).collect();
    assert!(loss.windows(2).all(|w| w[1] <= w[0]), "{loss:?}");
    for r in &rows {
        assert_eq!(r[col(&h, "stored_models_server1")], "3");
        assert_eq!(r[col(&h, "stored_models_clients")], "4");
    }
    assert!(stdout(&o).contains("fusefl_serial: n=4 rounds=2"));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(fusefl(&["run", fixture("smoke.toml").to_str().unwrap()], d.path()).status.success());
    }
    for f in ["rounds.csv", "summary.csv", "model.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let odd = write_config(dir.path(), "scheme = \"fusefl_parallel\"\nn_clients = 5\n[dataset]\nsource = \"synthetic\"\nsamples = 20\n");
    let o = fusefl(&["run", odd.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("odd client count"));

    let unknown = write_config(dir.path(), "scheme = \"fusefl_serial\"\nn_clients = 4\nlearnig_rate = 0.1\n[dataset]\nsource = \"synthetic\"\nsamples = 20\n");
    let o = fusefl(&["run", unknown.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnig_rate"));

    let profile = write_config(dir.path(), "scheme = \"ariann_fl\"\nn_clients = 4\n[dataset]\nsource = \"synthetic\"\nsamples = 20\n[link]\nprofile = \"dialup\"\n");
    assert_eq!(fusefl(&["run", profile.to_str().unwrap()], dir.path()).status.code(), Some(1));

    assert_eq!(fusefl(&["match", "/nonexistent/risk.txt"], dir.path()).status.code(), Some(1));
    assert_eq!(fusefl(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn match_prints_pairs_and_cost() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusefl(&["match", fixture("risk4.txt").to_str().unwrap()], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o), "(0,2) (1,3) cost 0.200\n");
    let o = fusefl(&["match", fixture("greedy_trap.txt").to_str().unwrap(), "--greedy"], dir.path());
    assert_eq!(stdout(&o), "(0,1) (2,3) cost 1.000\n");
    let o = fusefl(&["match", fixture("greedy_trap.txt").to_str().unwrap(), "--exact"], dir.path());
    assert_eq!(stdout(&o), "(0,2) (1,3) cost 0.200\n");

    let n = 6;
    let uniform: String = (0..n).map(|i| (0..n).map(|j| if i == j { "0" } else { "0.3" }).collect::<Vec<_>>().join(" ") + "\n").collect();
    let p = dir.path().join("uniform.txt");
    fs::write(&p, uniform).unwrap();
    let o = fusefl(&["match", p.to_str().unwrap()], dir.path());
    assert!(stdout(&o).ends_with("cost 0.900\n"), "{}", stdout(&o));

    fs::write(&p, "0 0.1 0.2\n0.1 0 0.3\n0.2 0.3 0\n").unwrap();
    let o = fusefl(&["match", p.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    fs::write(&p, "0 0.1\n0.1 0\n0.5 0.5\n").unwrap();
    assert_eq!(fusefl(&["match", p.to_str().unwrap()], dir.path()).status.code(), Some(1));
}

#[test]
fn sweep_reports_the_instance_table_and_upload_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = fusefl(&["sweep", fixture("smoke.toml").to_str().unwrap(), "--n", "16", "64", "128"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_HEADER);
    let (h, rows) = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let n: u64 = r[col(&h, "n")].parse().unwrap();
        let s1: u64 = r[col(&h, "stored_models_server1")].parse().unwrap();
        let cl: u64 = r[col(&h, "stored_models_clients")].parse().unwrap();
        let ca: u64 = r[col(&h, "stored_models_client_aggregator")].parse().unwrap();
        match r[0].as_str() {
            "fusefl_serial" => {
                assert_eq!((s1, cl, ca), (n / 2 + 1, n, 0));
                assert_eq!(r[col(&h, "s2c_ratio")], "2.0");
            }
            "ariann_fl" => {
                assert_eq!((s1, cl, ca), (n + 1, n, n + 1));
                assert_eq!(r[col(&h, "s2c_ratio")], "");
            }
            other => panic!("unexpected scheme {other}"),
        }
    }
}

#[test]
fn mnist_info_and_a_small_mnist_run() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40;
    let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| ((i * 37) % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    fs::write(&ip, fusefl::neural::write_idx_images(28, 28, &pixels)).unwrap();
    fs::write(&lp, fusefl::neural::write_idx_labels(&labels)).unwrap();

    let o = fusefl(&["mnist-info", ip.to_str().unwrap(), lp.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("images 40 of 28x28\n"));
    assert!(out.contains("label 9: 4\n"));

    let cfg = format!(
        "scheme = \"fusefl_parallel\"\nn_clients = 4\nnetwork = \"network1\"\nmode = \"twin\"\n[dataset]\nsource = \"mnist\"\nimages = {:?}\nlabels = {:?}\nlimit = 32\n[train]\nbatch_size = 8\nglobal_epochs = 1\n",
        ip, lp
    );
    let p = write_config(dir.path(), &cfg);
    let o = fusefl(&["run", p.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = csv_rows(&dir.path().join("rounds.csv"));
    assert_eq!(rows[0][col(&h, "stored_models_clients")], "12");

    fs::write(&lp, fusefl::neural::write_idx_labels(&labels[..10])).unwrap();
    let o = fusefl(&["mnist-info", ip.to_str().unwrap(), lp.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn offloading_baseline_runs_metered() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "scheme = \"wwfl_like\"\nn_clients = 20\n[dataset]\nsource = \"synthetic\"\nsamples = 200\n[train]\nglobal_epochs = 1\n");
    let o = fusefl(&["run", p.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (h, rows) = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(rows[0][col(&h, "mode")], "meter_only");
    assert_eq!(rows[0][col(&h, "final_accuracy")], "");
}
