use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = "\
physics.lambda = 1.0
physics.mu = 1.0
physics.alpha = 1.0
physics.k_perm = 1.0
physics.nu = 1.0
physics.beta = 1.0
grid.n1 = 4
grid.n2 = 4
grid.nb = 4
grid.nf = 4
time.dt = 0.05
time.t_end = 0.2
run.u0_3 = sin(pi*(1-x3)/2)*cos(2*pi*x1)
";

fn regime(rho: f64, delta: f64, c0: f64) -> String {
    format!("{BASE}physics.rho_b = {rho}\nphysics.rho_f = {rho}\nphysics.delta = {delta}\nphysics.c0 = {c0}\n")
}

fn bsqs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsqs"))
        .args(args)
        .env_remove("BSQS_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("case.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bsqs(&["run", "--config", "/nonexistent/case.cfg", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[USAGE]"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_malformed_config_exit_with_one() {
    assert_eq!(bsqs(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(bsqs(&[]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "physics.lambda = = 2\n");
    let o = bsqs(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    let o = bsqs(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("greens-check"));
}

#[test]
fn incompatible_data_in_the_degenerate_regime_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{}run.d0 = 1 + x3\n", regime(0.0, 0.0, 0.0));
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let o = bsqs(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[INCOMPATIBLE_DATA]"), "{}", stderr(&o));
}

#[test]
fn run_writes_trajectory_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &regime(0.5, 0.1, 0.3));
    let out = dir.path().join("out");
    let o = bsqs(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--snapshot-every", "2", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("n,t,energy,"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    for n in [0, 2, 4] {
        assert!(out.join(format!("snapshot_{n:06}.bsqs")).exists(), "snapshot {n}");
    }
}

#[test]
fn repeated_runs_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &regime(1.0, 0.1, 1.0));
    let mut files = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        let o = bsqs(&["audit", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads, "--seed", "7"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        files.push(fs::read(out.join("energy.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn restart_reproduces_the_tail_of_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &regime(0.5, 0.1, 0.3));
    let full = dir.path().join("full");
    let o = bsqs(&["run", "--config", &cfg, "--out", full.to_str().unwrap(), "--snapshot-every", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let snap = full.join("snapshot_000002.bsqs");
    let rest = dir.path().join("rest");
    let o = bsqs(&["run", "--config", &cfg, "--out", rest.to_str().unwrap(), "--restart", snap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let energies = |p: &Path| -> Vec<(f64, f64)> {
        fs::read_to_string(p.join("trajectory.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
                (f[1], f[2])
            })
            .collect()
    };
    let a = energies(&full);
    let b = energies(&rest);
    assert_eq!(b.len(), 3);
    for ((ta, ea), (tb, eb)) in a[2..].iter().zip(&b) {
        assert!((ta - tb).abs() < 1e-14);
        assert!((ea - eb).abs() <= 1e-10 * ea.abs().max(1.0), "{ea} vs {eb}");
    }
}

#[test]
fn restart_with_a_different_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &regime(0.5, 0.1, 0.3));
    let full = dir.path().join("full");
    assert_eq!(bsqs(&["run", "--config", &cfg, "--out", full.to_str().unwrap(), "--quiet"]).status.code(), Some(0));
    let other = write_config(dir.path(), &regime(0.5, 0.1, 0.3).replace("grid.nb = 4", "grid.nb = 6"));
    let snap = full.join("snapshot_000000.bsqs");
    let o = bsqs(&["run", "--config", &other, "--out", dir.path().join("x").to_str().unwrap(), "--restart", snap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[GRID_MISMATCH]"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &regime(1.0, 0.1, 1.0));
    let out = dir.path().join("out");
    let o = bsqs(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "rho_joint", "--values", "0.1,0.01,0.001", "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep_rho_joint.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).filter(|l| !l.starts_with('#')).count(), 3);
    let o = bsqs(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "gravity", "--values", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn greens_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bsqs(&["greens-check", "--out", dir.path().to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("greens.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
}
