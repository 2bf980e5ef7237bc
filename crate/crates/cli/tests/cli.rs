use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use sac_core::harness::checkpoint::{checkpoint_path, Checkpoint};

fn sac() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sac"));
    c.env("RUST_LOG", "warn");
    c
}

fn output(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn sac")
}

fn stdout(cmd: &mut Command) -> String {
    let out = output(cmd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 10] = [
    "--set", "batch_size=16",
    "--set", "hidden=8,8",
    "--set", "initial_random_steps=50",
    "--set", "eval_interval=100",
    "--set", "eval_episodes=1",
];

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "env=pointmass\nsteps=200\nseed=5\ngamma=0.95\n").unwrap();
    let csv = dir.path().join("out.csv");
    stdout(sac().arg("train").arg("--config").arg(&cfg).args(["--seed", "7"]).args(TINY).arg("--csv-out").arg(&csv));
    let text = std::fs::read_to_string(&csv).unwrap();
    let echo: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("# ")).collect();
    for want in ["env=pointmass", "steps=200", "seed=7", "gamma=0.95", "hidden=8,8"] {
        assert!(echo.contains(&want), "{want} missing from {echo:?}");
    }
    let rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 2, "header plus two eval rows");
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--env", "mountaincar"],
        vec!["train", "--set", "gamma"],
        vec!["train", "--set", "gamma=1.5"],
        vec!["train", "--set", "no_such_key=1"],
        vec!["train", "--target-entropy", "lots"],
        vec!["train", "--mode", "async", "--actors", "0"],
        vec!["train", "--mode", "async", "--actors", "2", "--lockstep"],
        vec!["sweep", "--axis", "target-entropy", "--values", "-1"],
        vec!["sweep", "--axis", "gamma", "--values", "0.9,0.99"],
    ];
    for args in cases {
        let mut cmd = sac();
        cmd.args(&args);
        if args[0] == "train" {
            cmd.args(["--steps", "100"]).arg("--checkpoint-dir").arg(dir.path());
        }
        let out = output(&mut cmd);
        assert!(!out.status.success(), "{args:?} was accepted");
        assert!(!out.stderr.is_empty(), "{args:?} failed silently");
    }
    let out = output(sac().args(["eval", "--env", "pendulum", "--episodes", "0", "--checkpoint", "missing.ckpt"]));
    assert!(!out.status.success());
}

#[test]
fn eval_reads_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    stdout(
        sac()
            .args(["train", "--env", "pointmass", "--steps", "300"])
            .args(TINY)
            .arg("--checkpoint-dir")
            .arg(dir.path()),
    );
    let ckpt = checkpoint_path(dir.path());
    let text = stdout(sac().args(["eval", "--env", "pointmass", "--episodes", "3", "--checkpoint"]).arg(&ckpt));
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("episodes,return_mean,return_min,return_max,mean_length,terminal_episodes")
    );
    let f: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(f[0], 3.0);
    assert!(f[2] <= f[1] && f[1] <= f[3]);

    // A pointmass policy cannot drive the crawler.
    let out = output(sac().args(["eval", "--env", "crawler", "--checkpoint"]).arg(&ckpt));
    assert!(!out.status.success());
}

#[test]
fn oracle_closed_forms() {
    let text = stdout(sac().args(["oracle", "q-table", "--mdp", "geometric", "--gamma", "0.5"]));
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert!((row[2].parse::<f64>().unwrap() - 2.0).abs() < 1e-10);

    let text = stdout(sac().args(["oracle", "q-table", "--mdp", "symmetric", "--gamma", "0.5", "--alpha", "1"]));
    for line in text.lines().skip(1) {
        let row: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((row[3] - 2.0 * 2f64.ln()).abs() < 1e-10);
        assert!((row[4] - 0.5).abs() < 1e-12);
    }

    let text = stdout(sac().args(["oracle", "calibrate", "--mdp", "random", "--targets", "0.3,0.6,0.9,5"]));
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let alphas: Vec<f64> = rows[..3].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(alphas.windows(2).all(|w| w[0] < w[1]), "{alphas:?}");
    // More than ln 3 nats is out of reach with three actions.
    assert_eq!(rows[3][4], "unattainable");
}

/// Pids whose command line mentions `needle`.
fn processes_mentioning(needle: &str) -> Vec<u32> {
    let mut pids = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        if let Ok(cmd) = std::fs::read(entry.path().join("cmdline")) {
            if String::from_utf8_lossy(&cmd).contains(needle) {
                pids.push(pid);
            }
        }
    }
    pids
}

fn wait_for(limit: Duration, mut ok: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if ok() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    ok()
}

#[test]
fn interrupt_stops_every_worker() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let needle = d.to_str().unwrap().to_owned();
    let mut child = sac()
        .args(["train", "--env", "pendulum", "--steps", "1000000", "--mode", "async", "--actors", "2"])
        .args(TINY)
        .args(["--set", "checkpoint_interval=100"])
        .arg("--checkpoint-dir")
        .arg(d)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    assert!(
        wait_for(Duration::from_secs(60), || {
            processes_mentioning(&needle).len() >= 4 && checkpoint_path(d).exists() && published(d) >= 2
        }),
        "workers never got going"
    );
    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let exited = wait_for(Duration::from_secs(30), || child.try_wait().unwrap().is_some());
    if !exited {
        let _ = child.kill();
    }
    assert!(exited, "supervisor ignored the interrupt");
    assert!(!child.wait().unwrap().success());
    assert!(
        wait_for(Duration::from_secs(10), || processes_mentioning(&needle).is_empty()),
        "workers outlived the supervisor"
    );
    assert!(!d.join("supervisor.lock").exists());
    Checkpoint::load(&checkpoint_path(d), None).expect("newest checkpoint intact");
}

fn published(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("versions.log")).map_or(0, |t| t.lines().count())
}
