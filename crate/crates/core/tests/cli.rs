use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_otfs-isac"))
}

#[test]
fn run_analyze_and_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "mode = \"active\"\nsnr_db = [0]\nn_trials = 1\n[trajectory]\nn_steps = 2\n",
    )
    .unwrap();
    let out = dir.path().join("res.csv");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "3", "--mode", "active_kf", "--threads", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("mode,snr_db"));
    assert!(csv.lines().nth(1).unwrap().starts_with("active_kf,0,"));
    assert!(dir.path().join("res.csv.meta.json").exists());

    let analysis = bin().arg("analyze").arg("--input").arg(&out).output().unwrap();
    assert!(analysis.status.success());
    assert!(String::from_utf8_lossy(&analysis.stdout).contains("position rmse"));

    let scen = dir.path().join("scen.json");
    assert!(bin()
        .args(["scenario", "emit", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&scen)
        .args(["--n-targets", "2"])
        .status()
        .unwrap()
        .success());
    assert!(bin().args(["scenario", "replay", "--input"]).arg(&scen).status().unwrap().success());

    // a tampered trajectory no longer replays
    let text = std::fs::read_to_string(&scen).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["trajectories"][0]["positions"][1][0] = serde_json::json!(-1.0);
    std::fs::write(&scen, v.to_string()).unwrap();
    assert!(!bin().args(["scenario", "replay", "--input"]).arg(&scen).status().unwrap().success());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "mode = \"active\"\nbogus = 1\n").unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
