//! A small SNR sweep of tracked active sensing, printed as CSV followed by a
//! summary. The same config as TOML drives the `otfs-isac run` binary.

use otfs_isac::harness::{analyze, sweep, write_csv, ExperimentConfig};

const CONFIG: &str = r#"
mode = "active_kf"
snr_db = [-25, -20, 0]
n_targets = [1, 2]
n_trials = 2
master_seed = 3

[trajectory]
n_steps = 10
"#;

fn main() -> otfs_isac::Result<()> {
    let cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    let res = sweep(&cfg)?;
    write_csv(&res.rows, std::io::stdout(), false)?;
    println!();
    println!("{}", analyze(&res.rows)?);
    Ok(())
}
