//! Generates a replayable scenario (layout plus vehicle trajectories), saves
//! it as JSON, and checks that it regenerates exactly from its seeds.

use otfs_isac::scenario::{LayoutMode, ScenarioFile, TrajectoryConfig};

fn main() -> otfs_isac::Result<()> {
    let cfg = TrajectoryConfig::default();
    let scen = ScenarioFile::generate(42, 0, LayoutMode::Random, 3, 2, 2, &cfg)?;
    println!("receivers: {:?}", scen.layout.receivers);
    for (i, t) in scen.trajectories.iter().enumerate() {
        let speeds: Vec<f64> = t.velocities.iter().map(|v| v[0].hypot(v[1])).collect();
        println!(
            "vehicle {i}: start ({:.1}, {:.1}) end ({:.1}, {:.1}) speed {:.1}..{:.1} m/s",
            t.positions[0][0],
            t.positions[0][1],
            t.positions[t.len() - 1][0],
            t.positions[t.len() - 1][1],
            speeds.iter().cloned().fold(f64::INFINITY, f64::min),
            speeds.iter().cloned().fold(0.0, f64::max)
        );
    }
    let path = std::env::temp_dir().join("otfs_isac_scenario.json");
    scen.save(&path)?;
    let back = ScenarioFile::load(&path)?;
    back.verify()?;
    println!("saved to {} and replayed exactly", path.display());
    Ok(())
}
