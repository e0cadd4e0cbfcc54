//! Random vehicle trajectories, node layouts and replayable scenario files.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deploy::place_orthogonal_optimal;
use crate::error::{Error, Result};
use crate::fusion::NodeLayout;
use crate::seed::derive_seed;
use crate::state::{Point, TargetState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub n_steps: usize,
    pub dt: f64,
    /// Declared acceleration noise; the generator drives acceleration through
    /// the jerk term only, so this value is carried but not used.
    pub sigma_a: f64,
    pub sigma_j: f64,
    pub sigma_theta: f64,
    pub p_turn: f64,
    pub sigma_s: f64,
    pub region: f64,
    pub speed_init: [f64; 2],
    pub accel_clamp: [f64; 2],
    pub speed_clamp: [f64; 2],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            dt: 0.5,
            sigma_a: 0.5,
            sigma_j: 0.2,
            sigma_theta: PI / 45.0,
            p_turn: 0.1,
            sigma_s: PI / 6.0,
            region: 400.0,
            speed_init: [10.0, 15.0],
            accel_clamp: [-2.0, 2.0],
            speed_clamp: [5.0, 20.0],
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_steps >= 1
            && self.dt > 0.0
            && self.sigma_j >= 0.0
            && self.sigma_theta >= 0.0
            && self.sigma_s >= 0.0
            && (0.0..=1.0).contains(&self.p_turn)
            && self.region > 0.0
            && self.speed_init[0] <= self.speed_init[1]
            && self.accel_clamp[0] <= self.accel_clamp[1]
            && self.speed_clamp[0] <= self.speed_clamp[1];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("inconsistent trajectory configuration".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Point>,
    pub velocities: Vec<Point>,
}

impl Trajectory {
    pub fn state(&self, t: usize) -> TargetState {
        TargetState::new(self.positions[t], self.velocities[t])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One step of the generator, with the internal speed and turn flag exposed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionStep {
    pub position: Point,
    pub velocity: Point,
    pub speed: f64,
    pub accel: f64,
    pub heading: f64,
    pub sudden_turn: bool,
}

/// Stateful trajectory generator for one vehicle.
pub struct TrajectoryGenerator {
    cfg: TrajectoryConfig,
    rng: ChaCha8Rng,
    current: MotionStep,
}

// `Normal::new` only fails for negative or NaN deviations, which validation rules out
fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).unwrap_or_else(|_| Normal::new(0.0, 0.0).expect("zero sd"))
}

impl TrajectoryGenerator {
    pub fn new(cfg: &TrajectoryConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let position = [rng.random::<f64>() * cfg.region, rng.random::<f64>() * cfg.region];
        let speed = cfg.speed_init[0] + rng.random::<f64>() * (cfg.speed_init[1] - cfg.speed_init[0]);
        let heading = rng.random::<f64>() * 2.0 * PI;
        Ok(Self {
            cfg: cfg.clone(),
            rng,
            current: MotionStep {
                position,
                velocity: [speed * heading.cos(), speed * heading.sin()],
                speed,
                accel: 0.0,
                heading,
                sudden_turn: false,
            },
        })
    }

    /// Overrides the random initial condition.
    pub fn with_start(mut self, position: Point, speed: f64, heading: f64) -> Self {
        self.current = MotionStep {
            position,
            velocity: [speed * heading.cos(), speed * heading.sin()],
            speed,
            accel: 0.0,
            heading,
            sudden_turn: false,
        };
        self
    }

    pub fn current(&self) -> &MotionStep {
        &self.current
    }

    pub fn step(&mut self) -> MotionStep {
        let c = &self.cfg;
        let prev = self.current;
        let accel = (prev.accel + normal(c.sigma_j).sample(&mut self.rng))
            .clamp(c.accel_clamp[0], c.accel_clamp[1]);
        let speed = (prev.speed + accel * c.dt).clamp(c.speed_clamp[0], c.speed_clamp[1]);
        let sudden_turn = self.rng.random::<f64>() < c.p_turn;
        let sd = if sudden_turn { c.sigma_s } else { c.sigma_theta };
        let mut heading = prev.heading + normal(sd).sample(&mut self.rng);
        let mut x = prev.position[0] + speed * heading.cos() * c.dt;
        let mut y = prev.position[1] + speed * heading.sin() * c.dt;
        // clamp to the region and bounce the heading off the wall
        if !(0.0..=c.region).contains(&x) {
            x = x.clamp(0.0, c.region);
            heading = PI - heading;
        }
        if !(0.0..=c.region).contains(&y) {
            y = y.clamp(0.0, c.region);
            heading = -heading;
        }
        heading = heading.rem_euclid(2.0 * PI);
        self.current = MotionStep {
            position: [x, y],
            velocity: [speed * heading.cos(), speed * heading.sin()],
            speed,
            accel,
            heading,
            sudden_turn,
        };
        self.current
    }
}

pub fn generate_trajectory(cfg: &TrajectoryConfig, seed: u64) -> Result<Trajectory> {
    let mut gen = TrajectoryGenerator::new(cfg, seed)?;
    let first = *gen.current();
    let steps: Vec<MotionStep> = std::iter::once(first)
        .chain((1..cfg.n_steps).map(|_| gen.step()))
        .collect();
    Ok(Trajectory {
        positions: steps.iter().map(|s| s.position).collect(),
        velocities: steps.iter().map(|s| s.velocity).collect(),
    })
}

/// Seed of target `i`'s trajectory; independent of how many targets exist.
pub fn trajectory_seed(master: u64, trial: u64, target: usize) -> u64 {
    derive_seed(master, &[0x7472616a, trial, target as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Random,
    OrthogonalOptimal,
}

/// Minimum `|x_j y_k - x_k y_j|` accepted for random layouts, as a fraction
/// of `L^2`.
pub const MIN_LAYOUT_DET: f64 = 0.01;

/// Anchor at the origin plus `z` receivers.
pub fn generate_layout(mode: LayoutMode, z: usize, n_ant: usize, side: f64, seed: u64) -> Result<NodeLayout> {
    if z < 2 {
        return Err(Error::InvalidConfig("need at least two receivers".into()));
    }
    match mode {
        LayoutMode::OrthogonalOptimal => place_orthogonal_optimal(side, z, n_ant),
        LayoutMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attempts = 10_000;
            for _ in 0..attempts {
                let rx: Vec<Point> = (0..z)
                    .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
                    .collect();
                let layout = NodeLayout::new([0.0, 0.0], rx, n_ant, side);
                if layout_is_well_posed(&layout) {
                    return Ok(layout);
                }
            }
            Err(Error::LayoutRejection { attempts })
        }
    }
}

/// True when every receiver pair spans at least the minimum determinant.
pub fn layout_is_well_posed(layout: &NodeLayout) -> bool {
    let min = MIN_LAYOUT_DET * layout.region_side * layout.region_side;
    layout.receiver_pairs().iter().all(|&(j, k)| {
        let (a, b, o) = (layout.node(j), layout.node(k), layout.anchor);
        ((a[0] - o[0]) * (b[1] - o[1]) - (b[0] - o[0]) * (a[1] - o[1])).abs() >= min
    })
}

/// Everything needed to replay one trial's geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub format_version: u32,
    pub master_seed: u64,
    pub trial: u64,
    pub layout_mode: LayoutMode,
    pub layout_seed: u64,
    pub layout: NodeLayout,
    pub trajectory_config: TrajectoryConfig,
    pub trajectory_seeds: Vec<u64>,
    pub trajectories: Vec<Trajectory>,
}

pub const SCENARIO_FORMAT: u32 = 1;

/// Seed of the layout draw for one trial.
pub fn layout_seed(master: u64, trial: u64) -> u64 {
    derive_seed(master, &[0x6c61796f, trial])
}

impl ScenarioFile {
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        master_seed: u64,
        trial: u64,
        layout_mode: LayoutMode,
        n_receivers: usize,
        n_ant: usize,
        n_targets: usize,
        cfg: &TrajectoryConfig,
    ) -> Result<Self> {
        let ls = layout_seed(master_seed, trial);
        let layout = generate_layout(layout_mode, n_receivers, n_ant, cfg.region, ls)?;
        let seeds: Vec<u64> = (0..n_targets)
            .map(|i| trajectory_seed(master_seed, trial, i))
            .collect();
        let trajectories = seeds
            .iter()
            .map(|&s| generate_trajectory(cfg, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format_version: SCENARIO_FORMAT,
            master_seed,
            trial,
            layout_mode,
            layout_seed: ls,
            layout,
            trajectory_config: cfg.clone(),
            trajectory_seeds: seeds,
            trajectories,
        })
    }

    /// Regenerates from the stored seeds and checks the stored data matches
    /// bit for bit.
    pub fn verify(&self) -> Result<()> {
        if self.format_version != SCENARIO_FORMAT {
            return Err(Error::ScenarioMismatch(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let layout = generate_layout(
            self.layout_mode,
            self.layout.receivers.len(),
            self.layout.antennas_per_node,
            self.layout.region_side,
            self.layout_seed,
        )?;
        if layout != self.layout {
            return Err(Error::ScenarioMismatch("layout differs from its seed".into()));
        }
        for (i, (&s, t)) in self.trajectory_seeds.iter().zip(&self.trajectories).enumerate() {
            if generate_trajectory(&self.trajectory_config, s)? != *t {
                return Err(Error::ScenarioMismatch(format!("trajectory {i} differs from its seed")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_is_straight() {
        let cfg = TrajectoryConfig {
            sigma_j: 0.0,
            sigma_theta: 0.0,
            sigma_s: 0.0,
            p_turn: 0.0,
            ..TrajectoryConfig::default()
        };
        let mut g = TrajectoryGenerator::new(&cfg, 1).unwrap().with_start([100.0, 100.0], 12.0, 0.3);
        for t in 1..10 {
            let s = g.step();
            assert!((s.speed - 12.0).abs() < 1e-12);
            let want = [100.0 + 6.0 * t as f64 * 0.3f64.cos(), 100.0 + 6.0 * t as f64 * 0.3f64.sin()];
            assert!((s.position[0] - want[0]).abs() < 1e-9 && (s.position[1] - want[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let cfg = TrajectoryConfig::default();
        assert_eq!(generate_trajectory(&cfg, 42).unwrap(), generate_trajectory(&cfg, 42).unwrap());
        assert_ne!(generate_trajectory(&cfg, 42).unwrap(), generate_trajectory(&cfg, 43).unwrap());
    }

    #[test]
    fn wall_bounce_keeps_speed() {
        let cfg = TrajectoryConfig {
            sigma_j: 0.0,
            sigma_theta: 0.0,
            p_turn: 0.0,
            ..TrajectoryConfig::default()
        };
        let mut g = TrajectoryGenerator::new(&cfg, 1).unwrap().with_start([398.0, 200.0], 10.0, 0.0);
        let s = g.step();
        assert_eq!(s.position[0], 400.0);
        assert!(s.velocity[0] < 0.0);
        assert!((s.velocity[0].hypot(s.velocity[1]) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn layouts() {
        let l = generate_layout(LayoutMode::OrthogonalOptimal, 2, 1, 400.0, 0).unwrap();
        assert_eq!(l.anchor, [0.0, 0.0]);
        assert_eq!(l.receivers, vec![[400.0, 0.0], [0.0, 400.0]]);
        for seed in 0..200 {
            let a = generate_layout(LayoutMode::Random, 3, 1, 400.0, seed).unwrap();
            assert!(layout_is_well_posed(&a));
            assert_eq!(a, generate_layout(LayoutMode::Random, 3, 1, 400.0, seed).unwrap());
        }
        assert!(generate_layout(LayoutMode::Random, 1, 1, 400.0, 0).is_err());
    }

    #[test]
    fn adding_targets_keeps_existing() {
        let cfg = TrajectoryConfig::default();
        let a = ScenarioFile::generate(5, 0, LayoutMode::Random, 2, 1, 2, &cfg).unwrap();
        let b = ScenarioFile::generate(5, 0, LayoutMode::Random, 2, 1, 4, &cfg).unwrap();
        assert_eq!(a.trajectories[..], b.trajectories[..2]);
        b.verify().unwrap();
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = TrajectoryConfig::default();
        let s = ScenarioFile::generate(9, 3, LayoutMode::Random, 3, 2, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        s.save(&p).unwrap();
        let back = ScenarioFile::load(&p).unwrap();
        assert_eq!(back, s);
        back.verify().unwrap();
    }

    proptest! {
        #[test]
        fn bounds_hold(seed in any::<u64>()) {
            let cfg = TrajectoryConfig { n_steps: 200, ..TrajectoryConfig::default() };
            let mut g = TrajectoryGenerator::new(&cfg, seed).unwrap();
            for _ in 0..200 {
                let s = g.step();
                prop_assert!(s.position.iter().all(|p| p.is_finite() && (0.0..=400.0).contains(p)));
                prop_assert!((5.0..=20.0).contains(&s.speed));
                prop_assert!((-2.0..=2.0).contains(&s.accel));
                prop_assert!((s.velocity[0].hypot(s.velocity[1]) - s.speed).abs() < 1e-9);
            }
        }
    }
}
