//! Experiment driver: simulates active and passive sensing over seeded
//! trajectories, sweeps SNR, antenna and target counts, and writes results.
//!
//! Every trial draws its randomness from sub-seeds of the master seed keyed
//! by trial, time step, receiver and antenna, never by SNR. Sweep points that
//! differ only in SNR therefore see the same trajectories, data and noise
//! shapes, which keeps comparisons across SNR paired.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Matrix2, Matrix4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{
    apply_channel, geometry_to_channel, path_delay_doppler, received_power, DdChannelOperator, GainModel,
    LinearOperator, PathParams, SPEED_OF_LIGHT,
};
use crate::deploy::{covariance_general, squared_range_variance, RangeVariances};
use crate::error::{Error, Result};
use crate::estimator::{
    associate, bistatic_range_rate, coarse_estimate_passive, detect_data_pilot_cancelled, monostatic_range_rate,
    ActiveEstimator, OuterLoopParams, PathEstimate, SearchGrid,
};
use crate::fusion::{
    fuse_samples, reconstruct_channel_params, triangulate_all, FusedEstimate, FusionMethod, NodeLayout, RangeRate,
};
use crate::modem::{demap_grid, demodulate, embed_pilot, hard_decision, map_bits, modulate, DdGrid, OtfsConfig, PilotSpec, C64};
use crate::scenario::{generate_trajectory, LayoutMode, ScenarioFile, TrajectoryConfig};
use crate::seed::{derive_seed, rng_for};
use crate::state::{dist, Point, TargetState};
use crate::tracker::{innovation_distance, kf_predict, kf_update, process_noise, CrwParams, KfState};

// stream tags for derive_seed
const TAG_DATA: u64 = 0x64617461;
const TAG_NOISE: u64 = 0x6e6f6973;
const TAG_CALIB: u64 = 0x63616c69;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Active,
    ActiveKf,
    Passive,
    PassiveKf,
}

impl Mode {
    pub fn uses_kf(self) -> bool {
        matches!(self, Mode::ActiveKf | Mode::PassiveKf)
    }

    pub fn is_passive(self) -> bool {
        matches!(self, Mode::Passive | Mode::PassiveKf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Active => "active",
            Mode::ActiveKf => "active_kf",
            Mode::Passive => "passive",
            Mode::PassiveKf => "passive_kf",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Mode::Active),
            "active_kf" => Ok(Mode::ActiveKf),
            "passive" => Ok(Mode::Passive),
            "passive_kf" => Ok(Mode::PassiveKf),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected active, active_kf, passive or passive_kf)"
            ))),
        }
    }
}

/// What estimates are scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthReference {
    /// The simulated trajectory.
    #[default]
    Physical,
    /// The fused estimate that noiseless, correctly associated grid-snapped
    /// paths would produce. Isolates estimation error from grid quantization.
    GridConsistent,
}

/// Where the tracker's motion parameters come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// Fitted to velocity tracks drawn from the trajectory generator.
    #[default]
    Fitted,
    /// Taken as configured.
    Configured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub delta: f64,
    pub psi: f64,
    pub omega: [f64; 2],
    pub motion_model: MotionModel,
    /// Drop the position-velocity cross terms of the process noise.
    pub diagonal_q: bool,
    /// Tracks drawn for the fitted motion model.
    pub calibration_tracks: usize,
    /// Initial covariance as a multiple of the first measurement covariance.
    pub p0_scale: f64,
    /// Squared-Mahalanobis gate on the innovation; measurements beyond it
    /// are skipped and the track coasts. `None` accepts everything.
    pub gate: Option<f64>,
    /// Consecutive skipped measurements after which the track restarts from
    /// the latest measurement.
    pub max_misses: usize,
    /// Project each posterior onto the region and the vehicle speed limit.
    pub constrain: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let crw = CrwParams::default();
        Self {
            delta: crw.delta,
            psi: crw.psi,
            omega: crw.omega,
            motion_model: MotionModel::Fitted,
            diagonal_q: false,
            calibration_tracks: 200,
            p0_scale: 10.0,
            // chi-square, 4 degrees of freedom, 0.1% tail
            gate: Some(18.47),
            max_misses: 3,
            constrain: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Snap every path onto the delay-Doppler grid.
    pub on_grid: bool,
    pub gains: GainModel,
}

/// Fixed per-axis measurement variances. Unset entries follow the grid
/// quantization model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementConfig {
    pub position_var: Option<f64>,
    pub velocity_var: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub snr_db: Vec<f64>,
    pub n_targets: Vec<usize>,
    pub n_antennas: Vec<usize>,
    pub layout_mode: LayoutMode,
    pub n_receivers: usize,
    pub n_trials: usize,
    pub master_seed: u64,
    /// Add a wall-clock column to the CSV. Makes the file non-reproducible.
    pub include_runtime: bool,
    pub truth: TruthReference,
    /// Doppler oversampling of the estimator's search grid.
    pub oversample: usize,
    pub fusion: FusionMethod,
    pub otfs: OtfsConfig,
    pub pilot: PilotSpec,
    pub channel: ChannelConfig,
    pub tracker: TrackerConfig,
    pub trajectory: TrajectoryConfig,
    pub passive: OuterLoopParams,
    pub measurement: MeasurementConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ActiveKf,
            snr_db: vec![0.0],
            n_targets: vec![1],
            n_antennas: vec![1],
            layout_mode: LayoutMode::OrthogonalOptimal,
            n_receivers: 2,
            n_trials: 10,
            master_seed: 1,
            include_runtime: false,
            truth: TruthReference::Physical,
            oversample: 1,
            fusion: FusionMethod::Average,
            otfs: OtfsConfig::default(),
            pilot: PilotSpec::default(),
            channel: ChannelConfig::default(),
            tracker: TrackerConfig::default(),
            trajectory: TrajectoryConfig::default(),
            passive: OuterLoopParams::default(),
            measurement: MeasurementConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.snr_db.is_empty() || self.n_targets.is_empty() || self.n_antennas.is_empty() {
            return bad("sweep lists snr_db, n_targets and n_antennas must be non-empty");
        }
        if self.n_trials == 0 {
            return bad("n_trials must be at least 1");
        }
        if self.n_targets.contains(&0) || self.n_antennas.contains(&0) {
            return bad("n_targets and n_antennas entries must be at least 1");
        }
        if self.snr_db.iter().any(|s| s.is_nan()) {
            return bad("snr_db entries must be numbers");
        }
        if self.n_receivers < 2 {
            return bad("n_receivers must be at least 2");
        }
        if self.oversample == 0 {
            return bad("oversample must be at least 1");
        }
        if !(self.tracker.p0_scale > 0.0) {
            return bad("tracker.p0_scale must be positive");
        }
        if self.tracker.gate.is_some_and(|g| !(g > 0.0)) {
            return bad("tracker.gate must be positive");
        }
        self.otfs.validate()?;
        self.pilot.grid(&self.otfs)?;
        self.trajectory.validate()?;
        if self.tracker.motion_model == MotionModel::Configured {
            self.motion_params()?.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    /// Motion parameters the tracker will use.
    pub fn motion_params(&self) -> Result<CrwParams> {
        let dt = self.trajectory.dt;
        match self.tracker.motion_model {
            MotionModel::Configured => Ok(CrwParams {
                delta: self.tracker.delta,
                omega: self.tracker.omega,
                psi: self.tracker.psi,
                dt,
            }),
            MotionModel::Fitted => {
                let tracks = (0..self.tracker.calibration_tracks)
                    .map(|i| {
                        let seed = derive_seed(self.master_seed, &[TAG_CALIB, i as u64]);
                        generate_trajectory(&self.trajectory, seed).map(|t| t.velocities)
                    })
                    .collect::<Result<Vec<_>>>()?;
                CrwParams::fit(&tracks, dt)
            }
        }
    }

    /// Sweep points in output order: targets, then antennas, then SNR.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &n_targets in &self.n_targets {
            for &n_antennas in &self.n_antennas {
                for &snr_db in &self.snr_db {
                    out.push(SweepPoint {
                        snr_db,
                        n_targets,
                        n_antennas,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub n_targets: usize,
    pub n_antennas: usize,
}

/// Aggregated metrics of one sweep point. `rmse_*` score the reported
/// estimate (tracked in KF modes), `rmse_*_raw` the fused measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: Mode,
    pub snr_db: f64,
    pub n_targets: usize,
    pub n_antennas: usize,
    pub rmse_position: f64,
    pub rmse_velocity: f64,
    pub rmse_position_raw: f64,
    pub rmse_velocity_raw: f64,
    /// Bit error rate at the passive receivers; absent in active modes.
    pub ber: Option<f64>,
    pub trials: usize,
    pub failed_trials: usize,
    pub dropped_triangulations: usize,
    /// Time steps whose refinement loop hit its iteration cap.
    pub nonconverged: usize,
    #[serde(default)]
    pub runtime_s: Option<f64>,
}

const CSV_FIELDS: [&str; 13] = [
    "mode",
    "snr_db",
    "n_targets",
    "n_antennas",
    "rmse_position",
    "rmse_velocity",
    "rmse_position_raw",
    "rmse_velocity_raw",
    "ber",
    "trials",
    "failed_trials",
    "dropped_triangulations",
    "nonconverged",
];

/// Per-trial accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialOutcome {
    pub sq_position: f64,
    pub sq_velocity: f64,
    pub sq_position_raw: f64,
    pub sq_velocity_raw: f64,
    /// Scored (target, step) pairs.
    pub samples: usize,
    pub bit_errors: u64,
    pub bits: u64,
    pub dropped: usize,
    pub nonconverged: usize,
}

/// Estimates for one time step: the fused measurement and the reported
/// estimate (equal unless tracking).
#[derive(Clone, Debug)]
struct StepEstimate {
    raw: Vec<TargetState>,
    reported: Vec<TargetState>,
    trackers: Vec<KfState>,
    misses: Vec<usize>,
    dropped: usize,
}

/// Simulation context shared by all trials of one configuration.
pub struct Simulator {
    cfg: ExperimentConfig,
    est: ActiveEstimator,
    pilot: DdGrid,
    model: CrwParams,
    q: Matrix4<f64>,
}

impl Simulator {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = SearchGrid::new(&cfg.otfs, cfg.oversample)?;
        let est = ActiveEstimator::new(&cfg.otfs, grid)?;
        let model = cfg.motion_params()?;
        model.validate()?;
        log::debug!(
            "motion model delta={:.4} psi={:.4} dt={}",
            model.delta,
            model.psi,
            model.dt
        );
        Ok(Self {
            pilot: cfg.pilot.grid(&cfg.otfs)?,
            q: process_noise(&model, cfg.tracker.diagonal_q),
            cfg: cfg.clone(),
            est,
            model,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn motion(&self) -> &CrwParams {
        &self.model
    }

    /// Runs one trial at one sweep point.
    pub fn run_trial(&self, point: &SweepPoint, trial: u64) -> Result<TrialOutcome> {
        let c = &self.cfg;
        let otfs = &c.otfs;
        let scen = ScenarioFile::generate(
            c.master_seed,
            trial,
            c.layout_mode,
            c.n_receivers,
            point.n_antennas,
            point.n_targets,
            &c.trajectory,
        )?;
        let layout = &scen.layout;
        let steps = scen.trajectories.first().map_or(0, |t| t.len());
        let mut out = TrialOutcome::default();
        let mut prev: Option<StepEstimate> = None;
        for t in 0..steps {
            let truth: Vec<TargetState> = scen.trajectories.iter().map(|tr| tr.state(t)).collect();
            let mut rng = rng_for(c.master_seed, &[TAG_DATA, trial, t as u64]);
            let bits: Vec<u8> = (0..otfs.bits_per_frame()).map(|_| rng.random_range(0..2u8)).collect();
            let mut data = map_bits(&bits, otfs)?;
            c.pilot.reserve(&mut data);
            let frame = embed_pilot(&data, &c.pilot, otfs)?;
            let s = modulate(&frame, otfs)?;
            let channels = geometry_to_channel(layout, &truth, otfs, c.channel.on_grid, c.channel.gains, &mut rng)?;
            let snr = 10f64.powf(point.snr_db / 10.0);
            let noise: Vec<f64> = channels.iter().map(|ch| received_power(&s, &ch.paths, otfs) / snr).collect();
            let y = channels
                .iter()
                .zip(&noise)
                .map(|(ch, &nv)| {
                    let mut ch = ch.clone();
                    ch.noise_var = nv;
                    (0..point.n_antennas)
                        .map(|a| {
                            let seed = derive_seed(
                                c.master_seed,
                                &[TAG_NOISE, trial, t as u64, ch.receiver_id as u64, a as u64],
                            );
                            Ok(demodulate(&apply_channel(&s, &ch, otfs, seed)?, otfs)?.into_vec())
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;

            let prior = self.prior_states(prev.as_ref(), &truth);
            let predicted: Vec<Vec<(f64, f64)>> = (0..layout.n_nodes())
                .map(|j| prior.iter().map(|p| path_delay_doppler(layout, j, p, otfs.f_c)).collect())
                .collect();
            let r_meas: Vec<Matrix4<f64>> = prior
                .iter()
                .map(|p| self.measurement_covariance(layout, p.position))
                .collect::<Result<_>>()?;

            let step = if c.mode.is_passive() {
                let (step, errors, nonconv) =
                    self.passive_step(layout, &y, &noise, &predicted, &r_meas, prev.as_ref(), &bits)?;
                out.bit_errors += errors.0;
                out.bits += errors.1;
                out.nonconverged += nonconv as usize;
                step
            } else {
                let ests = self.per_antenna(&y, &predicted, |yy| self.est.estimate(yy, frame.as_slice(), predicted[0].len()))?;
                let (raw, dropped) = self.fuse(layout, &ests, &r_meas)?;
                self.track(raw, dropped, &r_meas, prev.as_ref())?
            };

            let reference = match c.truth {
                TruthReference::Physical => truth.clone(),
                TruthReference::GridConsistent => self.grid_consistent_truth(layout, &truth, point.n_antennas, &r_meas)?,
            };
            for (i, tr) in reference.iter().enumerate() {
                let sq = |a: Point, b: Point| dist(a, b).powi(2);
                out.sq_position += sq(step.reported[i].position, tr.position);
                out.sq_velocity += sq(step.reported[i].velocity, tr.velocity);
                out.sq_position_raw += sq(step.raw[i].position, tr.position);
                out.sq_velocity_raw += sq(step.raw[i].velocity, tr.velocity);
                out.samples += 1;
            }
            out.dropped += step.dropped;
            prev = Some(step);
        }
        Ok(out)
    }

    /// State used to predict this step's paths for association.
    fn prior_states(&self, prev: Option<&StepEstimate>, truth: &[TargetState]) -> Vec<TargetState> {
        match prev {
            None => truth.to_vec(),
            Some(p) if self.cfg.mode.uses_kf() => p.trackers.iter().map(|k| TargetState::from_vector(&k.predict())).collect(),
            Some(p) => p
                .reported
                .iter()
                .map(|s| {
                    let dt = self.cfg.trajectory.dt;
                    TargetState::new(
                        [s.position[0] + s.velocity[0] * dt, s.position[1] + s.velocity[1] * dt],
                        s.velocity,
                    )
                })
                .collect(),
        }
    }

    /// Runs `f` on every receiver-antenna observation and orders the result
    /// by target: `out[j][a][i]`.
    fn per_antenna<F>(&self, y: &[Vec<Vec<C64>>], predicted: &[Vec<(f64, f64)>], f: F) -> Result<Vec<Vec<Vec<PathEstimate>>>>
    where
        F: Fn(&[C64]) -> Result<Vec<PathEstimate>>,
    {
        y.iter()
            .zip(predicted)
            .map(|(ants, pred)| {
                ants.iter()
                    .map(|yy| {
                        let ests = f(yy)?;
                        Ok(self.order_by_target(&ests, pred))
                    })
                    .collect()
            })
            .collect()
    }

    fn order_by_target(&self, ests: &[PathEstimate], pred: &[(f64, f64)]) -> Vec<PathEstimate> {
        associate(ests, pred, &self.cfg.otfs).into_iter().map(|e| ests[e]).collect()
    }

    /// Triangulates and fuses every target from `ests[j][a][i]`.
    fn fuse(
        &self,
        layout: &NodeLayout,
        ests: &[Vec<Vec<PathEstimate>>],
        r_meas: &[Matrix4<f64>],
    ) -> Result<(Vec<FusedEstimate>, usize)> {
        let f_c = self.cfg.otfs.f_c;
        let mut dropped = 0;
        let fused = (0..r_meas.len())
            .map(|i| {
                let anchor: Vec<RangeRate> = ests[0].iter().map(|a| monostatic_range_rate(&a[i], f_c)).collect();
                let receivers: Vec<Vec<Vec<RangeRate>>> = ests[1..]
                    .iter()
                    .map(|ants| {
                        anchor
                            .iter()
                            .map(|m0| ants.iter().map(|a| bistatic_range_rate(&a[i], m0, f_c)).collect())
                            .collect()
                    })
                    .collect();
                let (samples, d) = triangulate_all(layout, &anchor, &receivers);
                dropped += d;
                let r = &r_meas[i];
                let xi = (
                    3.0 * r[(0, 0)].max(r[(1, 1)]).sqrt(),
                    3.0 * r[(2, 2)].max(r[(3, 3)]).sqrt(),
                );
                fuse_samples(&samples, self.cfg.fusion, xi)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((fused, dropped))
    }

    /// Turns fused measurements into reported states, running the filter
    /// from the previous step's posterior in KF modes.
    fn track(
        &self,
        raw: Vec<FusedEstimate>,
        dropped: usize,
        r_meas: &[Matrix4<f64>],
        prev: Option<&StepEstimate>,
    ) -> Result<StepEstimate> {
        let raw: Vec<TargetState> = raw.iter().map(|f| f.state()).collect();
        if !self.cfg.mode.uses_kf() {
            return Ok(StepEstimate {
                reported: raw.clone(),
                raw,
                trackers: Vec::new(),
                misses: Vec::new(),
                dropped,
            });
        }
        let tc = &self.cfg.tracker;
        let mut trackers = Vec::with_capacity(raw.len());
        let mut misses = Vec::with_capacity(raw.len());
        for (i, z) in raw.iter().enumerate() {
            let z = z.to_vector();
            let init = || KfState::init(z, r_meas[i] * tc.p0_scale, &self.model);
            let (kf, miss) = match prev {
                None => (init(), 0),
                Some(p) => {
                    let last = &p.trackers[i];
                    let outlier = match tc.gate {
                        Some(g) => innovation_distance(last, &z, &self.q, &r_meas[i])? > g,
                        None => false,
                    };
                    if !outlier {
                        (kf_update(last, &z, &self.q, &r_meas[i])?, 0)
                    } else if p.misses[i] + 1 > tc.max_misses {
                        (init(), 0)
                    } else {
                        (kf_predict(last, &self.q), p.misses[i] + 1)
                    }
                }
            };
            trackers.push(if tc.constrain { self.project(kf) } else { kf });
            misses.push(miss);
        }
        Ok(StepEstimate {
            reported: trackers.iter().map(|k| k.state()).collect(),
            raw,
            trackers,
            misses,
            dropped,
        })
    }

    /// Clamps position into the region and speed to the vehicle limit. Only
    /// the mean moves; the covariance is kept.
    fn project(&self, mut kf: KfState) -> KfState {
        let side = self.cfg.trajectory.region;
        let vmax = self.cfg.trajectory.speed_clamp[1];
        kf.s[0] = kf.s[0].clamp(0.0, side);
        kf.s[1] = kf.s[1].clamp(0.0, side);
        let speed = kf.s[2].hypot(kf.s[3]);
        if speed > vmax {
            kf.s[2] *= vmax / speed;
            kf.s[3] *= vmax / speed;
        }
        kf
    }

    /// Pilot-aided passive sensing with iterative data detection and channel
    /// refinement. Returns the step estimate, `(bit errors, bits)` over the
    /// passive receivers, and whether the refinement hit its iteration cap.
    #[allow(clippy::too_many_arguments)]
    fn passive_step(
        &self,
        layout: &NodeLayout,
        y: &[Vec<Vec<C64>>],
        noise: &[f64],
        predicted: &[Vec<(f64, f64)>],
        r_meas: &[Matrix4<f64>],
        prev: Option<&StepEstimate>,
        bits: &[u8],
    ) -> Result<(StepEstimate, (u64, u64), bool)> {
        let otfs = &self.cfg.otfs;
        let params = &self.cfg.passive;
        let p = predicted[0].len();
        let mn = otfs.frame_len();

        // coarse, pilot-only sensing
        let mut ests = self.per_antenna(y, predicted, |yy| coarse_estimate_passive(yy, &self.cfg.pilot, p, &self.est))?;
        let (raw, mut dropped) = self.fuse(layout, &ests, r_meas)?;
        let mut step = self.track(raw, 0, r_meas, prev)?;

        let ybar: Vec<Vec<C64>> = y
            .iter()
            .map(|ants| {
                let scale = 1.0 / ants.len() as f64;
                (0..mn).map(|m| ants.iter().map(|a| a[m]).sum::<C64>() * scale).collect()
            })
            .collect();
        let mut curr: Vec<Vec<PathParams>> = ybar
            .iter()
            .zip(predicted)
            .map(|(yb, pred)| {
                let e = coarse_estimate_passive(yb, &self.cfg.pilot, p, &self.est)?;
                Ok(self.order_by_target(&e, pred).iter().map(|e| e.to_path(otfs)).collect())
            })
            .collect::<Result<_>>()?;
        let mut settled = vec![false; ybar.len()];
        let mut data_hat = vec![DdGrid::zeros(otfs.m, otfs.n); ybar.len()];
        let mut full_hat = vec![self.pilot.clone(); ybar.len()];
        let mut converged = false;

        // Unless pinned, regularize with the noise left after antenna
        // averaging, which makes the detector the linear MMSE one for
        // unit-energy symbols.
        let detect: Vec<_> = noise
            .iter()
            .map(|&nv| {
                let mut d = params.detect;
                if d.mu.is_none() && nv > 0.0 {
                    d.mu = Some(nv / y[0].len() as f64);
                }
                d
            })
            .collect();

        for _ in 0..params.max_outer {
            for j in 0..ybar.len() {
                let det = detect_data_pilot_cancelled(
                    &ybar[j],
                    &curr[j],
                    &self.pilot,
                    otfs,
                    self.est.transform(),
                    &detect[j],
                )?;
                data_hat[j] = hard_decision(&DdGrid::from_vec(otfs.m, otfs.n, det.d)?, otfs)?;
                self.cfg.pilot.reserve(&mut data_hat[j]);
                full_hat[j] = data_hat[j].add(&self.pilot)?;
                if !settled[j] {
                    let d = full_hat[j].as_slice();
                    ests[j] = y[j]
                        .iter()
                        .map(|yy| Ok(self.order_by_target(&self.est.estimate(yy, d, p)?, &predicted[j])))
                        .collect::<Result<_>>()?;
                }
            }
            let (raw, d) = self.fuse(layout, &ests, r_meas)?;
            dropped = d;
            step = self.track(raw, 0, r_meas, prev)?;
            for j in 0..ybar.len() {
                if settled[j] {
                    continue;
                }
                let new = self.refreshed_paths(layout, j, &step.reported, &ybar[j], &full_hat[j], &predicted[j])?;
                if params.settled(&curr[j], &new) {
                    settled[j] = true;
                } else {
                    curr[j] = new;
                }
            }
            if settled.iter().all(|&f| f) {
                converged = true;
                break;
            }
        }
        step.dropped = dropped;

        // the pilot cell carries no data and is left out of the count
        let bps = otfs.bits_per_symbol();
        let skip = self.cfg.pilot.index(otfs);
        let mut errors = 0u64;
        let mut total = 0u64;
        for (j, dh) in data_hat.iter().enumerate().skip(1) {
            let rx = demap_grid(dh, otfs)?;
            log::debug!(
                "receiver {j}: {} bit errors, paths {:?}",
                rx.iter().zip(bits).filter(|(a, b)| a != b).count(),
                curr[j].iter().map(|p| (p.l_idx, p.k_idx, p.h)).collect::<Vec<_>>()
            );
            for (i, (a, b)) in rx.iter().zip(bits).enumerate() {
                if i / bps != skip {
                    errors += (a != b) as u64;
                    total += 1;
                }
            }
        }
        Ok((step, (errors, total), !converged))
    }

    /// Candidate channel for receiver `j`: paths mapped back from the tracked
    /// states, with gains fitted against the detected frame. When a direct
    /// re-estimate from the averaged observation explains `ybar` better, that
    /// is used instead.
    fn refreshed_paths(
        &self,
        layout: &NodeLayout,
        j: usize,
        states: &[TargetState],
        ybar: &[C64],
        full: &DdGrid,
        predicted: &[(f64, f64)],
    ) -> Result<Vec<PathParams>> {
        let otfs = &self.cfg.otfs;
        let d = full.as_slice();
        let direct: Vec<PathParams> = self
            .order_by_target(&self.est.estimate(ybar, d, predicted.len())?, predicted)
            .iter()
            .map(|e| e.to_path(otfs))
            .collect();
        let mapped = match reconstruct_channel_params(states, layout, j, otfs, true) {
            Ok(mut ps) => {
                let gains = self.est.fit_gains(ybar, d, &ps)?;
                ps.iter_mut().zip(gains).for_each(|(p, h)| p.h = h);
                ps
            }
            Err(Error::RangeAmbiguity { .. }) => return Ok(direct),
            Err(e) => return Err(e),
        };
        let residual = |ps: &[PathParams]| {
            let hy = DdChannelOperator::new(ps, otfs).apply(d);
            ybar.iter().zip(&hy).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
        };
        Ok(if residual(&mapped) <= residual(&direct) { mapped } else { direct })
    }

    /// Fused estimate from noiseless grid-snapped paths, as seen by every
    /// antenna.
    fn grid_consistent_truth(
        &self,
        layout: &NodeLayout,
        truth: &[TargetState],
        n_ant: usize,
        r_meas: &[Matrix4<f64>],
    ) -> Result<Vec<TargetState>> {
        let otfs = &self.cfg.otfs;
        let ests = (0..layout.n_nodes())
            .map(|j| {
                let ps = reconstruct_channel_params(truth, layout, j, otfs, true)?;
                let row: Vec<PathEstimate> = ps
                    .iter()
                    .map(|p| PathEstimate {
                        h_hat: C64::new(1.0, 0.0),
                        tau_hat: p.tau,
                        nu_hat: p.nu,
                        correlation_peak: 1.0,
                        l_idx: p.l_idx,
                        kappa: p.doppler_bins(otfs),
                    })
                    .collect();
                Ok(vec![row; n_ant])
            })
            .collect::<Result<Vec<_>>>()?;
        let (fused, _) = self.fuse(layout, &ests, r_meas)?;
        Ok(fused.iter().map(|f| f.state()).collect())
    }

    /// Measurement covariance of a fused state near `position`.
    ///
    /// Ranges are taken as uniformly quantized to the delay grid and radial
    /// velocities to the Doppler grid. Errors are propagated through each
    /// receiver pair's solve and the pair results averaged. Antennas share the
    /// quantization, so they do not shrink it.
    pub fn measurement_covariance(&self, layout: &NodeLayout, position: Point) -> Result<Matrix4<f64>> {
        let m = &self.cfg.measurement;
        let (pos, vel) = quantization_covariance(layout, position, &self.cfg.otfs, self.cfg.oversample)?;
        let mut r = Matrix4::zeros();
        r.fixed_view_mut::<2, 2>(0, 0).copy_from(&m.position_var.map_or(pos, |v| Matrix2::identity() * v));
        r.fixed_view_mut::<2, 2>(2, 2).copy_from(&m.velocity_var.map_or(vel, |v| Matrix2::identity() * v));
        Ok(r + Matrix4::identity() * 1e-9)
    }
}

/// Position and velocity covariance blocks caused by grid quantization
/// alone, averaged over the non-degenerate receiver pairs.
pub fn quantization_covariance(
    layout: &NodeLayout,
    position: Point,
    cfg: &OtfsConfig,
    oversample: usize,
) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    // path-length and path-rate steps of one grid bin
    let step_len = SPEED_OF_LIGHT * cfg.delay_resolution();
    let step_rate = SPEED_OF_LIGHT * cfg.doppler_resolution() / (cfg.f_c * oversample as f64);
    let var0 = (step_len / 2.0).powi(2) / 12.0;
    let varj = step_len.powi(2) / 12.0 + var0;
    let vvar0 = (step_rate / 2.0).powi(2) / 12.0;
    let vvarj = step_rate.powi(2) / 12.0 + vvar0;

    let rho0 = dist(layout.anchor, position);
    let mut pos = Matrix2::zeros();
    let mut vel = Matrix2::zeros();
    let (mut np, mut nv) = (0usize, 0usize);
    for (j, k) in layout.receiver_pairs() {
        let (rj, rk) = (layout.node(j), layout.node(k));
        let var = RangeVariances {
            sigma0_sq: squared_range_variance(rho0, var0.sqrt()),
            sigmaj_sq: squared_range_variance(dist(rj, position), varj.sqrt()),
            sigmak_sq: squared_range_variance(dist(rk, position), varj.sqrt()),
        };
        if let Ok(g) = covariance_general(layout.anchor, rj, rk, var) {
            let c = g.covariance;
            pos += Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]);
            np += 1;
        }
        let unit = |r: Point| {
            let d = dist(r, position).max(1e-9);
            [(r[0] - position[0]) / d, (r[1] - position[1]) / d]
        };
        let (uj, uk) = (unit(rj), unit(rk));
        if let Some(inv) = Matrix2::new(uj[0], uj[1], uk[0], uk[1]).try_inverse() {
            vel += inv * Matrix2::new(vvarj, 0.0, 0.0, vvarj) * inv.transpose();
            nv += 1;
        }
    }
    if np == 0 || nv == 0 {
        return Err(Error::Collinear { det: 0.0 });
    }
    Ok((pos / (np * np) as f64, vel / (nv * nv) as f64))
}

/// Results of a whole sweep.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<MetricsRow>,
    pub config_hash: String,
    pub motion: CrwParams,
}

/// Runs every sweep point and trial. Trials run in parallel; rows come back
/// in sweep order and their contents do not depend on scheduling.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let sim = Simulator::new(cfg)?;
    let points = cfg.sweep_points();
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| (0..cfg.n_trials as u64).map(move |t| (p, t)))
        .collect();
    let results: Vec<(Result<TrialOutcome>, f64)> = jobs
        .par_iter()
        .map(|&(p, t)| {
            let start = Instant::now();
            let r = sim.run_trial(&points[p], t);
            if let Err(e) = &r {
                log::warn!("trial {t} at {:?} failed: {e}", points[p]);
            }
            (r, start.elapsed().as_secs_f64())
        })
        .collect();
    let rows = points
        .iter()
        .enumerate()
        .map(|(pi, point)| {
            let chunk = &results[pi * cfg.n_trials..(pi + 1) * cfg.n_trials];
            aggregate(cfg.mode, point, chunk)
        })
        .collect();
    Ok(SweepResult {
        rows,
        config_hash: cfg.hash()?,
        motion: *sim.motion(),
    })
}

fn aggregate(mode: Mode, point: &SweepPoint, trials: &[(Result<TrialOutcome>, f64)]) -> MetricsRow {
    let mut acc = TrialOutcome::default();
    let mut failed = 0;
    let mut runtime = 0.0;
    for (r, secs) in trials {
        runtime += secs;
        match r {
            Ok(o) => {
                acc.sq_position += o.sq_position;
                acc.sq_velocity += o.sq_velocity;
                acc.sq_position_raw += o.sq_position_raw;
                acc.sq_velocity_raw += o.sq_velocity_raw;
                acc.samples += o.samples;
                acc.bit_errors += o.bit_errors;
                acc.bits += o.bits;
                acc.dropped += o.dropped;
                acc.nonconverged += o.nonconverged;
            }
            Err(_) => failed += 1,
        }
    }
    let rmse = |sq: f64| if acc.samples == 0 { f64::NAN } else { (sq / acc.samples as f64).sqrt() };
    MetricsRow {
        mode,
        snr_db: point.snr_db,
        n_targets: point.n_targets,
        n_antennas: point.n_antennas,
        rmse_position: rmse(acc.sq_position),
        rmse_velocity: rmse(acc.sq_velocity),
        rmse_position_raw: rmse(acc.sq_position_raw),
        rmse_velocity_raw: rmse(acc.sq_velocity_raw),
        ber: (mode.is_passive() && acc.bits > 0).then(|| acc.bit_errors as f64 / acc.bits as f64),
        trials: trials.len(),
        failed_trials: failed,
        dropped_triangulations: acc.dropped,
        nonconverged: acc.nonconverged,
        runtime_s: Some(runtime),
    }
}

/// Writes rows as CSV. The runtime column is only written on request.
pub fn write_csv<W: std::io::Write>(rows: &[MetricsRow], out: W, include_runtime: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = CSV_FIELDS.to_vec();
    if include_runtime {
        header.push("runtime_s");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.mode.to_string(),
            r.snr_db.to_string(),
            r.n_targets.to_string(),
            r.n_antennas.to_string(),
            r.rmse_position.to_string(),
            r.rmse_velocity.to_string(),
            r.rmse_position_raw.to_string(),
            r.rmse_velocity_raw.to_string(),
            r.ber.map_or_else(String::new, |b| b.to_string()),
            r.trials.to_string(),
            r.failed_trials.to_string(),
            r.dropped_triangulations.to_string(),
            r.nonconverged.to_string(),
        ];
        if include_runtime {
            rec.push(r.runtime_s.map_or_else(String::new, |t| format!("{t:.3}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub mode: Mode,
    pub rows: usize,
    pub motion_model: CrwParams,
    pub runtime_s: Vec<f64>,
    pub version: String,
}

/// Path of the metadata file written next to `out`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Runs the sweep and writes the CSV plus its metadata sidecar.
pub fn run_to_file(cfg: &ExperimentConfig, out: &Path) -> Result<SweepResult> {
    let res = sweep(cfg)?;
    let file = std::fs::File::create(out)?;
    write_csv(&res.rows, std::io::BufWriter::new(file), cfg.include_runtime)?;
    let meta = RunMetadata {
        config_hash: res.config_hash.clone(),
        master_seed: cfg.master_seed,
        mode: cfg.mode,
        rows: res.rows.len(),
        motion_model: res.motion,
        runtime_s: res.rows.iter().map(|r| r.runtime_s.unwrap_or(0.0)).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(sidecar_path(out), serde_json::to_string_pretty(&meta)?)?;
    Ok(res)
}

/// Summary statistics recomputed from a results file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Analysis {
    pub rows: usize,
    pub mean_rmse_position: f64,
    pub mean_rmse_velocity: f64,
    pub best_rmse_position: f64,
    pub worst_rmse_position: f64,
    /// Fraction of rows whose reported RMSE is no worse than the raw one.
    pub tracked_not_worse: f64,
    /// Mean of `rmse_position_raw - rmse_position`.
    pub mean_position_reduction: f64,
    pub mean_ber: Option<f64>,
    pub failed_trials: usize,
    pub total_trials: usize,
}

pub fn analyze(rows: &[MetricsRow]) -> Result<Analysis> {
    if rows.is_empty() {
        return Err(Error::Empty);
    }
    let finite: Vec<&MetricsRow> = rows.iter().filter(|r| r.rmse_position.is_finite()).collect();
    let n = finite.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricsRow) -> f64| finite.iter().map(|r| f(r)).sum::<f64>() / n;
    let bers: Vec<f64> = rows.iter().filter_map(|r| r.ber).collect();
    Ok(Analysis {
        rows: rows.len(),
        mean_rmse_position: mean(&|r| r.rmse_position),
        mean_rmse_velocity: mean(&|r| r.rmse_velocity),
        best_rmse_position: finite.iter().map(|r| r.rmse_position).fold(f64::INFINITY, f64::min),
        worst_rmse_position: finite.iter().map(|r| r.rmse_position).fold(f64::NEG_INFINITY, f64::max),
        tracked_not_worse: finite.iter().filter(|r| r.rmse_position <= r.rmse_position_raw).count() as f64 / n,
        mean_position_reduction: mean(&|r| r.rmse_position_raw - r.rmse_position),
        mean_ber: (!bers.is_empty()).then(|| bers.iter().sum::<f64>() / bers.len() as f64),
        failed_trials: rows.iter().map(|r| r.failed_trials).sum(),
        total_trials: rows.iter().map(|r| r.trials).sum(),
    })
}

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows                    {}", self.rows)?;
        writeln!(f, "trials (failed)         {} ({})", self.total_trials, self.failed_trials)?;
        writeln!(
            f,
            "position rmse mean      {:.4} m (best {:.4}, worst {:.4})",
            self.mean_rmse_position, self.best_rmse_position, self.worst_rmse_position
        )?;
        writeln!(f, "velocity rmse mean      {:.4} m/s", self.mean_rmse_velocity)?;
        writeln!(
            f,
            "tracked <= raw          {:.1}% of rows, mean reduction {:.4} m",
            100.0 * self.tracked_not_worse,
            self.mean_position_reduction
        )?;
        match self.mean_ber {
            Some(b) => write!(f, "mean ber                {b:.4e}"),
            None => write!(f, "mean ber                n/a"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::Active,
            n_trials: 2,
            otfs: OtfsConfig {
                m: 64,
                n: 8,
                delta_f: 60e3,
                cp_len: 16,
                ..OtfsConfig::default()
            },
            trajectory: TrajectoryConfig {
                n_steps: 4,
                ..TrajectoryConfig::default()
            },
            tracker: TrackerConfig {
                calibration_tracks: 20,
                ..TrackerConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = small();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        let err = ExperimentConfig::from_toml_str("mode = \"active\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml_str("n_trials = 0\n").unwrap_err();
        assert!(err.to_string().contains("n_trials"));
    }

    #[test]
    fn sweep_point_count() {
        let cfg = ExperimentConfig {
            snr_db: vec![-5.0, 5.0],
            n_antennas: vec![1, 2],
            ..small()
        };
        let pts = cfg.sweep_points();
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[1].snr_db, pts[1].n_antennas), (5.0, 1));
    }

    #[test]
    fn noiseless_on_grid_active_is_exact() {
        let cfg = ExperimentConfig {
            snr_db: vec![f64::INFINITY],
            truth: TruthReference::GridConsistent,
            channel: ChannelConfig {
                on_grid: true,
                ..ChannelConfig::default()
            },
            ..small()
        };
        let res = sweep(&cfg).unwrap();
        let r = &res.rows[0];
        assert_eq!(r.failed_trials, 0);
        assert!(r.rmse_position < 1e-6, "{r:?}");
        assert!(r.rmse_velocity < 1e-6, "{r:?}");
    }

    #[test]
    fn csv_is_deterministic_and_parses_back() {
        let cfg = small();
        let a = sweep(&cfg).unwrap();
        let b = sweep(&cfg).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_csv(&a.rows, &mut x, false).unwrap();
        write_csv(&b.rows, &mut y, false).unwrap();
        assert_eq!(x, y);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, &x).unwrap();
        let back = read_csv(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].rmse_position, a.rows[0].rmse_position);
        assert!(back[0].runtime_s.is_none());
        let s = analyze(&back).unwrap();
        assert_eq!(s.rows, 1);
    }

    #[test]
    fn quantization_covariance_is_positive() {
        let layout = NodeLayout::new([0.0, 0.0], vec![[400.0, 0.0], [0.0, 400.0]], 1, 400.0);
        let (p, v) = quantization_covariance(&layout, [150.0, 220.0], &OtfsConfig::default(), 1).unwrap();
        assert!(p.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        assert!(v.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("passive_kf".parse::<Mode>().unwrap(), Mode::PassiveKf);
        assert!("kf".parse::<Mode>().is_err());
    }
}
