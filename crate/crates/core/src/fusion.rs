//! Position and velocity recovery from multistatic ranges, and fusion of the
//! resulting estimates.
//!
//! Node 0 is the anchor, which both transmits and receives. Each pair of
//! passive receivers `(j, k)` together with the anchor yields one
//! triangulation.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::channel::{path_delay_doppler, PathParams};
use crate::error::{Error, Result};
use crate::modem::{OtfsConfig, C64};
use crate::state::{dist, Point, TargetState};

/// Relative determinant below which a node triple counts as collinear.
pub const COLLINEAR_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLayout {
    pub anchor: Point,
    /// Passive receivers `R_1 .. R_Z`.
    pub receivers: Vec<Point>,
    pub antennas_per_node: usize,
    pub region_side: f64,
}

impl NodeLayout {
    pub fn new(anchor: Point, receivers: Vec<Point>, antennas_per_node: usize, region_side: f64) -> Self {
        Self {
            anchor,
            receivers,
            antennas_per_node,
            region_side,
        }
    }

    /// Position of node `j` (0 is the anchor).
    pub fn node(&self, j: usize) -> Point {
        if j == 0 {
            self.anchor
        } else {
            self.receivers[j - 1]
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.receivers.len() + 1
    }

    /// Receiver pairs `(j, k)`, `1 <= j < k <= Z`.
    pub fn receiver_pairs(&self) -> Vec<(usize, usize)> {
        let z = self.receivers.len();
        (1..=z)
            .flat_map(|j| (j + 1..=z).map(move |k| (j, k)))
            .collect()
    }
}

/// Fused target estimate with the number of triangulations that fed it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedEstimate {
    pub position: Point,
    pub velocity: Point,
    pub contributing: usize,
}

impl FusedEstimate {
    pub fn state(&self) -> TargetState {
        TargetState::new(self.position, self.velocity)
    }
}

/// Solves for the target position from the monostatic range `rho0` and the
/// anchor-to-target-to-receiver ranges `rhoj`, `rhok`, where `rhoj` is the
/// distance from the target to receiver `r_j`.
pub fn triangulate(
    rho0: f64,
    rhoj: f64,
    rhok: f64,
    anchor: Point,
    r_j: Point,
    r_k: Point,
) -> Result<Point> {
    let a = Matrix2::new(
        r_j[0] - anchor[0],
        r_j[1] - anchor[1],
        r_k[0] - anchor[0],
        r_k[1] - anchor[1],
    );
    let scale = (a[(0, 0)].hypot(a[(0, 1)]) * a[(1, 0)].hypot(a[(1, 1)])).max(f64::MIN_POSITIVE);
    let det = a.determinant();
    if (det / scale).abs() < COLLINEAR_TOL {
        return Err(Error::Collinear { det: det / scale });
    }
    let norm0 = anchor[0] * anchor[0] + anchor[1] * anchor[1];
    let b = |rho: f64, r: Point| {
        0.5 * (rho0 * rho0 - rho * rho - (norm0 - r[0] * r[0] - r[1] * r[1]))
    };
    let rhs = Vector2::new(b(rhoj, r_j), b(rhok, r_k));
    let x = a.try_inverse().ok_or(Error::Collinear { det })? * rhs;
    Ok([x[0], x[1]])
}

/// Solves for the target velocity from radial velocities toward `r_j` and
/// `r_k`, measured along the unit vectors from the target to each receiver.
pub fn solve_velocity(position: Point, v_j: f64, v_k: f64, r_j: Point, r_k: Point) -> Result<Point> {
    let unit = |r: Point| {
        let d = dist(r, position);
        if d == 0.0 {
            None
        } else {
            Some([(r[0] - position[0]) / d, (r[1] - position[1]) / d])
        }
    };
    let (uj, uk) = match (unit(r_j), unit(r_k)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::DegenerateBearing { det: 0.0 }),
    };
    let c = Matrix2::new(uj[0], uj[1], uk[0], uk[1]);
    let det = c.determinant();
    if det.abs() < COLLINEAR_TOL {
        return Err(Error::DegenerateBearing { det });
    }
    let v = c.try_inverse().ok_or(Error::DegenerateBearing { det })? * Vector2::new(v_j, v_k);
    Ok([v[0], v[1]])
}

pub fn fuse_average(points: &[Point]) -> Result<Point> {
    if points.is_empty() {
        return Err(Error::Empty);
    }
    let n = points.len() as f64;
    let s = points
        .iter()
        .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
    Ok([s[0] / n, s[1] / n])
}

/// Picks the point with the most neighbours within `xi` (ties to the lowest
/// index) and averages it together with those neighbours.
///
/// Returns the fused point and how many points were averaged.
pub fn fuse_nearest_neighbor(points: &[Point], xi: f64) -> Result<(Point, usize)> {
    if points.is_empty() {
        return Err(Error::Empty);
    }
    let near = |c: Point| points.iter().filter(move |q| dist(c, **q) <= xi);
    let mut best = (0, 0);
    for (n, p) in points.iter().enumerate() {
        let count = near(*p).count();
        if count > best.1 {
            best = (n, count);
        }
    }
    let chosen: Vec<Point> = near(points[best.0]).copied().collect();
    Ok((fuse_average(&chosen)?, chosen.len()))
}

/// Per-path monostatic and bistatic range / radial-velocity estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeRate {
    pub rho: f64,
    pub v: f64,
    /// True when a negative bistatic range was clamped to zero.
    pub clamped: bool,
}

/// One triangulated sample of position and velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationSample {
    pub position: Point,
    pub velocity: Point,
}

/// Triangulates every usable combination and reports how many were dropped.
///
/// `anchor_obs[a0]` is the monostatic observation at anchor antenna `a0`.
/// `receiver_obs[j - 1][a0][aj]` is the bistatic observation at antenna `aj`
/// of receiver `j`, converted with the monostatic estimate of antenna `a0`.
pub fn triangulate_all(
    layout: &NodeLayout,
    anchor_obs: &[RangeRate],
    receiver_obs: &[Vec<Vec<RangeRate>>],
) -> (Vec<TriangulationSample>, usize) {
    let mut samples = Vec::new();
    let mut dropped = 0;
    for (j, k) in layout.receiver_pairs() {
        let (rj, rk) = (layout.node(j), layout.node(k));
        for (a0, m0) in anchor_obs.iter().enumerate() {
            for oj in &receiver_obs[j - 1][a0] {
                for ok in &receiver_obs[k - 1][a0] {
                    let sample = triangulate(m0.rho, oj.rho, ok.rho, layout.anchor, rj, rk).and_then(|p| {
                        solve_velocity(p, oj.v, ok.v, rj, rk).map(|v| TriangulationSample {
                            position: p,
                            velocity: v,
                        })
                    });
                    match sample {
                        Ok(s) if s.position.iter().chain(&s.velocity).all(|x| x.is_finite()) => {
                            samples.push(s)
                        }
                        _ => dropped += 1,
                    }
                }
            }
        }
    }
    (samples, dropped)
}

/// How triangulation samples are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionMethod {
    #[default]
    Average,
    /// Nearest-neighbour filtering with thresholds on position and velocity.
    /// `None` derives the threshold from the expected measurement spread.
    NearestNeighbor {
        xi_position: Option<f64>,
        xi_velocity: Option<f64>,
    },
}

/// Fuses position and velocity samples independently.
pub fn fuse_samples(
    samples: &[TriangulationSample],
    method: FusionMethod,
    default_xi: (f64, f64),
) -> Result<FusedEstimate> {
    let pos: Vec<Point> = samples.iter().map(|s| s.position).collect();
    let vel: Vec<Point> = samples.iter().map(|s| s.velocity).collect();
    match method {
        FusionMethod::Average => Ok(FusedEstimate {
            position: fuse_average(&pos)?,
            velocity: fuse_average(&vel)?,
            contributing: samples.len(),
        }),
        FusionMethod::NearestNeighbor {
            xi_position,
            xi_velocity,
        } => {
            let (p, n) = fuse_nearest_neighbor(&pos, xi_position.unwrap_or(default_xi.0))?;
            let (v, _) = fuse_nearest_neighbor(&vel, xi_velocity.unwrap_or(default_xi.1))?;
            Ok(FusedEstimate {
                position: p,
                velocity: v,
                contributing: n,
            })
        }
    }
}

/// Maps target states back to delay/Doppler paths at receiver `j`.
///
/// With `snap` the parameters are rounded to the grid. Gains are left at zero
/// for the caller to fit.
pub fn reconstruct_channel_params(
    states: &[TargetState],
    layout: &NodeLayout,
    j: usize,
    cfg: &OtfsConfig,
    snap: bool,
) -> Result<Vec<PathParams>> {
    states
        .iter()
        .map(|s| {
            let (tau, nu) = path_delay_doppler(layout, j, s, cfg.f_c);
            PathParams::from_physical(C64::new(0.0, 0.0), tau, nu, cfg, snap)
        })
        .collect()
}
