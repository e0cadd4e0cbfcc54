//! Closed-form position-error covariance of range triangulation and the node
//! placement it favours.
//!
//! Variances here refer to the squared ranges `rho^2` fed to the triangulation,
//! assumed independent across nodes. With the anchor at the origin and
//! `D = x_j y_k - x_k y_j`, first-order propagation through the linear solve
//! gives
//!
//! ```text
//! var(alpha) = [ (y_k - y_j)^2 s0 + y_k^2 sj + y_j^2 sk ] / (4 D^2)
//! var(beta)  = [ (x_k - x_j)^2 s0 + x_k^2 sj + x_j^2 sk ] / (4 D^2)
//! ```
//!
//! so each node's variance is weighted by the squared length of the opposite
//! side of the node triangle.

use nalgebra::{Matrix2, Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{NodeLayout, COLLINEAR_TOL};
use crate::state::Point;

/// Variances of the squared ranges at the anchor and receivers `j`, `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeVariances {
    pub sigma0_sq: f64,
    pub sigmaj_sq: f64,
    pub sigmak_sq: f64,
}

impl RangeVariances {
    pub fn uniform(v: f64) -> Self {
        Self {
            sigma0_sq: v,
            sigmaj_sq: v,
            sigmak_sq: v,
        }
    }
}

/// First-order variance of `rho^2` given the std of `rho`.
pub fn squared_range_variance(rho: f64, sigma_rho: f64) -> f64 {
    4.0 * rho * rho * sigma_rho * sigma_rho
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryScore {
    /// Full position-error covariance.
    pub covariance: [[f64; 2]; 2],
    pub trace: f64,
    /// Larger of the two per-axis variances.
    pub kappa_max: f64,
    /// Twice the signed triangle area spanned by anchor, `R_j`, `R_k`.
    pub det: f64,
}

impl GeometryScore {
    fn from_cov(c: Matrix2<f64>, det: f64) -> Self {
        Self {
            covariance: [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]],
            trace: c[(0, 0)] + c[(1, 1)],
            kappa_max: c[(0, 0)].max(c[(1, 1)]),
            det,
        }
    }
}

/// Position-error covariance of one triangulation.
pub fn covariance_general(anchor: Point, r_j: Point, r_k: Point, var: RangeVariances) -> Result<GeometryScore> {
    let (xj, yj) = (r_j[0] - anchor[0], r_j[1] - anchor[1]);
    let (xk, yk) = (r_k[0] - anchor[0], r_k[1] - anchor[1]);
    let det = xj * yk - xk * yj;
    let scale = xj.hypot(yj) * xk.hypot(yk);
    if scale == 0.0 || (det / scale).abs() < COLLINEAR_TOL {
        return Err(Error::Collinear {
            det: if scale == 0.0 { 0.0 } else { det / scale },
        });
    }
    let a_inv = Matrix2::new(yk, -yj, -xk, xj) / det;
    // d(rhs)/d(rho0^2, rhoj^2, rhok^2)
    let db = Matrix2x3::new(0.5, -0.5, 0.0, 0.5, 0.0, -0.5);
    let jac = a_inv * db;
    let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(var.sigma0_sq, var.sigmaj_sq, var.sigmak_sq));
    Ok(GeometryScore::from_cov(jac * s * jac.transpose(), det))
}

/// Covariance of the average of independent triangulations. Collinear
/// triples are skipped; the second value counts them.
pub fn covariance_multi(anchor: Point, triples: &[(Point, Point, RangeVariances)]) -> Result<(GeometryScore, usize)> {
    let mut sum = Matrix2::zeros();
    let mut used = 0usize;
    let mut excluded = 0usize;
    let mut det_min = f64::INFINITY;
    for (rj, rk, v) in triples {
        match covariance_general(anchor, *rj, *rk, *v) {
            Ok(g) => {
                let c = g.covariance;
                sum += Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]);
                det_min = det_min.min(g.det.abs());
                used += 1;
            }
            Err(Error::Collinear { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::Empty);
    }
    let n = used as f64;
    Ok((GeometryScore::from_cov(sum / (n * n), det_min), excluded))
}

/// Covariance after averaging `n^3` independent triangulations of the same
/// node triple, as obtained with `n` antennas per node.
pub fn nant_reduction(base: &GeometryScore, n_ant: usize) -> GeometryScore {
    let f = (n_ant as f64).powi(3);
    let c = base.covariance;
    GeometryScore::from_cov(
        Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]) / f,
        base.det,
    )
}

/// True when the reduced score equals the base divided by `n^3`.
pub fn nant_reduction_check(base: &GeometryScore, reduced: &GeometryScore, n_ant: usize, rel_tol: f64) -> bool {
    let want = nant_reduction(base, n_ant);
    (reduced.trace - want.trace).abs() <= rel_tol * want.trace
}

/// Anchor at the origin and receivers alternating between `(L, 0)` and
/// `(0, L)`, the widest orthogonal span within the region.
pub fn place_orthogonal_optimal(side: f64, n_receivers: usize, n_ant: usize) -> Result<NodeLayout> {
    if n_receivers < 2 {
        return Err(Error::InvalidConfig("need at least two receivers".into()));
    }
    if !(side > 0.0) {
        return Err(Error::InvalidConfig("region side must be positive".into()));
    }
    let receivers = (0..n_receivers)
        .map(|i| if i % 2 == 0 { [side, 0.0] } else { [0.0, side] })
        .collect();
    Ok(NodeLayout::new([0.0, 0.0], receivers, n_ant, side))
}

/// Mean-squared position error of a layout at `target` when every range has
/// std `sigma_rho`, averaging over all non-collinear receiver pairs.
pub fn layout_score(layout: &NodeLayout, target: Point, sigma_rho: f64) -> Result<(GeometryScore, usize)> {
    let var_at = |p: Point| squared_range_variance(crate::state::dist(p, target), sigma_rho);
    let v0 = var_at(layout.anchor);
    let triples: Vec<_> = layout
        .receiver_pairs()
        .into_iter()
        .map(|(j, k)| {
            let (rj, rk) = (layout.node(j), layout.node(k));
            (
                rj,
                rk,
                RangeVariances {
                    sigma0_sq: v0,
                    sigmaj_sq: var_at(rj),
                    sigmak_sq: var_at(rk),
                },
            )
        })
        .collect();
    covariance_multi(layout.anchor, &triples)
}
