//! Correlated-random-walk motion model and the Kalman filter built on it.
//!
//! Per axis the velocity is an Ornstein-Uhlenbeck process with mean-reversion
//! rate `delta`, long-run mean `omega` and noise intensity `psi`; position is
//! its integral. The discretized transition and process noise are exact for a
//! step of `dt`.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::TargetState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrwParams {
    pub delta: f64,
    pub omega: [f64; 2],
    pub psi: f64,
    pub dt: f64,
}

impl Default for CrwParams {
    fn default() -> Self {
        Self {
            delta: 1.5,
            omega: [0.0, 0.0],
            psi: 0.5,
            dt: 0.5,
        }
    }
}

impl CrwParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.psi >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(
                "motion model needs delta > 0, psi >= 0 and dt > 0".into(),
            ));
        }
        Ok(())
    }

    /// Velocity autocorrelation over one step, `exp(-delta dt)`.
    pub fn decay(&self) -> f64 {
        (-self.delta * self.dt).exp()
    }

    /// Method-of-moments fit to observed velocity sequences sampled every
    /// `dt`: the lag-one regression slope gives the decay and the residual
    /// variance gives `psi`. The long-run mean is fixed at zero.
    pub fn fit(velocity_tracks: &[Vec<[f64; 2]>], dt: f64) -> Result<Self> {
        let (mut sxy, mut sxx, mut n) = (0.0, 0.0, 0usize);
        for track in velocity_tracks {
            for w in track.windows(2) {
                for ax in 0..2 {
                    sxy += w[0][ax] * w[1][ax];
                    sxx += w[0][ax] * w[0][ax];
                }
                n += 1;
            }
        }
        if n < 2 || sxx == 0.0 {
            return Err(Error::Empty);
        }
        let a = (sxy / sxx).clamp(1e-6, 1.0 - 1e-9);
        let mut ss = 0.0;
        for track in velocity_tracks {
            for w in track.windows(2) {
                for ax in 0..2 {
                    ss += (w[1][ax] - a * w[0][ax]).powi(2);
                }
            }
        }
        let resid_var = ss / (2 * n) as f64;
        let delta = -a.ln() / dt;
        let psi = (resid_var * 2.0 * delta / (1.0 - a * a)).sqrt();
        Ok(Self {
            delta,
            omega: [0.0, 0.0],
            psi,
            dt,
        })
    }
}

/// State transition for `[alpha, beta, v_x, v_y]` (mean part excluded).
pub fn build_transition(p: &CrwParams) -> Matrix4<f64> {
    let e = p.decay();
    let g = (1.0 - e) / p.delta;
    Matrix4::new(
        1.0, 0.0, g, 0.0, //
        0.0, 1.0, 0.0, g, //
        0.0, 0.0, e, 0.0, //
        0.0, 0.0, 0.0, e,
    )
}

/// Deterministic drift added by a non-zero long-run mean velocity.
pub fn mean_drift(p: &CrwParams) -> Vector4<f64> {
    let e = p.decay();
    let gx = p.dt - (1.0 - e) / p.delta;
    Vector4::new(
        p.omega[0] * gx,
        p.omega[1] * gx,
        p.omega[0] * (1.0 - e),
        p.omega[1] * (1.0 - e),
    )
}

/// Exact discretized process-noise covariance. With `diagonal_only` the
/// position-velocity cross terms are dropped.
pub fn process_noise(p: &CrwParams, diagonal_only: bool) -> Matrix4<f64> {
    let (d, t, s2) = (p.delta, p.dt, p.psi * p.psi);
    let e = (-d * t).exp();
    let e2 = (-2.0 * d * t).exp();
    let var_v = s2 * (1.0 - e2) / (2.0 * d);
    let cov_xv = s2 / (2.0 * d * d) * (1.0 - e).powi(2);
    let var_x = s2 / (d * d) * (t - 2.0 * (1.0 - e) / d + (1.0 - e2) / (2.0 * d));
    let c = if diagonal_only { 0.0 } else { cov_xv };
    Matrix4::new(
        var_x, 0.0, c, 0.0, //
        0.0, var_x, 0.0, c, //
        c, 0.0, var_v, 0.0, //
        0.0, c, 0.0, var_v,
    )
}

/// Draws the next state of the walk.
pub fn crw_step<R: Rng>(s: &TargetState, p: &CrwParams, rng: &mut R) -> TargetState {
    let mean = build_transition(p) * s.to_vector() + mean_drift(p);
    let q = process_noise(p, false);
    let l = q.cholesky().map(|c| c.l()).unwrap_or_else(Matrix4::zeros);
    let z = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    TargetState::from_vector(&(mean + l * z))
}

/// Filter state plus the model matrices used by the next update.
#[derive(Clone, Debug, PartialEq)]
pub struct KfState {
    pub s: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub t: Matrix4<f64>,
    pub v: Matrix4<f64>,
    pub drift: Vector4<f64>,
}

impl KfState {
    /// Starts from a first measurement `z` with covariance `p0`.
    pub fn init(z: Vector4<f64>, p0: Matrix4<f64>, model: &CrwParams) -> Self {
        Self {
            s: z,
            p: p0,
            t: build_transition(model),
            v: Matrix4::identity(),
            drift: mean_drift(model),
        }
    }

    pub fn state(&self) -> TargetState {
        TargetState::from_vector(&self.s)
    }

    /// One-step forecast of the state.
    pub fn predict(&self) -> Vector4<f64> {
        self.t * self.s + self.drift
    }
}

/// Forecast followed by a Joseph-form measurement update.
pub fn kf_update(prev: &KfState, z: &Vector4<f64>, q: &Matrix4<f64>, r: &Matrix4<f64>) -> Result<KfState> {
    let s_f = prev.predict();
    let p_f = prev.t * prev.p * prev.t.transpose() + q;
    let v = prev.v;
    let innov = v * p_f * v.transpose() + r;
    let inv = match innov.try_inverse() {
        Some(i) => i,
        None => return Err(Error::SingularInnovation { condition: f64::INFINITY }),
    };
    let sym = innov.symmetric_eigenvalues();
    let (lo, hi) = sym
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x.abs()), hi.max(x.abs())));
    let condition = if lo == 0.0 { f64::INFINITY } else { hi / lo };
    if condition > 1e14 {
        return Err(Error::SingularInnovation { condition });
    }
    let k = p_f * v.transpose() * inv;
    let s = s_f + k * (z - v * s_f);
    let ikv = Matrix4::identity() - k * v;
    let p = ikv * p_f * ikv.transpose() + k * r * k.transpose();
    let p = (p + p.transpose()) * 0.5;
    Ok(KfState {
        s,
        p,
        t: prev.t,
        v,
        drift: prev.drift,
    })
}

/// Forecast only, for steps without a usable measurement.
pub fn kf_predict(prev: &KfState, q: &Matrix4<f64>) -> KfState {
    KfState {
        s: prev.predict(),
        p: prev.t * prev.p * prev.t.transpose() + q,
        ..prev.clone()
    }
}

/// Squared Mahalanobis distance of `z` from the forecast, under the
/// innovation covariance the update would use.
pub fn innovation_distance(prev: &KfState, z: &Vector4<f64>, q: &Matrix4<f64>, r: &Matrix4<f64>) -> Result<f64> {
    let s_f = prev.predict();
    let p_f = prev.t * prev.p * prev.t.transpose() + q;
    let innov = prev.v * p_f * prev.v.transpose() + r;
    let nu = z - prev.v * s_f;
    let inv = innov
        .try_inverse()
        .ok_or(Error::SingularInnovation { condition: f64::INFINITY })?;
    Ok((nu.transpose() * inv * nu)[(0, 0)])
}
