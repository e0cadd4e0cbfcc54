//! Sparse delay-Doppler channel: path parameters, the time-domain operator,
//! the effective delay-Doppler matrix and the geometry-to-channel mapping.
//!
//! A path with delay tap `l` and Doppler `kappa` (in bins, signed) acts on a
//! time vector as `(P^l D^kappa s)[n] = c^(kappa * m) s[m]` with
//! `m = (n - l) mod MN` and `c = exp(i 2 pi / MN)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::NodeLayout;
use crate::modem::{add_cp, DopplerTransform, OtfsConfig, C64};
use crate::state::{dist, dot, sub, Point, TargetState};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// One propagation path.
///
/// `l_idx` is the integer delay tap used by the operator. `k_idx` is the
/// Doppler bin wrapped into `[0, N)`; the operator itself uses the signed,
/// possibly fractional Doppler `nu`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub h: C64,
    pub tau: f64,
    pub nu: f64,
    pub l_idx: usize,
    pub k_idx: usize,
}

impl PathParams {
    /// A path sitting exactly on grid point `(l, k)` with `k` signed.
    pub fn on_grid(h: C64, l: usize, k: i64, cfg: &OtfsConfig) -> Self {
        Self {
            h,
            tau: l as f64 * cfg.delay_resolution(),
            nu: k as f64 * cfg.doppler_resolution(),
            l_idx: l,
            k_idx: k.rem_euclid(cfg.n as i64) as usize,
        }
    }

    /// Builds a path from physical delay and Doppler.
    ///
    /// The delay is always rounded to an integer tap. With `snap` the Doppler
    /// and the reported delay are snapped to the grid too; otherwise they keep
    /// their physical values.
    pub fn from_physical(h: C64, tau: f64, nu: f64, cfg: &OtfsConfig, snap: bool) -> Result<Self> {
        if !(tau >= 0.0) || tau >= cfg.max_delay() {
            return Err(Error::RangeAmbiguity {
                tau,
                max: cfg.max_delay(),
            });
        }
        let l = (tau / cfg.delay_resolution()).round() as usize;
        if l >= cfg.m {
            return Err(Error::RangeAmbiguity {
                tau,
                max: cfg.max_delay(),
            });
        }
        let k = (nu / cfg.doppler_resolution()).round() as i64;
        if snap {
            Ok(Self::on_grid(h, l, k, cfg))
        } else {
            Ok(Self {
                h,
                tau,
                nu,
                l_idx: l,
                k_idx: k.rem_euclid(cfg.n as i64) as usize,
            })
        }
    }

    /// Signed Doppler in bins (`nu * N * T`).
    pub fn doppler_bins(&self, cfg: &OtfsConfig) -> f64 {
        self.nu / cfg.doppler_resolution()
    }
}

/// Paths seen by one receiver plus its noise variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub paths: Vec<PathParams>,
    pub receiver_id: usize,
    pub noise_var: f64,
}

/// Linear map on complex vectors with an adjoint.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64]) -> Vec<C64>;
    fn apply_adjoint(&self, x: &[C64]) -> Vec<C64>;
    /// `trace(A^H A)`.
    fn frobenius_sq(&self) -> f64;
}

struct Tap {
    h: C64,
    l: usize,
    kappa: f64,
    phasor: Vec<C64>,
}

/// `sum_q h_q P^(l_q) D^(kappa_q)` acting on time-domain frames (no CP).
pub struct ChannelOperator {
    mn: usize,
    taps: Vec<Tap>,
}

impl ChannelOperator {
    pub fn new(paths: &[PathParams], cfg: &OtfsConfig) -> Self {
        let mn = cfg.frame_len();
        let taps = paths
            .iter()
            .map(|p| Self::tap(p.h, p.l_idx, p.doppler_bins(cfg), mn))
            .collect();
        Self { mn, taps }
    }

    /// A single unit-gain shift used by the estimator.
    pub fn single(l: usize, kappa: f64, mn: usize) -> Self {
        Self {
            mn,
            taps: vec![Self::tap(C64::new(1.0, 0.0), l, kappa, mn)],
        }
    }

    fn tap(h: C64, l: usize, kappa: f64, mn: usize) -> Tap {
        let w = 2.0 * PI * kappa / mn as f64;
        let phasor = (0..mn).map(|m| C64::from_polar(1.0, w * m as f64)).collect();
        Tap {
            h,
            l: l % mn,
            kappa,
            phasor,
        }
    }

    pub fn accumulate(&self, s: &[C64], out: &mut [C64], scale: C64) {
        let mn = self.mn;
        for t in &self.taps {
            let g = t.h * scale;
            for m in 0..mn {
                let n = (m + t.l) % mn;
                out[n] += g * t.phasor[m] * s[m];
            }
        }
    }
}

impl LinearOperator for ChannelOperator {
    fn dim(&self) -> usize {
        self.mn
    }

    fn apply(&self, s: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.mn];
        self.accumulate(s, &mut out, C64::new(1.0, 0.0));
        out
    }

    fn apply_adjoint(&self, x: &[C64]) -> Vec<C64> {
        let mn = self.mn;
        let mut out = vec![C64::new(0.0, 0.0); mn];
        for t in &self.taps {
            let g = t.h.conj();
            for m in 0..mn {
                out[m] += g * t.phasor[m].conj() * x[(m + t.l) % mn];
            }
        }
        out
    }

    fn frobenius_sq(&self) -> f64 {
        // trace((P^l D^a)^H P^l' D^b) vanishes unless l == l'
        let mn = self.mn as f64;
        let mut acc = C64::new(0.0, 0.0);
        for a in &self.taps {
            for b in &self.taps {
                if a.l != b.l {
                    continue;
                }
                let dk = b.kappa - a.kappa;
                let tr = if dk == 0.0 {
                    C64::new(mn, 0.0)
                } else {
                    // geometric series sum_m exp(i 2 pi dk m / MN)
                    let z = C64::from_polar(1.0, 2.0 * PI * dk / mn);
                    let num = C64::from_polar(1.0, 2.0 * PI * dk) - 1.0;
                    if (z - 1.0).norm() < 1e-15 {
                        C64::new(mn, 0.0)
                    } else {
                        num / (z - 1.0)
                    }
                };
                acc += a.h.conj() * b.h * tr;
            }
        }
        acc.re.max(0.0)
    }
}

/// The effective delay-Doppler channel applied through fast transforms.
pub struct DdChannelOperator {
    pub time: ChannelOperator,
    transform: DopplerTransform,
}

impl DdChannelOperator {
    pub fn new(paths: &[PathParams], cfg: &OtfsConfig) -> Self {
        Self {
            time: ChannelOperator::new(paths, cfg),
            transform: DopplerTransform::for_config(cfg),
        }
    }
}

impl LinearOperator for DdChannelOperator {
    fn dim(&self) -> usize {
        self.time.dim()
    }

    fn apply(&self, d: &[C64]) -> Vec<C64> {
        self.transform.to_dd(&self.time.apply(&self.transform.to_time(d)))
    }

    fn apply_adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.transform
            .to_dd(&self.time.apply_adjoint(&self.transform.to_time(y)))
    }

    fn frobenius_sq(&self) -> f64 {
        self.time.frobenius_sq()
    }
}

/// A dense matrix used as an operator (small problems and tests).
pub struct DenseOperator(pub DMatrix<C64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn apply(&self, x: &[C64]) -> Vec<C64> {
        (&self.0 * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn apply_adjoint(&self, x: &[C64]) -> Vec<C64> {
        (self.0.adjoint() * nalgebra::DVector::from_column_slice(x))
            .as_slice()
            .to_vec()
    }

    fn frobenius_sq(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Passes a transmit sequence (with CP) through the channel and adds
/// circularly-symmetric Gaussian noise of variance `ch.noise_var`.
pub fn apply_channel(s: &[C64], ch: &ChannelRealization, cfg: &OtfsConfig, seed: u64) -> Result<Vec<C64>> {
    let mn = cfg.frame_len();
    if s.len() != mn + cfg.cp_len {
        return Err(Error::Dimension {
            what: "transmit sequence",
            expected: mn + cfg.cp_len,
            got: s.len(),
        });
    }
    let body = ChannelOperator::new(&ch.paths, cfg).apply(&s[cfg.cp_len..]);
    let mut r = add_cp(&body, cfg.cp_len);
    if ch.noise_var > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (ch.noise_var / 2.0).sqrt();
        for x in r.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *x += C64::new(re * sd, im * sd);
        }
    }
    Ok(r)
}

/// Dense `F_N (x) I_M`.
fn dft_kron(cfg: &OtfsConfig) -> DMatrix<C64> {
    let n = cfg.n;
    let s = 1.0 / (n as f64).sqrt();
    let f_n = DMatrix::from_fn(n, n, |k, t| {
        C64::from_polar(s, -2.0 * PI * (k * t) as f64 / n as f64)
    });
    f_n.kronecker(&DMatrix::<C64>::identity(cfg.m, cfg.m))
}

/// Effective delay-Doppler matrix `sum_q h_q F P^l D^kappa F^H` built from
/// dense Kronecker, permutation and diagonal factors.
///
/// Cost is cubic in `M*N`; use [`DdChannelOperator`] for large frames.
pub fn effective_dd_matrix(ch: &ChannelRealization, cfg: &OtfsConfig) -> DMatrix<C64> {
    let mn = cfg.frame_len();
    let c = 2.0 * PI / mn as f64;
    let mut h_time = DMatrix::<C64>::zeros(mn, mn);
    for p in &ch.paths {
        let kappa = p.doppler_bins(cfg);
        let perm = DMatrix::from_fn(mn, mn, |r, col| {
            if r == (col + p.l_idx) % mn {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(mn, |m, _| {
            C64::from_polar(1.0, c * kappa * m as f64)
        }));
        h_time += (perm * diag) * p.h;
    }
    let f = dft_kron(cfg);
    &f * h_time * f.adjoint()
}

/// How path gains are drawn from geometry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GainModel {
    /// `|h| = 1`, phase uniform.
    #[default]
    UnitRandomPhase,
    /// `|h| = d_ref^2 / (rho_tx rho_rx)`, phase uniform.
    FreeSpace { reference_distance: f64 },
}

/// Range and range-rate of a target relative to one node.
///
/// The radial velocity is the velocity component along the unit vector from
/// the target toward the node.
pub fn range_and_rate(node: Point, target: &TargetState) -> (f64, f64) {
    let rho = dist(node, target.position);
    if rho == 0.0 {
        return (0.0, 0.0);
    }
    let u = sub(node, target.position);
    (rho, dot(target.velocity, u) / rho)
}

/// Physical delay and Doppler of the echo from `target` seen at receiver `j`
/// (0 is the monostatic anchor).
pub fn path_delay_doppler(layout: &NodeLayout, j: usize, target: &TargetState, f_c: f64) -> (f64, f64) {
    let (rho0, v0) = range_and_rate(layout.anchor, target);
    if j == 0 {
        (2.0 * rho0 / SPEED_OF_LIGHT, 2.0 * v0 * f_c / SPEED_OF_LIGHT)
    } else {
        let (rhoj, vj) = range_and_rate(layout.receivers[j - 1], target);
        ((rho0 + rhoj) / SPEED_OF_LIGHT, (v0 + vj) * f_c / SPEED_OF_LIGHT)
    }
}

/// Channel seen at every receiver (anchor first) for the given targets.
///
/// Noise variance is left at zero; callers set it from the SNR.
pub fn geometry_to_channel<R: Rng>(
    layout: &NodeLayout,
    targets: &[TargetState],
    cfg: &OtfsConfig,
    on_grid: bool,
    gains: GainModel,
    rng: &mut R,
) -> Result<Vec<ChannelRealization>> {
    (0..=layout.receivers.len())
        .map(|j| {
            let paths = targets
                .iter()
                .map(|t| {
                    let (tau, nu) = path_delay_doppler(layout, j, t, cfg.f_c);
                    let phase = rng.random::<f64>() * 2.0 * PI;
                    let amp = match gains {
                        GainModel::UnitRandomPhase => 1.0,
                        GainModel::FreeSpace { reference_distance } => {
                            let rho0 = dist(layout.anchor, t.position);
                            let rhoj = if j == 0 {
                                rho0
                            } else {
                                dist(layout.receivers[j - 1], t.position)
                            };
                            reference_distance.powi(2) / (rho0 * rhoj).max(1e-9)
                        }
                    };
                    PathParams::from_physical(C64::from_polar(amp, phase), tau, nu, cfg, on_grid)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ChannelRealization {
                paths,
                receiver_id: j,
                noise_var: 0.0,
            })
        })
        .collect()
}

/// Mean noiseless power per received sample.
pub fn received_power(s: &[C64], paths: &[PathParams], cfg: &OtfsConfig) -> f64 {
    let body = ChannelOperator::new(paths, cfg).apply(&s[cfg.cp_len..]);
    body.iter().map(|x| x.norm_sqr()).sum::<f64>() / body.len() as f64
}
