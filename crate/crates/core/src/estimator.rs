//! Delay-Doppler parameter estimation by grid-search correlation with
//! successive residual cancellation, plus regularized data detection and the
//! pilot-aided passive refinement loop.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelOperator, DdChannelOperator, LinearOperator, PathParams, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::fusion::RangeRate;
use crate::modem::{hard_decision, DdGrid, DopplerTransform, OtfsConfig, PilotSpec, C64};

/// Search grid: every delay tap by `N * oversample` Doppler points spanning
/// `[-N/2, N/2)` bins.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub g_tau: usize,
    pub g_nu: usize,
    pub oversample: usize,
}

impl SearchGrid {
    pub fn new(cfg: &OtfsConfig, oversample: usize) -> Result<Self> {
        if oversample == 0 {
            return Err(Error::InvalidConfig("oversample must be at least 1".into()));
        }
        Ok(Self {
            g_tau: cfg.m,
            g_nu: cfg.n * oversample,
            oversample,
        })
    }

    pub fn capacity(&self) -> usize {
        self.g_tau * self.g_nu
    }

    /// Signed Doppler (in bins) of Doppler grid index `j`.
    pub fn kappa(&self, j: usize) -> f64 {
        let n = self.g_nu / self.oversample;
        j as f64 / self.oversample as f64 - (n / 2) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub h_hat: C64,
    pub tau_hat: f64,
    pub nu_hat: f64,
    /// Magnitude of the winning correlation.
    pub correlation_peak: f64,
    pub l_idx: usize,
    /// Signed Doppler in bins.
    pub kappa: f64,
}

impl PathEstimate {
    pub fn to_path(&self, cfg: &OtfsConfig) -> PathParams {
        PathParams {
            h: self.h_hat,
            tau: self.tau_hat,
            nu: self.nu_hat,
            l_idx: self.l_idx,
            k_idx: (self.kappa.round() as i64).rem_euclid(cfg.n as i64) as usize,
        }
    }
}

/// Grid-search estimator with FFT plans and twiddles cached for one
/// configuration.
///
/// For delay `l` the correlation over all Doppler points is
/// `sum_m conj(s[m]) r[m + l] exp(-i 2 pi kappa m / MN)`. Splitting
/// `m = a + M b` turns the sum over `b` into an `N * oversample` point FFT,
/// leaving a twiddle-weighted sum over `a`.
pub struct ActiveEstimator {
    cfg: OtfsConfig,
    grid: SearchGrid,
    transform: DopplerTransform,
    fft: Arc<dyn Fft<f64>>,
    twiddle: Vec<C64>,
    premult: Vec<C64>,
}

impl ActiveEstimator {
    pub fn new(cfg: &OtfsConfig, grid: SearchGrid) -> Result<Self> {
        cfg.validate()?;
        if grid.g_tau != cfg.m || grid.g_nu != cfg.n * grid.oversample {
            return Err(Error::InvalidConfig("search grid does not match frame size".into()));
        }
        let (m, n, len) = (cfg.m, cfg.n, grid.g_nu);
        let mn = (m * n) as f64;
        let os = grid.oversample as f64;
        let twiddle = (0..m)
            .flat_map(|a| {
                (0..len).map(move |j| C64::from_polar(1.0, -2.0 * PI * (j * a) as f64 / (mn * os)))
            })
            .collect();
        // shifts the Doppler axis so index 0 is -N/2 bins
        let half = (n / 2) as f64;
        let premult = (0..m * n)
            .map(|i| C64::from_polar(1.0, 2.0 * PI * half * i as f64 / mn))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            transform: DopplerTransform::for_config(cfg),
            fft: FftPlanner::new().plan_fft_forward(len),
            twiddle,
            premult,
        })
    }

    pub fn grid(&self) -> &SearchGrid {
        &self.grid
    }

    pub fn config(&self) -> &OtfsConfig {
        &self.cfg
    }

    pub fn transform(&self) -> &DopplerTransform {
        &self.transform
    }

    /// Complex correlation over the whole grid, delay-major
    /// (`out[l * g_nu + j]`). Inputs are time-domain frames without CP.
    pub fn correlation_map(&self, s: &[C64], r: &[C64]) -> Vec<C64> {
        let (m, n, len) = (self.cfg.m, self.cfg.n, self.grid.g_nu);
        let mn = m * n;
        let sp: Vec<C64> = s.iter().zip(&self.premult).map(|(x, p)| x.conj() * p).collect();
        let rows: Vec<Vec<C64>> = (0..self.grid.g_tau)
            .into_par_iter()
            .map_init(
                || {
                    (
                        vec![C64::new(0.0, 0.0); m * len],
                        vec![C64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()],
                    )
                },
                |(buf, scratch), l| {
                    buf.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
                    for a in 0..m {
                        for b in 0..n {
                            let i = a + m * b;
                            buf[a * len + b] = sp[i] * r[(i + l) % mn];
                        }
                    }
                    self.fft.process_with_scratch(buf, scratch);
                    let mut row = vec![C64::new(0.0, 0.0); len];
                    for a in 0..m {
                        let tw = &self.twiddle[a * len..(a + 1) * len];
                        let y = &buf[a * len..(a + 1) * len];
                        for j in 0..len {
                            row[j] += tw[j] * y[j];
                        }
                    }
                    row
                },
            )
            .collect();
        rows.concat()
    }

    /// Index of the largest correlation magnitude; ties go to the smallest
    /// delay, then the smallest (most negative) Doppler.
    fn argmax(&self, map: &[C64]) -> (usize, usize, C64) {
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for l in 0..self.grid.g_tau {
            for j in 0..self.grid.g_nu {
                let v = map[l * self.grid.g_nu + j].norm_sqr();
                if v > best_v {
                    best_v = v;
                    best = (l, j);
                }
            }
        }
        (best.0, best.1, map[best.0 * self.grid.g_nu + best.1])
    }

    /// Estimates `p` paths from time-domain received frame `r` and reference
    /// `s`. Each gain is fitted on the residual left by the previous paths.
    pub fn estimate_time(&self, r: &[C64], s: &[C64], p: usize) -> Result<Vec<PathEstimate>> {
        let mn = self.cfg.frame_len();
        if r.len() != mn || s.len() != mn {
            return Err(Error::Dimension {
                what: "estimator input",
                expected: mn,
                got: if r.len() != mn { r.len() } else { s.len() },
            });
        }
        if p > self.grid.capacity() {
            return Err(Error::TooManyPaths {
                requested: p,
                capacity: self.grid.capacity(),
            });
        }
        let energy: f64 = s.iter().map(|x| x.norm_sqr()).sum();
        if energy == 0.0 {
            return Err(Error::ZeroEnergy);
        }
        let mut residual = r.to_vec();
        let mut out = Vec::with_capacity(p);
        for _ in 0..p {
            let map = self.correlation_map(s, &residual);
            let (l, j, corr) = self.argmax(&map);
            let kappa = self.grid.kappa(j);
            let h = corr / energy;
            ChannelOperator::single(l, kappa, mn).accumulate(s, &mut residual, -h);
            out.push(PathEstimate {
                h_hat: h,
                tau_hat: l as f64 * self.cfg.delay_resolution(),
                nu_hat: kappa * self.cfg.doppler_resolution(),
                correlation_peak: corr.norm(),
                l_idx: l,
                kappa,
            });
        }
        out.sort_by(|a, b| b.correlation_peak.total_cmp(&a.correlation_peak));
        Ok(out)
    }

    /// Like [`Self::estimate_time`] but stops early once the residual energy
    /// drops below `stop_ratio` times the received energy.
    pub fn estimate_time_adaptive(
        &self,
        r: &[C64],
        s: &[C64],
        max_paths: usize,
        stop_ratio: f64,
    ) -> Result<Vec<PathEstimate>> {
        let total: f64 = r.iter().map(|x| x.norm_sqr()).sum();
        let mut paths = Vec::new();
        for p in 1..=max_paths {
            paths = self.estimate_time(r, s, p)?;
            let ps: Vec<PathParams> = paths.iter().map(|e| e.to_path(&self.cfg)).collect();
            let fit = ChannelOperator::new(&ps, &self.cfg).apply(s);
            let res: f64 = r.iter().zip(&fit).map(|(a, b)| (a - b).norm_sqr()).sum();
            if res <= stop_ratio * total {
                break;
            }
        }
        Ok(paths)
    }

    /// Estimates `p` paths from delay-Doppler observation `y` given the full
    /// transmitted grid `d`.
    pub fn estimate(&self, y: &[C64], d: &[C64], p: usize) -> Result<Vec<PathEstimate>> {
        let mn = self.cfg.frame_len();
        for (what, v) in [("observation", y), ("reference grid", d)] {
            if v.len() != mn {
                return Err(Error::Dimension {
                    what,
                    expected: mn,
                    got: v.len(),
                });
            }
        }
        self.estimate_time(&self.transform.to_time(y), &self.transform.to_time(d), p)
    }

    /// Least-squares gain of each path taken on its own against `y`.
    pub fn fit_gains(&self, y: &[C64], d: &[C64], paths: &[PathParams]) -> Result<Vec<C64>> {
        let s = self.transform.to_time(d);
        let r = self.transform.to_time(y);
        let energy: f64 = s.iter().map(|x| x.norm_sqr()).sum();
        if energy == 0.0 {
            return Err(Error::ZeroEnergy);
        }
        let mn = self.cfg.frame_len();
        Ok(paths
            .iter()
            .map(|p| {
                let ts = ChannelOperator::single(p.l_idx, p.doppler_bins(&self.cfg), mn)
                    .apply(&s);
                ts.iter().zip(&r).map(|(a, b)| a.conj() * b).sum::<C64>() / energy
            })
            .collect())
    }
}

/// One-shot wrapper around [`ActiveEstimator::estimate`].
pub fn estimate_paths_active(
    y: &[C64],
    d: &[C64],
    p: usize,
    grid: SearchGrid,
    cfg: &OtfsConfig,
) -> Result<Vec<PathEstimate>> {
    ActiveEstimator::new(cfg, grid)?.estimate(y, d, p)
}

/// Pilot-only estimate: correlates against the pilot grid alone.
pub fn coarse_estimate_passive(
    y: &[C64],
    pilot: &PilotSpec,
    p: usize,
    est: &ActiveEstimator,
) -> Result<Vec<PathEstimate>> {
    let dp = pilot.grid(est.config())?;
    est.estimate(y, dp.as_slice(), p)
}

/// Monostatic range and radial velocity from the anchor's own echo.
pub fn monostatic_range_rate(e: &PathEstimate, f_c: f64) -> RangeRate {
    RangeRate {
        rho: e.tau_hat * SPEED_OF_LIGHT / 2.0,
        v: e.nu_hat * SPEED_OF_LIGHT / (2.0 * f_c),
        clamped: false,
    }
}

/// Receiver-side range and radial velocity after removing the monostatic leg.
pub fn bistatic_range_rate(e: &PathEstimate, mono: &RangeRate, f_c: f64) -> RangeRate {
    let rho = e.tau_hat * SPEED_OF_LIGHT - mono.rho;
    RangeRate {
        rho: rho.max(0.0),
        v: e.nu_hat * SPEED_OF_LIGHT / f_c - mono.v,
        clamped: rho < 0.0,
    }
}

/// Ranges and radial velocities per path (`ranges[i][j]`, receiver 0 first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingReport {
    pub ranges: Vec<Vec<RangeRate>>,
}

/// Converts associated per-receiver estimates into ranges and radial
/// velocities. `per_receiver[j][i]` must describe path `i` at receiver `j`.
pub fn extract_target_params(per_receiver: &[Vec<PathEstimate>], f_c: f64) -> Result<SensingReport> {
    let mono = per_receiver.first().ok_or(Error::MissingMonostatic)?;
    if mono.is_empty() {
        return Err(Error::MissingMonostatic);
    }
    for r in per_receiver {
        if r.len() != mono.len() {
            return Err(Error::Dimension {
                what: "paths per receiver",
                expected: mono.len(),
                got: r.len(),
            });
        }
    }
    let ranges = (0..mono.len())
        .map(|i| {
            let m = monostatic_range_rate(&mono[i], f_c);
            std::iter::once(m)
                .chain(per_receiver[1..].iter().map(|r| bistatic_range_rate(&r[i], &m, f_c)))
                .collect()
        })
        .collect();
    Ok(SensingReport { ranges })
}

/// Assigns estimates to targets by minimizing the total normalized distance
/// to predicted `(tau, nu)`. Returns `assignment[i]` = estimate index for
/// target `i`. Exhaustive for up to seven targets, greedy beyond.
pub fn associate(estimates: &[PathEstimate], predicted: &[(f64, f64)], cfg: &OtfsConfig) -> Vec<usize> {
    let p = predicted.len().min(estimates.len());
    let cost = |i: usize, e: usize| {
        (estimates[e].tau_hat - predicted[i].0).abs() / cfg.delay_resolution()
            + (estimates[e].nu_hat - predicted[i].1).abs() / cfg.doppler_resolution()
    };
    if p <= 7 {
        let mut best = (f64::INFINITY, Vec::new());
        let mut perm: Vec<usize> = (0..estimates.len()).collect();
        permute(&mut perm, 0, p, &mut |sel| {
            let c: f64 = sel.iter().enumerate().map(|(i, &e)| cost(i, e)).sum();
            if c < best.0 {
                best = (c, sel.to_vec());
            }
        });
        best.1
    } else {
        let mut used = vec![false; estimates.len()];
        (0..p)
            .map(|i| {
                let e = (0..estimates.len())
                    .filter(|&e| !used[e])
                    .min_by(|&a, &b| cost(i, a).total_cmp(&cost(i, b)))
                    .unwrap_or(0);
                used[e] = true;
                e
            })
            .collect()
    }
}

// visits every ordered selection of `k` items
fn permute(items: &mut Vec<usize>, start: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    if start == k {
        f(&items[..k]);
        return;
    }
    for i in start..items.len() {
        items[start..=i].rotate_right(1);
        permute(items, start + 1, k, f);
        items[start..=i].rotate_left(1);
    }
}

/// Gradient-descent settings for regularized least-squares detection.
/// `None` fields fall back to values derived from the operator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub mu: Option<f64>,
    pub eta: Option<f64>,
    pub eps_d: Option<f64>,
    pub max_iter: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            mu: None,
            eta: None,
            eps_d: None,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectOutcome {
    pub d: Vec<C64>,
    pub iterations: usize,
    pub converged: bool,
    pub mu: f64,
    pub eta: f64,
}

fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest eigenvalue of `A^H A` by power iteration.
pub fn largest_eigenvalue<O: LinearOperator + ?Sized>(op: &O, iters: usize) -> f64 {
    let n = op.dim();
    let mut x: Vec<C64> = (0..n)
        .map(|i| C64::from_polar(1.0, 0.7 * i as f64 + 0.3 * (i * i) as f64))
        .collect();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let nx = norm(&x);
        if nx == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = op.apply_adjoint(&op.apply(&x));
        lambda = norm(&y);
        x = y;
    }
    lambda
}

/// Minimizes `|y - A d|^2 + mu |d|^2` by gradient descent from `d = 0`.
pub fn detect_data<O: LinearOperator + ?Sized>(y: &[C64], op: &O, params: &DetectParams) -> Result<DetectOutcome> {
    let n = op.dim();
    if y.len() != n {
        return Err(Error::Dimension {
            what: "observation",
            expected: n,
            got: y.len(),
        });
    }
    let mu = params.mu.unwrap_or_else(|| 1e-2 * op.frobenius_sq() / n as f64);
    let eta = match params.eta {
        Some(e) => e,
        None => {
            let lam = largest_eigenvalue(op, 60);
            if lam + mu == 0.0 {
                return Ok(DetectOutcome {
                    d: vec![C64::new(0.0, 0.0); n],
                    iterations: 0,
                    converged: true,
                    mu,
                    eta: 0.0,
                });
            }
            1.0 / (2.0 * lam + 2.0 * mu)
        }
    };
    let eps = params.eps_d.unwrap_or(1e-6 * (n as f64).sqrt());
    let ahy = op.apply_adjoint(y);
    let mut d = vec![C64::new(0.0, 0.0); n];
    let mut reference = 0.0;
    for it in 1..=params.max_iter {
        let g = op.apply_adjoint(&op.apply(&d));
        let mut step = 0.0;
        for i in 0..n {
            let delta = 2.0 * eta * (g[i] - ahy[i] + mu * d[i]);
            d[i] -= delta;
            step += delta.norm_sqr();
        }
        let dn = norm(&d);
        if it == 1 {
            reference = dn.max(f64::MIN_POSITIVE);
        } else if !dn.is_finite() || dn > 1e3 * reference {
            return Err(Error::Divergence { iteration: it, norm: dn });
        }
        if step.sqrt() < eps {
            return Ok(DetectOutcome {
                d,
                iterations: it,
                converged: true,
                mu,
                eta,
            });
        }
    }
    Ok(DetectOutcome {
        d,
        iterations: params.max_iter,
        converged: false,
        mu,
        eta,
    })
}

/// Runs [`detect_data`] for a sparse channel without leaving the time
/// domain; the Doppler transform is unitary, so the iterates are the same.
pub fn detect_data_sparse(
    y: &[C64],
    paths: &[PathParams],
    cfg: &OtfsConfig,
    transform: &DopplerTransform,
    params: &DetectParams,
) -> Result<DetectOutcome> {
    let op = ChannelOperator::new(paths, cfg);
    let mut out = detect_data(&transform.to_time(y), &op, params)?;
    out.d = transform.to_dd(&out.d);
    Ok(out)
}

/// Soft data estimate for a frame carrying a known superimposed pilot. The
/// pilot's contribution is cancelled first, so regularization shrinks only
/// the unknown data and the returned `d` excludes the pilot.
pub fn detect_data_pilot_cancelled(
    y: &[C64],
    paths: &[PathParams],
    pilot: &DdGrid,
    cfg: &OtfsConfig,
    transform: &DopplerTransform,
    params: &DetectParams,
) -> Result<DetectOutcome> {
    let hp = DdChannelOperator::new(paths, cfg).apply(pilot.as_slice());
    let rest: Vec<C64> = y.iter().zip(&hp).map(|(a, b)| a - b).collect();
    detect_data_sparse(&rest, paths, cfg, transform, params)
}

/// Stopping tolerances for the passive refinement loop, relative to the
/// current estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuterLoopParams {
    pub max_outer: usize,
    pub eps_h: f64,
    pub eps_tau: f64,
    pub eps_nu: f64,
    pub detect: DetectParams,
}

impl Default for OuterLoopParams {
    fn default() -> Self {
        Self {
            max_outer: 5,
            eps_h: 1e-3,
            eps_tau: 1e-3,
            eps_nu: 1e-3,
            detect: DetectParams::default(),
        }
    }
}

impl OuterLoopParams {
    /// True when `new` is within tolerance of `old` in gains, delays and
    /// Dopplers. Both are matched after sorting by grid position.
    pub fn settled(&self, old: &[PathParams], new: &[PathParams]) -> bool {
        if old.len() != new.len() {
            return false;
        }
        let key = |p: &PathParams| (p.l_idx, p.nu);
        let mut a = old.to_vec();
        let mut b = new.to_vec();
        a.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap_or(std::cmp::Ordering::Equal));
        b.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap_or(std::cmp::Ordering::Equal));
        let close = |f: &dyn Fn(&PathParams) -> C64, eps: f64| {
            let diff: f64 = a.iter().zip(&b).map(|(x, y)| (f(x) - f(y)).norm_sqr()).sum();
            let cur: f64 = b.iter().map(|y| f(y).norm_sqr()).sum();
            diff.sqrt() <= eps * cur.sqrt() + 1e-15
        };
        close(&|p| p.h, self.eps_h)
            && close(&|p| C64::new(p.tau, 0.0), self.eps_tau)
            && close(&|p| C64::new(p.nu, 0.0), self.eps_nu)
    }
}

#[derive(Clone, Debug)]
pub struct PassiveOutcome {
    pub paths: Vec<PathEstimate>,
    /// Detected data plus pilot.
    pub d_hat: DdGrid,
    /// Hard-decided data grid without the pilot.
    pub data_hat: DdGrid,
    pub iterations: usize,
    pub converged: bool,
    /// Residual `|y - H d_hat|` after each accepted iteration.
    pub residuals: Vec<f64>,
}

fn residual_norm(y: &[C64], paths: &[PathEstimate], d: &[C64], cfg: &OtfsConfig) -> f64 {
    let ps: Vec<PathParams> = paths.iter().map(|p| p.to_path(cfg)).collect();
    let hy = DdChannelOperator::new(&ps, cfg).apply(d);
    y.iter().zip(&hy).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
}

/// Single-receiver passive loop: pilot-only estimate, then alternate data
/// detection and full-frame re-estimation until the parameters settle.
/// An update that would raise the residual is rejected and ends the loop.
///
/// The pilot cell is taken to carry no data.
pub fn passive_outer_loop(
    y: &[C64],
    pilot: &PilotSpec,
    p: usize,
    est: &ActiveEstimator,
    params: &OuterLoopParams,
) -> Result<PassiveOutcome> {
    let cfg = est.config();
    let dp = pilot.grid(cfg)?;
    let mut paths = coarse_estimate_passive(y, pilot, p, est)?;
    let mut d_hat = dp.clone();
    let mut data_hat = DdGrid::zeros(cfg.m, cfg.n);
    let mut residuals = vec![residual_norm(y, &paths, dp.as_slice(), cfg)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..params.max_outer {
        iterations += 1;
        let ps: Vec<PathParams> = paths.iter().map(|e| e.to_path(cfg)).collect();
        let det = detect_data_pilot_cancelled(y, &ps, &dp, cfg, est.transform(), &params.detect)?;
        let mut data = hard_decision(&DdGrid::from_vec(cfg.m, cfg.n, det.d)?, cfg)?;
        pilot.reserve(&mut data);
        let full = data.add(&dp)?;
        let new_paths = est.estimate(y, full.as_slice(), p)?;
        let res = residual_norm(y, &new_paths, full.as_slice(), cfg);
        if res > *residuals.last().unwrap_or(&f64::INFINITY) {
            break;
        }
        let new_ps: Vec<PathParams> = new_paths.iter().map(|e| e.to_path(cfg)).collect();
        let settled = params.settled(&ps, &new_ps);
        paths = new_paths;
        d_hat = full;
        data_hat = data;
        residuals.push(res);
        if settled {
            converged = true;
            break;
        }
    }
    Ok(PassiveOutcome {
        paths,
        d_hat,
        data_hat,
        iterations,
        converged,
        residuals,
    })
}
