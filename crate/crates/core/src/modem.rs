//! OTFS modulation on a delay-Doppler grid.
//!
//! A frame is an `M x N` grid (delay bins by Doppler bins). Vectorization is
//! column-major throughout, so grid element `(l, k)` lives at index `l + M*k`.
//! Time-domain samples use the same layout: sample `l + M*n` is delay tap `l`
//! of block `n`.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Waveform numerology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtfsConfig {
    /// Delay bins (subcarriers).
    pub m: usize,
    /// Doppler bins (OFDM-like blocks).
    pub n: usize,
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
    /// Carrier frequency in Hz.
    pub f_c: f64,
    pub cp_len: usize,
    pub qam_order: usize,
}

impl Default for OtfsConfig {
    fn default() -> Self {
        Self {
            m: 256,
            n: 16,
            delta_f: 240e3,
            f_c: 30e9,
            cp_len: 64,
            qam_order: 4,
        }
    }
}

impl OtfsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidConfig("grid dimensions must be positive".into()));
        }
        if !(self.delta_f > 0.0) || !(self.f_c > 0.0) {
            return Err(Error::InvalidConfig(
                "subcarrier spacing and carrier must be positive".into(),
            ));
        }
        if self.cp_len > self.m * self.n {
            return Err(Error::InvalidConfig("cyclic prefix longer than frame".into()));
        }
        Qam::new(self.qam_order)?;
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.m * self.n
    }

    /// Block duration `T = 1/delta_f`.
    pub fn symbol_duration(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Delay resolution `1/(M delta_f)` in seconds.
    pub fn delay_resolution(&self) -> f64 {
        1.0 / (self.m as f64 * self.delta_f)
    }

    /// Doppler resolution `1/(N T)` in Hz.
    pub fn doppler_resolution(&self) -> f64 {
        self.delta_f / self.n as f64
    }

    /// Largest delay representable without wrap-around.
    pub fn max_delay(&self) -> f64 {
        1.0 / self.delta_f
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.qam_order.trailing_zeros() as usize
    }

    pub fn bits_per_frame(&self) -> usize {
        self.frame_len() * self.bits_per_symbol()
    }
}

/// An `M x N` delay-Doppler grid stored column-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DdGrid {
    m: usize,
    n: usize,
    data: Vec<C64>,
}

impl DdGrid {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            data: vec![C64::new(0.0, 0.0); m * n],
        }
    }

    pub fn from_vec(m: usize, n: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != m * n {
            return Err(Error::Dimension {
                what: "delay-Doppler grid",
                expected: m * n,
                got: data.len(),
            });
        }
        Ok(Self { m, n, data })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, l: usize, k: usize) -> C64 {
        self.data[l + self.m * k]
    }

    pub fn set(&mut self, l: usize, k: usize, v: C64) {
        self.data[l + self.m * k] = v;
    }

    /// Column-major vectorization.
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    pub fn add(&self, other: &DdGrid) -> Result<DdGrid> {
        if self.m != other.m || self.n != other.n {
            return Err(Error::Dimension {
                what: "grid addition",
                expected: self.m * self.n,
                got: other.m * other.n,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { m: self.m, n: self.n, data })
    }
}

/// Pilot placement. A single pilot of amplitude `sqrt(M N sigma_p_sq)` sits
/// at `(l_p, k_p)`, so `sigma_p_sq` is the pilot power averaged over the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PilotSpec {
    pub l_p: usize,
    pub k_p: usize,
    pub sigma_p_sq: f64,
}

impl Default for PilotSpec {
    fn default() -> Self {
        Self {
            l_p: 0,
            k_p: 0,
            sigma_p_sq: 1.0,
        }
    }
}

impl PilotSpec {
    pub fn grid(&self, cfg: &OtfsConfig) -> Result<DdGrid> {
        if self.l_p >= cfg.m || self.k_p >= cfg.n {
            return Err(Error::PilotOutOfRange {
                l_p: self.l_p,
                k_p: self.k_p,
                m: cfg.m,
                n: cfg.n,
            });
        }
        let mut g = DdGrid::zeros(cfg.m, cfg.n);
        let amp = (cfg.frame_len() as f64 * self.sigma_p_sq).sqrt();
        g.set(self.l_p, self.k_p, C64::new(amp, 0.0));
        Ok(g)
    }
}

impl PilotSpec {
    /// Position of the pilot cell in the vectorized grid.
    pub fn index(&self, cfg: &OtfsConfig) -> usize {
        self.l_p + cfg.m * self.k_p
    }

    /// Clears the pilot cell of a data grid so the pilot sits alone there.
    pub fn reserve(&self, data: &mut DdGrid) {
        data.set(self.l_p, self.k_p, C64::new(0.0, 0.0));
    }
}

/// Superimposes the pilot onto a data grid: `D = D_I + D_P`.
pub fn embed_pilot(data: &DdGrid, pilot: &PilotSpec, cfg: &OtfsConfig) -> Result<DdGrid> {
    data.add(&pilot.grid(cfg)?)
}

/// Reusable Doppler-axis transforms for one grid size.
///
/// `to_time` applies `F_N^H (x) I_M`, `to_dd` applies `F_N (x) I_M`, both with
/// unitary scaling.
#[derive(Clone)]
pub struct DopplerTransform {
    m: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for DopplerTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DopplerTransform")
            .field("m", &self.m)
            .field("n", &self.n)
            .finish()
    }
}

impl DopplerTransform {
    pub fn new(m: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            m,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn for_config(cfg: &OtfsConfig) -> Self {
        Self::new(cfg.m, cfg.n)
    }

    pub fn len(&self) -> usize {
        self.m * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.m * self.n == 0
    }

    fn run(&self, x: &[C64], fft: &Arc<dyn Fft<f64>>) -> Vec<C64> {
        let (m, n) = (self.m, self.n);
        // gather rows (fixed delay) into contiguous length-N chunks
        let mut buf = vec![C64::new(0.0, 0.0); m * n];
        for l in 0..m {
            for k in 0..n {
                buf[l * n + k] = x[l + m * k];
            }
        }
        fft.process(&mut buf);
        let scale = 1.0 / (n as f64).sqrt();
        let mut out = vec![C64::new(0.0, 0.0); m * n];
        for l in 0..m {
            for k in 0..n {
                out[l + m * k] = buf[l * n + k] * scale;
            }
        }
        out
    }

    /// Delay-Doppler vector to time samples (no cyclic prefix).
    pub fn to_time(&self, d: &[C64]) -> Vec<C64> {
        debug_assert_eq!(d.len(), self.len());
        self.run(d, &self.inv)
    }

    /// Time samples (no cyclic prefix) to delay-Doppler vector.
    pub fn to_dd(&self, r: &[C64]) -> Vec<C64> {
        debug_assert_eq!(r.len(), self.len());
        self.run(r, &self.fwd)
    }
}

fn check_grid(d: &DdGrid, cfg: &OtfsConfig) -> Result<()> {
    if d.m != cfg.m || d.n != cfg.n {
        return Err(Error::Dimension {
            what: "grid vs config",
            expected: cfg.m * cfg.n,
            got: d.m * d.n,
        });
    }
    Ok(())
}

pub(crate) fn add_cp(body: &[C64], cp_len: usize) -> Vec<C64> {
    let mut out = Vec::with_capacity(body.len() + cp_len);
    out.extend_from_slice(&body[body.len() - cp_len..]);
    out.extend_from_slice(body);
    out
}

/// Maps a delay-Doppler grid to a transmit sequence of length `M*N + cp_len`.
pub fn modulate(d: &DdGrid, cfg: &OtfsConfig) -> Result<Vec<C64>> {
    check_grid(d, cfg)?;
    let body = DopplerTransform::for_config(cfg).to_time(d.as_slice());
    Ok(add_cp(&body, cfg.cp_len))
}

/// Strips the cyclic prefix and maps received samples back to the grid.
pub fn demodulate(r: &[C64], cfg: &OtfsConfig) -> Result<DdGrid> {
    let mn = cfg.frame_len();
    if r.len() != mn + cfg.cp_len {
        return Err(Error::Dimension {
            what: "received sequence",
            expected: mn + cfg.cp_len,
            got: r.len(),
        });
    }
    let y = DopplerTransform::for_config(cfg).to_dd(&r[cfg.cp_len..]);
    DdGrid::from_vec(cfg.m, cfg.n, y)
}

/// Gray-coded square QAM with unit average symbol energy.
#[derive(Clone, Debug)]
pub struct Qam {
    order: usize,
    bits: usize,
    points: Vec<C64>,
}

impl Qam {
    pub fn new(order: usize) -> Result<Self> {
        if !matches!(order, 4 | 16 | 64) {
            return Err(Error::InvalidConfig(format!(
                "unsupported QAM order {order} (expected 4, 16 or 64)"
            )));
        }
        let bits = order.trailing_zeros() as usize;
        let side = 1usize << (bits / 2);
        let scale = (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        // PAM amplitude for a Gray-coded axis label
        let level = |label: usize| {
            let mut idx = label;
            let mut shift = 1;
            while shift < bits / 2 {
                idx ^= idx >> shift;
                shift <<= 1;
            }
            (2.0 * idx as f64 - (side as f64 - 1.0)) / scale
        };
        let half = bits / 2;
        let points = (0..order)
            .map(|sym| C64::new(level(sym >> half), level(sym & (side - 1))))
            .collect();
        Ok(Self { order, bits, points })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits
    }

    /// Constellation indexed by the integer value of its bit label (MSB first).
    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn map(&self, bits: &[u8]) -> Vec<C64> {
        bits.chunks(self.bits)
            .map(|chunk| {
                let idx = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | (b & 1) as usize);
                self.points[idx]
            })
            .collect()
    }

    /// Nearest constellation index; ties go to the smallest index.
    pub fn slice(&self, x: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn hard_symbol(&self, x: C64) -> C64 {
        self.points[self.slice(x)]
    }

    pub fn demap(&self, symbols: &[C64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(symbols.len() * self.bits);
        for &s in symbols {
            let idx = self.slice(s);
            for b in (0..self.bits).rev() {
                out.push(((idx >> b) & 1) as u8);
            }
        }
        out
    }
}

/// Maps `M*N*log2(Q)` bits onto a grid in column-major symbol order.
pub fn map_bits(bits: &[u8], cfg: &OtfsConfig) -> Result<DdGrid> {
    let qam = Qam::new(cfg.qam_order)?;
    let expected = cfg.bits_per_frame();
    if bits.len() != expected {
        return Err(Error::BitCount {
            expected,
            got: bits.len(),
        });
    }
    DdGrid::from_vec(cfg.m, cfg.n, qam.map(bits))
}

/// Hard-decision demapping of every grid element.
pub fn demap_grid(d: &DdGrid, cfg: &OtfsConfig) -> Result<Vec<u8>> {
    check_grid(d, cfg)?;
    Ok(Qam::new(cfg.qam_order)?.demap(d.as_slice()))
}

/// Projects every grid element onto the nearest constellation point.
pub fn hard_decision(d: &DdGrid, cfg: &OtfsConfig) -> Result<DdGrid> {
    check_grid(d, cfg)?;
    let qam = Qam::new(cfg.qam_order)?;
    let data = d.as_slice().iter().map(|&x| qam.hard_symbol(x)).collect();
    DdGrid::from_vec(cfg.m, cfg.n, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(m: usize, n: usize, cp: usize) -> OtfsConfig {
        OtfsConfig {
            m,
            n,
            cp_len: cp,
            ..OtfsConfig::default()
        }
    }

    #[test]
    fn unit_impulse_spreads_over_blocks() {
        let cfg = small(2, 2, 0);
        let mut d = DdGrid::zeros(2, 2);
        d.set(0, 0, C64::new(1.0, 0.0));
        let s = modulate(&d, &cfg).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let want = [h, 0.0, h, 0.0];
        for (a, b) in s.iter().zip(want) {
            assert!((a - C64::new(b, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn matches_dense_kronecker_definition() {
        let cfg = small(3, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<C64> = (0..12).map(|_| C64::new(rng.random(), rng.random())).collect();
        let s = modulate(&DdGrid::from_vec(3, 4, d.clone()).unwrap(), &cfg).unwrap();
        // S[l, n] = sum_k D[l, k] exp(+i 2 pi k n / N) / sqrt(N)
        for l in 0..3 {
            for nn in 0..4 {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..4 {
                    let ph = 2.0 * std::f64::consts::PI * (k * nn) as f64 / 4.0;
                    acc += d[l + 3 * k] * C64::from_polar(1.0, ph);
                }
                assert!((s[l + 3 * nn] - acc / 2.0).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn cp_copies_tail() {
        let cfg = small(4, 2, 3);
        let mut d = DdGrid::zeros(4, 2);
        d.set(1, 1, C64::new(0.5, -1.0));
        d.set(3, 0, C64::new(2.0, 0.0));
        let s = modulate(&d, &cfg).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(&s[..3], &s[8..]);
    }

    #[test]
    fn numerology_of_default() {
        let cfg = OtfsConfig::default();
        assert!((cfg.symbol_duration() * cfg.delta_f - 1.0).abs() < 1e-15);
        assert!((cfg.delay_resolution() - 1.0 / 61.44e6).abs() < 1e-20);
        assert!((cfg.doppler_resolution() - 15e3).abs() < 1e-9);
        assert_eq!(cfg.bits_per_frame(), 8192);
    }

    #[test]
    fn qam4_alphabet() {
        let q = Qam::new(4).unwrap();
        let h = 1.0 / 2f64.sqrt();
        for p in q.points() {
            assert!((p.re.abs() - h).abs() < 1e-15 && (p.im.abs() - h).abs() < 1e-15);
        }
        assert!((q.map(&[0, 0])[0] - C64::new(-h, -h)).norm() < 1e-15);
    }

    #[test]
    fn qam_unit_energy_and_gray_neighbors() {
        for order in [4usize, 16, 64] {
            let q = Qam::new(order).unwrap();
            let e: f64 = q.points().iter().map(|p| p.norm_sqr()).sum::<f64>() / order as f64;
            assert!((e - 1.0).abs() < 1e-12);
            let dmin = q.points()[..]
                .iter()
                .enumerate()
                .flat_map(|(i, a)| q.points()[i + 1..].iter().map(move |b| (a - b).norm()))
                .fold(f64::INFINITY, f64::min);
            // nearest neighbours differ in exactly one bit
            for (i, a) in q.points().iter().enumerate() {
                for (j, b) in q.points().iter().enumerate() {
                    if i != j && ((a - b).norm() - dmin).abs() < 1e-9 {
                        assert_eq!((i ^ j).count_ones(), 1, "order {order}: {i} vs {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn slicing_tie_picks_smallest_index() {
        let q = Qam::new(4).unwrap();
        assert_eq!(q.slice(C64::new(0.0, 0.0)), 0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small(4, 4, 0);
        assert!(matches!(map_bits(&[0; 5], &cfg), Err(Error::BitCount { .. })));
        let pilot = PilotSpec {
            l_p: 4,
            k_p: 0,
            sigma_p_sq: 1.0,
        };
        assert!(matches!(pilot.grid(&cfg), Err(Error::PilotOutOfRange { .. })));
        assert!(Qam::new(8).is_err());
        assert!(demodulate(&[C64::new(0.0, 0.0); 3], &cfg).is_err());
    }

    #[test]
    fn pilot_grid_power() {
        let cfg = small(8, 4, 0);
        let p = PilotSpec {
            l_p: 2,
            k_p: 3,
            sigma_p_sq: 4.0,
        };
        let g = p.grid(&cfg).unwrap();
        assert!((g.get(2, 3) - C64::new(128f64.sqrt(), 0.0)).norm() < 1e-12);
        let mean: f64 = g.as_slice().iter().map(|x| x.norm_sqr()).sum::<f64>() / 32.0;
        assert!((mean - 4.0).abs() < 1e-12);
        assert_eq!(g.as_slice().iter().filter(|x| x.norm() > 0.0).count(), 1);
        let mut data = DdGrid::zeros(8, 4);
        data.set(0, 0, C64::new(0.5, 0.5));
        let both = embed_pilot(&data, &p, &cfg).unwrap();
        assert_eq!(both.get(0, 0), C64::new(0.5, 0.5));
        assert!((both.get(2, 3) - g.get(2, 3)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(seed in any::<u64>(), m in 1usize..12, n in 1usize..9, cp in 0usize..4) {
            let cfg = small(m, n, cp.min(m * n));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<C64> = (0..m * n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
            let g = DdGrid::from_vec(m, n, d.clone()).unwrap();
            let s = modulate(&g, &cfg).unwrap();
            let body_e: f64 = s[cfg.cp_len..].iter().map(|x| x.norm_sqr()).sum();
            let d_e: f64 = d.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((body_e - d_e).abs() <= 1e-12 * d_e.max(1.0));
            let back = demodulate(&s, &cfg).unwrap();
            for (a, b) in back.as_slice().iter().zip(&d) {
                prop_assert!((a - b).norm() < 1e-12);
            }
        }

        #[test]
        fn bits_round_trip(seed in any::<u64>(), order_idx in 0usize..3) {
            let order = [4usize, 16, 64][order_idx];
            let cfg = OtfsConfig { m: 8, n: 4, qam_order: order, cp_len: 0, ..OtfsConfig::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<u8> = (0..cfg.bits_per_frame()).map(|_| rng.random_range(0..2)).collect();
            let g = map_bits(&bits, &cfg).unwrap();
            prop_assert_eq!(demap_grid(&g, &cfg).unwrap(), bits);
        }
    }
}
