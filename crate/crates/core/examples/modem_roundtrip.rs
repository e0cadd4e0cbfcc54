//! Maps random bits onto a 4-QAM delay-Doppler frame, modulates it to time
//! samples with a cyclic prefix and back, and checks nothing was lost.

use std::time::Instant;

use otfs_isac::modem::{demap_grid, demodulate, map_bits, modulate, OtfsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> otfs_isac::Result<()> {
    let cfg = OtfsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bits: Vec<u8> = (0..cfg.bits_per_frame()).map(|_| rng.random_range(0..2)).collect();

    let grid = map_bits(&bits, &cfg)?;
    let start = Instant::now();
    let s = modulate(&grid, &cfg)?;
    let back = demodulate(&s, &cfg)?;
    let elapsed = start.elapsed();

    let max_err = grid
        .as_slice()
        .iter()
        .zip(back.as_slice())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let rx = demap_grid(&back, &cfg)?;
    let bit_errors = rx.iter().zip(&bits).filter(|(a, b)| a != b).count();

    println!("frame          {} x {} ({} samples + {} CP)", cfg.m, cfg.n, cfg.frame_len(), cfg.cp_len);
    println!("delay bin      {:.2} ns", cfg.delay_resolution() * 1e9);
    println!("doppler bin    {:.1} kHz", cfg.doppler_resolution() / 1e3);
    println!("max |D - D'|   {max_err:.3e}");
    println!("bit errors     {bit_errors} / {}", bits.len());
    println!("round trip     {:.2} ms", elapsed.as_secs_f64() * 1e3);
    Ok(())
}
