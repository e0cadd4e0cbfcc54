//! Passive receiver: only the pilot is known. Paths are first estimated from
//! the pilot, then the loop alternates data detection and re-estimation
//! against the detected frame.

use otfs_isac::channel::{apply_channel, received_power, ChannelRealization, PathParams};
use otfs_isac::estimator::{passive_outer_loop, ActiveEstimator, OuterLoopParams, SearchGrid};
use otfs_isac::modem::{demap_grid, demodulate, embed_pilot, map_bits, modulate, OtfsConfig, PilotSpec, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> otfs_isac::Result<()> {
    let cfg = OtfsConfig::default();
    let pilot = PilotSpec::default();
    let est = ActiveEstimator::new(&cfg, SearchGrid::new(&cfg, 1)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    for snr_db in [20.0, 10.0, 0.0] {
        let bits: Vec<u8> = (0..cfg.bits_per_frame()).map(|_| rng.random_range(0..2)).collect();
        let mut data = map_bits(&bits, &cfg)?;
        pilot.reserve(&mut data);
        let s = modulate(&embed_pilot(&data, &pilot, &cfg)?, &cfg)?;
        let paths = vec![PathParams::on_grid(C64::from_polar(1.0, 0.7), 90, 1, &cfg)];
        let nv = received_power(&s, &paths, &cfg) / 10f64.powf(snr_db / 10.0);
        let ch = ChannelRealization {
            paths,
            receiver_id: 1,
            noise_var: nv,
        };
        let y = demodulate(&apply_channel(&s, &ch, &cfg, 17)?, &cfg)?;

        let out = passive_outer_loop(y.as_slice(), &pilot, 1, &est, &OuterLoopParams::default())?;
        let rx = demap_grid(&out.data_hat, &cfg)?;
        let skip = pilot.index(&cfg);
        let bps = cfg.bits_per_symbol();
        let (mut errors, mut total) = (0, 0);
        for (i, (a, b)) in rx.iter().zip(&bits).enumerate() {
            if i / bps != skip {
                errors += (a != b) as usize;
                total += 1;
            }
        }
        let p = &out.paths[0];
        println!(
            "SNR {snr_db:>4} dB  path ({}, {:+}) |h| {:.3}  outer iterations {}  BER {:.4}",
            p.l_idx,
            p.kappa,
            p.h_hat.norm(),
            out.iterations,
            errors as f64 / total as f64
        );
    }
    Ok(())
}
