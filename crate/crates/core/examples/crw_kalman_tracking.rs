//! Tracks a vehicle from noisy position and velocity measurements with the
//! correlated-random-walk Kalman filter, and compares against the raw
//! measurements.

use nalgebra::{Matrix4, Vector4};
use otfs_isac::scenario::{generate_trajectory, TrajectoryConfig};
use otfs_isac::tracker::{kf_update, process_noise, CrwParams, KfState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> otfs_isac::Result<()> {
    let traj_cfg = TrajectoryConfig {
        n_steps: 60,
        ..TrajectoryConfig::default()
    };
    // fit the motion model to sample tracks from the same generator
    let tracks: Vec<_> = (0..200)
        .map(|s| generate_trajectory(&traj_cfg, 1000 + s).map(|t| t.velocities))
        .collect::<otfs_isac::Result<_>>()?;
    let model = CrwParams::fit(&tracks, traj_cfg.dt)?;
    println!("fitted model: delta {:.3} 1/s  psi {:.3}", model.delta, model.psi);

    let truth = generate_trajectory(&traj_cfg, 5)?;
    let (sp, sv) = (3.0, 4.0);
    let r = Matrix4::from_diagonal(&Vector4::new(sp * sp, sp * sp, sv * sv, sv * sv));
    let q = process_noise(&model, false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut measure = |t: usize| {
        let s = truth.state(t).to_vector();
        Vector4::new(
            s[0] + sp * n.sample(&mut rng),
            s[1] + sp * n.sample(&mut rng),
            s[2] + sv * n.sample(&mut rng),
            s[3] + sv * n.sample(&mut rng),
        )
    };

    let z0 = measure(0);
    let mut kf = KfState::init(z0, r * 10.0, &model);
    let (mut raw_sq, mut kf_sq) = (0.0, 0.0);
    for t in 1..truth.len() {
        let z = measure(t);
        kf = kf_update(&kf, &z, &q, &r)?;
        let p = truth.positions[t];
        raw_sq += (z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2);
        kf_sq += (kf.s[0] - p[0]).powi(2) + (kf.s[1] - p[1]).powi(2);
    }
    let steps = (truth.len() - 1) as f64;
    println!("position rmse raw {:.3} m, filtered {:.3} m", (raw_sq / steps).sqrt(), (kf_sq / steps).sqrt());
    Ok(())
}
