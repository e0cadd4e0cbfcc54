//! Triangulates a target from noisy monostatic and bistatic ranges seen by
//! several antennas per node, then fuses the samples by plain averaging and
//! by nearest-neighbour filtering.

use otfs_isac::fusion::{fuse_samples, triangulate_all, FusionMethod, NodeLayout, RangeRate};
use otfs_isac::state::dist;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let layout = NodeLayout::new([0.0, 0.0], vec![[400.0, 0.0], [0.0, 400.0], [380.0, 390.0]], 2, 400.0);
    let target = [130.0, 210.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n_ant = layout.antennas_per_node;

    let rho0 = dist(layout.anchor, target);
    let anchor: Vec<RangeRate> = (0..n_ant)
        .map(|_| RangeRate {
            rho: rho0 + noise.sample(&mut rng),
            v: 0.0,
            clamped: false,
        })
        .collect();
    let receivers: Vec<Vec<Vec<RangeRate>>> = layout
        .receivers
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let rho = dist(r, target);
            let mut per_ant: Vec<f64> = (0..n_ant).map(|_| rho + noise.sample(&mut rng)).collect();
            // one antenna on the last receiver picks up a bad multipath range
            if i == 2 {
                per_ant[0] += 60.0;
            }
            anchor
                .iter()
                .map(|_| {
                    per_ant
                        .iter()
                        .map(|&rho| RangeRate {
                            rho,
                            v: 0.0,
                            clamped: false,
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let (samples, dropped) = triangulate_all(&layout, &anchor, &receivers);
    println!("{} triangulation samples ({dropped} dropped)", samples.len());
    for method in [
        FusionMethod::Average,
        FusionMethod::NearestNeighbor {
            xi_position: Some(5.0),
            xi_velocity: None,
        },
    ] {
        let f = fuse_samples(&samples, method, (5.0, 5.0)).unwrap();
        println!(
            "{:<16} position ({:.2}, {:.2})  error {:.2} m  from {} samples",
            match method {
                FusionMethod::Average => "average",
                FusionMethod::NearestNeighbor { .. } => "nearest neighbour",
            },
            f.position[0],
            f.position[1],
            dist(f.position, target),
            f.contributing
        );
    }
}
