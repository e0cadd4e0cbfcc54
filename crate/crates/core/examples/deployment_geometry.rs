//! Compares the closed-form position-error covariance of random receiver
//! placements against the orthogonal layout, and shows the effect of adding
//! antennas per node.

use otfs_isac::deploy::{covariance_general, layout_score, nant_reduction, place_orthogonal_optimal, RangeVariances};
use otfs_isac::scenario::{generate_layout, LayoutMode};

fn main() -> otfs_isac::Result<()> {
    let side = 400.0;
    let var = RangeVariances::uniform(1.0);
    let ortho = covariance_general([0.0, 0.0], [side, 0.0], [0.0, side], var)?;
    println!("orthogonal layout: trace {:.3e}  max axis {:.3e}", ortho.trace, ortho.kappa_max);

    let mut worse = 0;
    for seed in 0..20 {
        let l = generate_layout(LayoutMode::Random, 2, 1, side, seed)?;
        let g = covariance_general(l.anchor, l.receivers[0], l.receivers[1], var)?;
        worse += (g.trace >= ortho.trace) as usize;
        if seed < 5 {
            println!(
                "random {seed}: R1 ({:>5.1}, {:>5.1}) R2 ({:>5.1}, {:>5.1})  trace {:.3e}",
                l.receivers[0][0], l.receivers[0][1], l.receivers[1][0], l.receivers[1][1], g.trace
            );
        }
    }
    println!("{worse}/20 random layouts are no better than the orthogonal one");

    for n_ant in 1..=4 {
        let r = nant_reduction(&ortho, n_ant);
        println!("{n_ant} antennas per node: trace {:.3e}", r.trace);
    }

    let layout = place_orthogonal_optimal(side, 2, 1)?;
    let (score, _) = layout_score(&layout, [150.0, 150.0], 1.2)?;
    println!("target at (150, 150), 1.2 m range error: position rmse {:.3} m", score.trace.sqrt());
    Ok(())
}
