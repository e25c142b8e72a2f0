//! Exact discounted values on a truncated chain: the tracking policy against
//! the preemptive optimum, which bounds every policy from below.

use std::sync::Arc;

use hwtrack::hjb::{solve_hjb, GridSpec, TrackingFunction};
use hwtrack::model::{ClassParams, Regime, ScaledSystem, SystemParams};
use hwtrack::oracle::{gap_from, optimal_value_exact, policy_value_exact};
use hwtrack::queue::{PolicySpec, QueueState};

fn main() -> hwtrack::Result<()> {
    let params = SystemParams::new(
        vec![
            ClassParams { a: 0.5, mu: 1.0, c: 1.0 },
            ClassParams { a: 0.5, mu: 2.0, c: 3.0 },
        ],
        1.0,
        1.0,
        0.25,
        1,
        Regime::NonPaper,
    )?;
    let sys = ScaledSystem::new(params, 8)?;
    let grid = GridSpec::for_system(&sys, 41)?;
    let tf = Arc::new(TrackingFunction::new(solve_hjb(&sys, &grid, None, 100)?));
    let cap = 30;

    let tracking = policy_value_exact(&sys, &PolicySpec::Tracking(tf), cap)?;
    let optimal = optimal_value_exact(&sys, cap)?;
    println!("tracking chain: {:?}", tracking.metadata());
    println!("optimal chain:  {:?}", optimal.metadata());

    println!("{:>8} {:>8} {:>12} {:>12} {:>10}", "X", "Q", "tracking", "optimal", "gap");
    for (x, q) in [([4, 4], [0, 0]), ([6, 4], [1, 1]), ([8, 6], [4, 2]), ([10, 10], [6, 6])] {
        let state = QueueState::from_counts(&sys, x.to_vec(), q.to_vec())?;
        let g = gap_from(&tracking, &optimal, &state)?;
        println!("{:>8?} {:>8?} {:>12.6} {:>12.6} {:>10.2e}", x, q, g.tracking, g.optimal, g.gap);
    }
    Ok(())
}
