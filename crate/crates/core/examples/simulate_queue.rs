//! Compare the tracking policy with static priorities and random dispatch on
//! the same queue, from the same start state and seed.

use hwtrack::hjb::{solve_hjb, GridSpec, TrackingFunction};
use hwtrack::model::{ClassParams, Regime, ScaledSystem, SystemParams};
use hwtrack::queue::{default_horizon, estimate_cost, initial_state, InitMode, PolicySpec};

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
    let sys = ScaledSystem::new(params, 16)?;
    let grid = GridSpec::for_system(&sys, 41)?;
    let tf = TrackingFunction::new(solve_hjb(&sys, &grid, None, 100)?);

    let init = initial_state(&sys, 1.0, &InitMode::Offset(vec![3.0, 2.0]))?;
    let horizon = default_horizon(sys.gamma(), 1.0, 1e-5);
    let policies = [
        PolicySpec::tracking(tf),
        PolicySpec::static_priority(vec![1, 0])?,
        PolicySpec::static_priority(vec![0, 1])?,
        PolicySpec::ProportionalRandom,
    ];
    println!("start X = {:?}, Q = {:?}, horizon = {horizon:.2}", init.x, init.q);
    for p in &policies {
        let est = estimate_cost(&sys, p, &init, horizon, 4000, 11)?;
        println!("{:<20} {:>10.5} +- {:.5}", p.name(), est.mean, est.std_error);
    }
    Ok(())
}
