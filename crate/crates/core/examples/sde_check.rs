//! Cross-check the Bellman value at the origin against Euler-Maruyama Monte
//! Carlo of the diffusion under the tracking control.

use hwtrack::hjb::{solve_hjb, GridSpec, TrackingFunction};
use hwtrack::model::{ClassParams, Regime, ScaledSystem, SystemParams};
use hwtrack::sde::{estimate_adcp_value, SdeConfig};

fn main() -> hwtrack::Result<()> {
    let params = SystemParams::new(vec![ClassParams { a: 1.0, mu: 1.0, c: 1.0 }], 1.0, 1.0, 1.0, 1, Regime::NonPaper)?;
    let sys = ScaledSystem::new(params, 25)?;
    let grid = GridSpec::for_system(&sys, 201)?;
    let tf = TrackingFunction::new(solve_hjb(&sys, &grid, None, 100)?);
    let phi0 = tf.solution.value_at(&[0.0]);

    let cfg = SdeConfig {
        dt: SdeConfig::default_dt(&sys),
        horizon: SdeConfig::horizon_for(&sys, 0.005)?,
        paths: 2000,
        seed: 5,
    };
    let est = estimate_adcp_value(&sys, &tf, &[0.0], &cfg)?;
    println!("phi(0)      = {phi0:.5}");
    println!("SDE estimate = {:.5} +- {:.5}  (dt {}, T {:.1}, {} paths)", est.mean, est.std_error, cfg.dt, cfg.horizon, cfg.paths);
    println!("difference in standard errors: {:.2}", (est.mean - phi0).abs() / est.std_error);
    Ok(())
}
