//! Solve the Bellman equation for a two-class system and print a slice of the
//! tracking map (the class that should hold the queue) along the diagonal.

use hwtrack::hjb::{solve_hjb, GridSpec};
use hwtrack::model::{ClassParams, Regime, ScaledSystem, SystemParams};

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
    let sys = ScaledSystem::new(params, 32)?;
    let grid = GridSpec::for_system(&sys, 61)?;
    let sol = solve_hjb(&sys, &grid, None, 200)?;

    println!(
        "n = {}  radius = {:.3}  points = {}  iterations = {}  residual = {:.2e}",
        sys.n,
        grid.domain_radius(),
        grid.len(),
        sol.iterations,
        sol.residual_sup
    );
    println!("phi(0) = {:.6}", sol.value_at(&[0.0, 0.0]));

    let r = grid.domain_radius() / 2.0_f64.sqrt();
    println!("{:>8} {:>12} {:>6}", "x1=x2", "phi", "queue");
    for k in -4..=4 {
        let t = r * k as f64 / 4.5;
        let x = [t, t];
        let flat = grid.nearest(&x);
        println!("{:>8.3} {:>12.6} {:>6}", t, sol.value_at(&x), sol.policy[flat]);
    }

    let g = &sol.gradients;
    println!("gradient report: {g:?}");
    Ok(())
}
