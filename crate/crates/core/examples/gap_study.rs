//! Run a small gap study from the bundled plan and print the report.
//!
//! `cargo run --release --example gap_study [plan.json] [out_dir]`

use hwtrack::harness::{run_pipeline, write_report, ExperimentPlan};

fn main() -> hwtrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let plan_path = args
        .next()
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/two_class_plan.json").into());
    let out = args.next().unwrap_or_else(|| "out/gap_study".into());

    let plan = ExperimentPlan::from_file(&plan_path)?;
    let report = run_pipeline(&plan, plan.seed.unwrap_or(0))?;
    println!("{:>6} {:>12} {:>12} {:>10} {:>10} {:>10}", "n", "tracking", "lower", "gap", "gap/sqrt", "psi");
    for r in &report.rows {
        println!(
            "{:>6} {:>12.5} {:>12.5} {:>10.4} {:>10.4} {:>10.4}  {}",
            r.n,
            r.tracking_cost,
            r.lower_bound,
            r.gap,
            r.gap_over_sqrt_n,
            r.psi_disc,
            r.flags.join(",")
        );
    }
    for f in &report.failures {
        println!("n = {} failed: {}", f.n, f.reason);
    }
    write_report(&report, &out)?;
    println!("report written to {out}");
    Ok(())
}
