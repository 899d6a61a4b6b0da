//! Gradient checks of every differentiable op against central differences.
//!
//! Usage: `cargo run --release --example gradient_check [seeds] [tol]`

use dcattn::autodiff::{grad_check, GradOp, GradientReport};
use dcattn::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse()).expect("seeds must be an integer");
    let tol: f64 = args.next().map_or(Ok(1e-4), |s| s.parse()).expect("tol must be a number");
    println!("{:<26} {:>12} {:>6}", "op", "max_rel_err", "pass");
    let mut csv = String::from(GradientReport::CSV_HEADER);
    csv.push('\n');
    for op in GradOp::ALL {
        let reports = (0..seeds).map(|s| grad_check(op, s, tol)).collect::<Result<Vec<_>>>()?;
        let worst = reports.iter().map(GradientReport::max_rel_err).fold(0.0, f64::max);
        println!("{:<26} {worst:>12.3e} {:>6}", op.name(), reports.iter().all(GradientReport::passed));
        for r in &reports {
            csv.push_str(&r.csv_rows());
        }
    }
    println!("\n{} csv rows", csv.lines().count() - 1);
    Ok(())
}
