//! Runs every finite-difference gradient check in double precision.
//!
//! cargo run --release --example gradcheck_suite [case-name]

use ressenet::checks;

fn main() -> ressenet::Result<()> {
    let only = std::env::args().nth(1);
    let mut failed = 0;
    for case in checks::suite().filter(|c| only.as_deref().is_none_or(|n| n == c.name)) {
        let o = case.run(0)?;
        println!(
            "{:<28} {:.2e} (tol {:.0e}, {} coords, {} kinks skipped) {}",
            o.name,
            o.report.max_rel_error,
            o.tolerance,
            o.report.checked,
            o.report.skipped_kinks,
            if o.passed() { "ok" } else { "FAILED" }
        );
        failed += usize::from(!o.passed());
    }
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
