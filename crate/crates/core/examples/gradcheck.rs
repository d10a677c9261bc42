//! Runs the finite-difference gradient suite and prints one line per case.
//!
//! `cargo run --release --example gradcheck [filter]`

use melseg::gradcheck::{run_suite, TOLERANCE};

fn main() -> anyhow::Result<()> {
    let filter = std::env::args().nth(1);
    let mut failed = 0;
    for (name, result) in run_suite(filter.as_deref()) {
        let r = result?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{name:<18} {verdict:<4} max rel err {:.3e} over {} entries (analytic {:.6e}, numeric {:.6e})",
            r.max_rel_error, r.entries, r.analytic, r.numeric
        );
    }
    anyhow::ensure!(failed == 0, "{failed} case(s) above tolerance {TOLERANCE:e}");
    Ok(())
}
