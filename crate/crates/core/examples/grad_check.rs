//! Runs the gradient oracle suite: finite differences on built-in ops,
//! the learnable-bit chain and the straight-through estimator.

use amaq::harness::oracles::run_oracle_suite;

fn main() -> amaq::Result<()> {
    let checks = run_oracle_suite(0)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!(
            "{:<12} {:<32} {:>10.2e} <= {:.0e}  {status}",
            c.suite, c.name, c.error, c.tolerance
        );
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
