//! Verify every differentiable primitive against central finite differences.
//!
//!     cargo run --release --example gradient_check

use metapattern::gradcheck;
use metapattern::Result;

fn main() -> Result<()> {
    let results = gradcheck::run_suite(10, 0)?;
    for r in &results {
        println!(
            "{:<24} coords {:>5}  max rel err {:.3e}  {}",
            r.name,
            r.coords_checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    assert!(results.iter().all(|r| r.passed()));
    println!("all primitives agree with finite differences");
    Ok(())
}
