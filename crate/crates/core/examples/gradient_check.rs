//! Central finite differences against the analytic gradients, per parameter group.
//!
//! cargo run --release --example gradient_check

use blade::trainer::TinyProbe;
use blade::FusionMode;

fn main() -> blade::Result<()> {
    for fusion in [FusionMode::Sum, FusionMode::Concat, FusionMode::Gate] {
        let report = TinyProbe::new(fusion, 3)?.check(1e-5, 20)?;
        println!("fusion = {fusion}");
        for g in &report.groups {
            println!("  {:<16} {:>3} coords  max rel err {:.2e}", g.group, g.coordinates, g.max_rel_error);
        }
        report.ensure_below(1e-4)?;
    }
    Ok(())
}
