//! Train the full model and each single-component removal on a small config.
//!
//! cargo run --release --example ablation_table

use blade::cli::ablation_rows;
use blade::config::RunConfig;
use blade::Ablation;

fn main() -> blade::Result<()> {
    let root = std::env::temp_dir().join("blade-ablation-example");
    std::env::set_var(blade::config::RUN_ROOT_ENV, &root);
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synth.users", "80"),
        ("synth.items", "150"),
        ("data.max_len", "15"),
        ("model.d", "16"),
        ("train.epochs", "5"),
        ("train.batch", "16"),
    ] {
        cfg.set(k, v)?;
    }
    let flags: Ablation = "no_ef,no_if,no_cl,no_brw".parse()?;
    println!("{:<10} {:>8} {:>8} {:>8}", "variant", "params", "HR@10", "NDCG@10");
    for row in ablation_rows(&cfg, flags)? {
        println!(
            "{:<10} {:>8} {:>8.4} {:>8.4}",
            row.variant,
            row.parameters,
            row.report.hr_at(10).unwrap_or(0.0),
            row.report.ndcg_at(10).unwrap_or(0.0)
        );
    }
    Ok(())
}
