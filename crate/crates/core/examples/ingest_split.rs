//! Write a synthetic log to TSV, read it back and split it leave-one-out.
//!
//! cargo run --example ingest_split

use blade::data::{generate_synthetic, leave_one_out_split, load_dataset, BehaviorVocab, SynthConfig};

fn main() -> blade::Result<()> {
    let cfg = SynthConfig {
        users: 40,
        items: 120,
        ..Default::default()
    };
    let ds = generate_synthetic(&cfg, 11)?;
    let dir = std::env::temp_dir().join("blade-ingest-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("interactions.tsv");
    ds.write_tsv(&path)?;

    let vocab = BehaviorVocab::with_aux_name(cfg.behavior_names.clone(), "click")?;
    let loaded = load_dataset(&path, &vocab)?;
    assert_eq!(loaded.num_interactions(), ds.num_interactions());
    println!(
        "{} users, {} items, {} interactions from {}",
        loaded.num_users(),
        loaded.num_items(),
        loaded.num_interactions(),
        path.display()
    );

    let split = leave_one_out_split(&loaded);
    println!("train sequences {}, valid {}, test {}", split.train.len(), split.valid.len(), split.test.len());
    let case = &split.test[0];
    let fmt: Vec<String> = case
        .history
        .iter()
        .rev()
        .take(4)
        .rev()
        .map(|e| format!("{}:{}", e.item, vocab.format_set(e.behaviors)))
        .collect();
    println!(
        "user {} ... {} -> target {}:{}",
        case.user,
        fmt.join(" "),
        case.target.item,
        vocab.format_set(case.target.behaviors)
    );
    Ok(())
}
