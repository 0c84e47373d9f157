//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sequence, stream_seed, AugmentMethod};
use crate::checkpoint;
use crate::config::{parse_override, Precision, RunConfig};
use crate::data::{truncate_pad, Dataset, EvalCase};
use crate::encoder::{Blade, FusionMode};
use crate::error::{BladeError, Result};
use crate::eval::{evaluate_with_groups, MetricsReport};
use crate::tensor::Scalar;
use crate::trainer::{train, Ablation, TinyProbe, TrainData, TrainOutcome};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "blade", version, about = "Behavior-set sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (flat key=value file).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.d=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Training seed (same as `--set train.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the configured dataset, report its size and split, optionally write it back normalised.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the co-occurrence matrix and frequency vector of the training split.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the synthetic dataset described by the `synth.*` keys.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory for `interactions.tsv` and `behaviors.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented training behavior sequences in the ingestion schema.
    Augment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        method: Option<AugmentMethod>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        c: Option<f64>,
        /// Augmentation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write config.echo, train.log, checkpoint.blade, metrics.tsv and stats.tsv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint with full ranking.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `best` (the run directory's checkpoint) or a checkpoint path.
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long, default_value = "test", value_parser = ["train", "valid", "test"])]
        split: String,
        /// Comma-separated tail behavior names.
        #[arg(long = "tail-behaviors")]
        tail_behaviors: Option<String>,
        #[arg(long = "tail-threshold")]
        tail_threshold: Option<f64>,
    },
    /// Finite-difference check of every parameter group on a seeded tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long = "per-group", default_value_t = 20)]
        per_group: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the full model and one variant per removal flag, then compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated flags from no_ef, no_if, no_cl, no_brw.
        #[arg(long)]
        flags: String,
    },
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn is_usage(e: &BladeError) -> bool {
    matches!(e, BladeError::Config(_))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.sets.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(p) = &common.config {
        if !p.is_file() {
            return Err(BladeError::Config(format!("config file {} does not exist", p.display())));
        }
    }
    RunConfig::load(common.config.as_deref(), &overrides).map_err(|e| match e {
        BladeError::Config(_) => e,
        other => BladeError::Config(other.to_string()),
    })
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { common, out } => ingest(&load_config(&common)?, out.as_deref()),
        Command::Stats { common } => stats(&load_config(&common)?),
        Command::Synth { common, out } => synth(&load_config(&common)?, &out),
        Command::Augment {
            config,
            sets,
            method,
            rho,
            c,
            seed,
            out,
        } => {
            let mut cfg = load_config(&Common { config, sets, seed: None })?;
            if let Some(m) = method {
                cfg.augment.method = m;
            }
            if let Some(r) = rho {
                cfg.augment.rho = r;
            }
            if let Some(c) = c {
                cfg.augment.c = c;
            }
            if let Some(s) = seed {
                cfg.augment.seed = s;
            }
            cfg.validate()?;
            augment(&cfg, &out)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let dir = cfg.run_dir();
            let report = train_run(&cfg, &dir)?;
            print!("{}", report.to_tsv());
            println!("run directory: {}", dir.display());
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            tail_behaviors,
            tail_threshold,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = tail_behaviors {
                cfg.set("eval.tail_behaviors", &t)?;
            }
            if let Some(t) = tail_threshold {
                cfg.eval.tail_threshold = t;
            }
            cfg.validate()?;
            eval(&cfg, &checkpoint, &split)
        }
        Command::Gradcheck {
            epsilon,
            per_group,
            tolerance,
            seed,
        } => gradcheck(epsilon, per_group, tolerance, seed),
        Command::Ablate { common, flags } => {
            let cfg = load_config(&common)?;
            let flags: Ablation = flags.parse().map_err(|e: BladeError| BladeError::Config(e.to_string()))?;
            print!("{}", ablate(&cfg, flags)?);
            Ok(())
        }
    }
}

fn ingest(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let data = TrainData::new(&ds);
    println!("users\t{}", ds.num_users());
    println!("items\t{}", ds.num_items() - 1);
    println!("interactions\t{}", ds.num_interactions());
    println!("behaviors\t{}", ds.behaviors.names().join(","));
    println!("train_sequences\t{}", data.split.train.len());
    println!("valid_targets\t{}", data.split.valid.len());
    println!("test_targets\t{}", data.split.test.len());
    if let Some(p) = out {
        ds.write_tsv(p)?;
    }
    Ok(())
}

fn stats(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let data = TrainData::new(&ds);
    let tsv = data.stats.to_tsv(ds.behaviors.names());
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("stats.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = crate::data::generate_synthetic(&cfg.synth, cfg.synth_seed)?;
    fs::create_dir_all(out)?;
    ds.write_tsv(&out.join("interactions.tsv"))?;
    ds.write_vocab(&out.join("behaviors.txt"))?;
    println!(
        "wrote {} interactions for {} users to {}",
        ds.num_interactions(),
        ds.num_users(),
        out.display()
    );
    Ok(())
}

/// Augmented behavior sequences of the training split as TSV rows.
pub fn augmented_tsv(ds: &Dataset, cfg: &RunConfig) -> Result<String> {
    let data = TrainData::new(ds);
    let mut out = String::new();
    for t in &data.split.train {
        let seq = truncate_pad(t.user, &t.events, t.events.len());
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.augment.seed, t.user, 0, 1));
        let aug = augment_sequence(&seq, &cfg.augment, &data.stats, data.aux_index, &mut rng);
        for (pos, (item, b)) in aug.items.iter().zip(&aug.behaviors).enumerate() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                ds.users[t.user],
                ds.items[*item],
                pos,
                ds.behaviors.format_set(*b)
            )
            .expect("string write");
        }
    }
    Ok(out)
}

fn augment(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    fs::write(out, augmented_tsv(&ds, cfg)?)?;
    println!("wrote augmented training sequences to {}", out.display());
    Ok(())
}

fn split_cases(data: &TrainData, split: &str) -> Vec<EvalCase> {
    match split {
        "train" => data.split.train_cases(),
        "valid" => data.split.valid.clone(),
        _ => data.split.test.clone(),
    }
}

fn report_for<T: Scalar>(model: &Blade<T>, cfg: &RunConfig, ds: &Dataset, cases: &[EvalCase]) -> Result<MetricsReport> {
    let tail = cfg.tail_set(&ds.behaviors)?;
    evaluate_with_groups(
        model,
        cases,
        ds.behaviors.aux_index(),
        &cfg.eval.options,
        tail,
        cfg.eval.tail_threshold,
        cfg.eval.tail_counting,
    )
}

fn write_run<T: Scalar>(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome<T>, data: &TrainData, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    let mut log = fs::File::create(dir.join("train.log"))?;
    for r in &outcome.log {
        writeln!(log, "{}", r.to_json_line())?;
    }
    checkpoint::save(&outcome.best, &dir.join("checkpoint.blade"))?;
    fs::write(dir.join("stats.tsv"), data.stats.to_tsv(ds.behaviors.names()))?;
    Ok(())
}

/// Train under `cfg`, write the run directory and return test metrics of the
/// best checkpoint.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<MetricsReport> {
    let ds = cfg.load_dataset()?;
    let data = TrainData::new(&ds);
    let report = match cfg.precision {
        Precision::F32 => {
            let out = train::<f32>(&data, &cfg.model, &cfg.loss, &cfg.augment, &cfg.train)?;
            write_run(dir, cfg, &out, &data, &ds)?;
            test_report(&out.best, cfg, &ds, &data)?
        }
        Precision::F64 => {
            let out = train::<f64>(&data, &cfg.model, &cfg.loss, &cfg.augment, &cfg.train)?;
            write_run(dir, cfg, &out, &data, &ds)?;
            test_report(&out.best, cfg, &ds, &data)?
        }
    };
    if let Some(r) = &report {
        fs::write(dir.join("metrics.tsv"), r.to_tsv())?;
        Ok(r.clone())
    } else {
        Err(BladeError::EmptySplit)
    }
}

fn test_report<T: Scalar>(model: &Blade<T>, cfg: &RunConfig, ds: &Dataset, data: &TrainData) -> Result<Option<MetricsReport>> {
    if data.split.test.is_empty() {
        return Ok(None);
    }
    report_for(model, cfg, ds, &data.split.test).map(Some)
}

fn eval(cfg: &RunConfig, which: &str, split: &str) -> Result<()> {
    let (path, in_run) = if which == "best" {
        (cfg.run_dir().join("checkpoint.blade"), true)
    } else {
        (PathBuf::from(which), false)
    };
    if !path.is_file() {
        return Err(BladeError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ds = cfg.load_dataset()?;
    let data = TrainData::new(&ds);
    let cases = split_cases(&data, split);
    let report = match cfg.precision {
        Precision::F32 => report_for(&checkpoint::load::<f32>(&path)?, cfg, &ds, &cases)?,
        Precision::F64 => report_for(&checkpoint::load::<f64>(&path)?, cfg, &ds, &cases)?,
    };
    if in_run {
        fs::write(cfg.run_dir().join("metrics.tsv"), report.to_tsv())?;
    }
    print!("{}", report.to_tsv());
    println!();
    print!("{}", report.to_key_values());
    Ok(())
}

fn gradcheck(epsilon: f64, per_group: usize, tolerance: f64, seed: u64) -> Result<()> {
    let mut worst: Option<BladeError> = None;
    println!("fusion\tgroup\tcoordinates\tmax_rel_error");
    for fusion in [FusionMode::Sum, FusionMode::Concat, FusionMode::Gate] {
        let report = TinyProbe::new(fusion, seed)?.check(epsilon, per_group)?;
        for g in &report.groups {
            println!("{fusion}\t{}\t{}\t{:.3e}", g.group, g.coordinates, g.max_rel_error);
        }
        if let Err(e) = report.ensure_below(tolerance) {
            worst.get_or_insert(e);
        }
    }
    match worst {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// One row of an ablation comparison.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub report: MetricsReport,
}

/// Train the full model and one variant per set flag.
pub fn ablation_rows(cfg: &RunConfig, flags: Ablation) -> Result<Vec<AblationRow>> {
    let mut variants = vec![("BLADE".to_string(), cfg.train.ablation)];
    for name in flags.names() {
        let mut a = cfg.train.ablation;
        let one: Ablation = name.parse()?;
        a.no_ef |= one.no_ef;
        a.no_if |= one.no_if;
        a.no_cl |= one.no_cl;
        a.no_brw |= one.no_brw;
        variants.push((format!("w/o {}", name.trim_start_matches("no_").to_uppercase()), a));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, ablation) in variants {
        let mut c = cfg.clone();
        c.train.ablation = ablation;
        let dir = c.run_dir();
        let report = train_run(&c, &dir)?;
        let ck = checkpoint::load::<f32>(&dir.join("checkpoint.blade"))?;
        rows.push(AblationRow {
            variant,
            parameters: ck.parameter_count(),
            report,
        });
    }
    Ok(rows)
}

fn ablate(cfg: &RunConfig, flags: Ablation) -> Result<String> {
    let rows = ablation_rows(cfg, flags)?;
    let ks = &cfg.eval.options.ks;
    let mut out = String::from("variant\tparameters");
    for k in ks {
        write!(out, "\tHR@{k}\tNDCG@{k}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{}\t{}", r.variant, r.parameters).unwrap();
        for i in 0..ks.len() {
            write!(out, "\t{:.4}\t{:.4}", r.report.hr[i], r.report.ndcg[i]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
