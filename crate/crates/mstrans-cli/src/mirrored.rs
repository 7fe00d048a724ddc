//! `mirrored`: the mirrored-summation benchmark grid (models x K x seeds).

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use mstrans::config::ConfigDoc;
use mstrans::synthetic::{run_bench, trivial_mse, BenchConfig, BenchModel};
use mstrans::train::TrainConfig;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Config file; flags override its values. A previous run's
    /// manifest.txt is accepted and reproduces that run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence length.
    #[arg(long)]
    n: Option<usize>,
    /// Input vector dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated K values.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Comma-separated run seeds; claims are medians over them.
    #[arg(long)]
    seeds: Option<String>,
    /// `all` or a comma list of hier-s, deep-hier-s, flex, vanilla.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    /// Output directory for CSVs, metrics, and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Also persist the generated datasets.
    #[arg(long)]
    save_data: bool,
}

const MIRRORED_KEYS: &[&str] = &[
    "n", "d", "k_values", "train_size", "test_size", "seeds", "models", "hidden_dim", "head_dim",
];

fn schema() -> Vec<(&'static str, &'static [&'static str])> {
    vec![
        ("run", crate::manifest::RUN_KEYS),
        ("mirrored", MIRRORED_KEYS),
        ("train", TrainConfig::DOC_KEYS),
    ]
}

pub fn parse_models(list: &str) -> Result<Vec<BenchModel>> {
    if list == "all" {
        return Ok(BenchModel::ALL.to_vec());
    }
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| BenchModel::parse(s.trim()).map_err(Into::into))
        .collect()
}

fn parse_usize_list(list: &str, what: &str) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad {what} entry {s:?}")))
        .collect()
}

fn parse_u64_list(list: &str, what: &str) -> Result<Vec<u64>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad {what} entry {s:?}")))
        .collect()
}

/// Resolves file config and flag overrides into one `BenchConfig`.
pub fn resolve_config(args: &Args) -> Result<(BenchConfig, TrainConfig)> {
    let defaults = BenchConfig::default();
    let doc = match &args.config {
        Some(path) => {
            let doc = ConfigDoc::load(path)?;
            doc.validate(&schema())?;
            doc
        }
        None => ConfigDoc::new(),
    };
    let s = "mirrored";
    let mut cfg = BenchConfig {
        n: doc.get_usize(s, "n", defaults.n)?,
        d: doc.get_usize(s, "d", defaults.d)?,
        k_values: match doc.get(s, "k_values") {
            Some(v) => parse_usize_list(v, "K")?,
            None => defaults.k_values.clone(),
        },
        train_size: doc.get_usize(s, "train_size", defaults.train_size)?,
        test_size: doc.get_usize(s, "test_size", defaults.test_size)?,
        seeds: match doc.get(s, "seeds") {
            Some(v) => parse_u64_list(v, "seed")?,
            None => defaults.seeds.clone(),
        },
        models: match doc.get(s, "models") {
            Some(v) => parse_models(v)?,
            None => defaults.models.clone(),
        },
        hidden_dim: doc.get_usize(s, "hidden_dim", defaults.hidden_dim)?,
        head_dim: doc.get_usize(s, "head_dim", defaults.head_dim)?,
        epochs: defaults.epochs,
        batch_size: defaults.batch_size,
        lr: defaults.lr,
    };
    let tdefaults = TrainConfig {
        epochs: defaults.epochs,
        batch_size: defaults.batch_size,
        lr: defaults.lr,
        ..TrainConfig::default()
    };
    let mut tcfg = TrainConfig::from_doc(&doc, &tdefaults)?;

    // Flags override file values.
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.d {
        cfg.d = v;
    }
    if let Some(v) = &args.k {
        cfg.k_values = parse_usize_list(v, "K")?;
    }
    if let Some(v) = args.train_size {
        cfg.train_size = v;
    }
    if let Some(v) = args.test_size {
        cfg.test_size = v;
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = parse_u64_list(v, "seed")?;
    }
    if let Some(v) = &args.models {
        cfg.models = parse_models(v)?;
    }
    if let Some(v) = args.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        tcfg.lr = v;
    }
    if let Some(v) = args.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = args.head_dim {
        cfg.head_dim = v;
    }
    cfg.epochs = tcfg.epochs;
    cfg.batch_size = tcfg.batch_size;
    cfg.lr = tcfg.lr;
    cfg.validate()?;
    tcfg.validate()?;
    Ok((cfg, tcfg))
}

fn echo_config(cfg: &BenchConfig, tcfg: &TrainConfig) -> ConfigDoc {
    let mut doc = ConfigDoc::new();
    let s = "mirrored";
    doc.set(s, "n", &cfg.n.to_string());
    doc.set(s, "d", &cfg.d.to_string());
    let ks: Vec<String> = cfg.k_values.iter().map(|k| k.to_string()).collect();
    doc.set(s, "k_values", &ks.join(","));
    doc.set(s, "train_size", &cfg.train_size.to_string());
    doc.set(s, "test_size", &cfg.test_size.to_string());
    let seeds: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    doc.set(s, "seeds", &seeds.join(","));
    let models: Vec<&str> = cfg.models.iter().map(|m| m.name()).collect();
    doc.set(s, "models", &models.join(","));
    doc.set(s, "hidden_dim", &cfg.hidden_dim.to_string());
    doc.set(s, "head_dim", &cfg.head_dim.to_string());
    tcfg.to_doc(&mut doc);
    doc
}

pub fn run(args: Args) -> Result<()> {
    if let Some(path) = &args.config {
        if !path.exists() {
            bail!(mstrans::Error::Config(format!("config file not found: {}", path.display())));
        }
    }
    let (cfg, tcfg) = resolve_config(&args)?;
    crate::manifest::prepare_out_dir(&args.out)?;
    let seeds: Vec<String> = cfg.seeds.iter().map(|s| s.to_string()).collect();
    let mut m = crate::manifest::ManifestBuilder::new(
        "mirrored",
        seeds.join(","),
        echo_config(&cfg, &tcfg),
    );

    let mut metrics = String::new();
    println!("mirrored summation: n={} d={} train={} test={}", cfg.n, cfg.d, cfg.train_size, cfg.test_size);
    let result = run_bench(&cfg, |cell| {
        println!(
            "  {} K={} seed={}: test mse {:.4} (floor {:.4})",
            cell.model.name(),
            cell.k,
            cell.seed,
            cell.test_mse,
            trivial_mse(cell.k)
        );
        let _ = writeln!(
            metrics,
            "model={} k={} seed={} split=test metric=best_mse value={:.12}",
            cell.model.name(),
            cell.k,
            cell.seed,
            cell.test_mse
        );
        let _ = writeln!(
            metrics,
            "model={} k={} seed={} split=train metric=final_loss value={:.12}",
            cell.model.name(),
            cell.k,
            cell.seed,
            cell.final_train_loss
        );
    })?;

    if args.save_data {
        for &k in &cfg.k_values {
            for &seed in &cfg.seeds {
                let (train_seed, _) = mstrans::synthetic::bench_split_seeds(seed, k);
                let ds = mstrans::synthetic::gen_dataset(cfg.n, cfg.d, k, cfg.train_size, train_seed)?;
                let name = format!("train_k{k}_seed{seed}.msmir");
                let path = args.out.join(&name);
                ds.save(&path)?;
                m.add_output(&path);
            }
        }
    }

    print!("{}", median_table(&result, &cfg));
    crate::manifest::write_artifact(&mut m, &args.out, "results.csv", &result.csv(&cfg))?;
    crate::manifest::write_artifact(&mut m, &args.out, "details.csv", &result.detail_csv())?;
    crate::manifest::write_artifact(&mut m, &args.out, "metrics.txt", &metrics)?;
    let path = m.finish(&args.out)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn median_table(result: &mstrans::synthetic::BenchResult, cfg: &BenchConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:>12}  {:>10}  {:>10}", "K", "model", "median_mse", "floor");
    for &k in &cfg.k_values {
        for &model in &cfg.models {
            if let Some(mse) = result.median_mse(model, k) {
                let _ = writeln!(
                    out,
                    "{:>4}  {:>12}  {:>10.4}  {:>10.4}",
                    k,
                    model.name(),
                    mse,
                    trivial_mse(k)
                );
            }
        }
    }
    out
}
