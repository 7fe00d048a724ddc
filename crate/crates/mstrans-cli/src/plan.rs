//! `plan`: evaluate the scale allocator and print the per-layer table.

use anyhow::Result;
use clap::Args as ClapArgs;
use mstrans::attention::ScaleSpec;
use mstrans::config::ConfigDoc;
use mstrans::planner::{describe_plan, plan_key_values, plan_scales};
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Scale-preference knob: positive favors small scales in shallow layers.
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    layers: usize,
    /// Heads per layer.
    #[arg(long)]
    heads: usize,
    /// Comma-separated candidates, smallest first: widths or N/k ratios
    /// (e.g. `1,3,N/16,N/8,N/4`).
    #[arg(long)]
    scales: String,
    /// Resolve ratio scales against this sequence length.
    #[arg(long)]
    n: Option<usize>,
    /// Also print machine-readable `key = value` lines.
    #[arg(long)]
    kv: bool,
    /// Write the table and a run manifest into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let candidates = parse_scales(&args.scales)?;
    let plans = plan_scales(args.alpha, args.layers, args.heads, &candidates)?;
    let table = describe_plan(&plans, args.n)?;
    print!("{table}");
    let kv = plan_key_values(&plans);
    if args.kv {
        print!("{kv}");
    }
    if let Some(dir) = &args.out {
        crate::manifest::prepare_out_dir(dir)?;
        let mut doc = ConfigDoc::new();
        doc.set("plan", "alpha", &args.alpha.to_string());
        doc.set("plan", "layers", &args.layers.to_string());
        doc.set("plan", "heads", &args.heads.to_string());
        doc.set("plan", "scales", &args.scales);
        if let Some(n) = args.n {
            doc.set("plan", "n", &n.to_string());
        }
        let mut m = crate::manifest::ManifestBuilder::new("plan", "0".into(), doc);
        crate::manifest::write_artifact(&mut m, dir, "plan.txt", &table)?;
        crate::manifest::write_artifact(&mut m, dir, "plan.kv", &kv)?;
        m.finish(dir)?;
    }
    Ok(())
}

pub fn parse_scales(list: &str) -> Result<Vec<ScaleSpec>> {
    let candidates = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(ScaleSpec::parse)
        .collect::<mstrans::Result<Vec<_>>>()?;
    Ok(candidates)
}
