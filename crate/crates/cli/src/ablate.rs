use std::fs::{self, File};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use implicit_align::harness::{ablate, write_ablation_csv, GridSpec};

use crate::io::parse_list;
use crate::manifest::{Run, RunManifest};
use crate::train::{ConfigArgs, DataArgs, Resolved};

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// masking_sampling | refresh | samplers, or a path to a grid JSON file.
    #[arg(long, default_value = "masking_sampling")]
    pub grid: String,
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    #[arg(long, default_value = "5,20,100,500")]
    pub refresh_periods: String,
    #[arg(long, default_value = "random,source_balanced,aligned,aligned_oracle")]
    pub samplers: String,
    /// Output directory for manifest.json, grid.json and ablation.csv.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: AblateArgs) -> Result<()> {
    let Resolved { config, from_manifest } = a.config.resolve()?;
    let data = a.data.load(from_manifest.as_ref())?;
    config.validate_for(data.num_classes)?;
    let seeds: Vec<u64> = parse_list(&a.seeds)?;
    let grid = match a.grid.as_str() {
        "masking_sampling" => GridSpec::masking_sampling(config, seeds),
        "refresh" => GridSpec::refresh_periods(config, &parse_list::<usize>(&a.refresh_periods)?, seeds),
        "samplers" => {
            let names: Vec<String> = parse_list(&a.samplers)?;
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            GridSpec::samplers(config, &refs, seeds)
        }
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading grid {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing grid {path}"))?
        }
    };
    // resolve every cell up front so config errors surface before training
    for cell in &grid.cells {
        grid.config(cell, 0)?.validate_for(data.num_classes)?;
    }

    let mut m = RunManifest::new("ablate", grid.base.seed, data.num_classes);
    m.config = grid.base.to_flat();
    m.inputs = data.inputs.clone();
    m.details = serde_json::to_value(&grid)?;
    m.outputs.insert("grid".into(), a.out.join("grid.json"));
    m.outputs.insert("table".into(), a.out.join("ablation.csv"));
    let run = Run::start(&a.out, m)?;
    run.finish(|_| {
        fs::write(a.out.join("grid.json"), serde_json::to_string_pretty(&grid)? + "\n")?;
        let results = ablate(&grid, &data.view());
        write_ablation_csv(&results, File::create(a.out.join("ablation.csv"))?)?;
        for r in &results {
            let (mean, se) = r.per_class_summary();
            eprintln!("{}: per-class accuracy {mean:.4} ± {se:.4} ({} failed)", r.cell.name, r.failures.len());
            for f in &r.failures {
                eprintln!("  {f}");
            }
        }
        Ok(())
    })
}
