use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::Args;

use implicit_align::checkpoint::load_model;
use implicit_align::harness::evaluate;
use implicit_align::nn::AdaptationModel;

use crate::io::{load, load_labels};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Label file for unlabeled data (e.g. target_labels.csv).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(a: EvalArgs) -> Result<()> {
    let model: AdaptationModel<f64> = load_model(&a.checkpoint)?;
    let arch = model.architecture();
    let ds = load(&a.data, arch.num_classes)?;
    if ds.dim() != arch.input_dim {
        return Err(anyhow!(
            "{} has {} features but the checkpoint expects {}",
            a.data.display(),
            ds.dim(),
            arch.input_dim
        ));
    }
    let labels = match &a.labels {
        Some(p) => {
            let l = load_labels(p)?;
            if l.len() != ds.len() {
                return Err(anyhow!("{} labels for {} rows", l.len(), ds.len()));
            }
            l.as_slice().to_vec()
        }
        None => ds
            .dense_labels()
            .ok_or_else(|| anyhow!("{} is unlabeled; pass --labels", a.data.display()))?,
    };
    if let Some(&y) = labels.iter().find(|&&y| y >= arch.num_classes) {
        return Err(anyhow!("label {y} outside the checkpoint's {} classes", arch.num_classes));
    }
    let report = evaluate(&model, ds.features(), &labels)?.ok_or_else(|| anyhow!("empty dataset"))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
