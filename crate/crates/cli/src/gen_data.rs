use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde_json::json;

use implicit_align::data::{
    generate_domain_pair, make_profile, save_dataset, Layout, PairSpec, ProfileKind, ShiftSpec,
};

use crate::io::{parse_enum, parse_pair, save_labels};
use crate::manifest::{Run, RunManifest};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Rotation of the target latent plane, radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub rotation: f64,
    /// Target translation as `x,y`.
    #[arg(long, default_value = "0,0", allow_hyphen_values = true)]
    pub translation: String,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// ring | line
    #[arg(long, default_value = "ring")]
    pub layout: String,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// balanced | mild | extreme | rs_ut_source | rs_ut_target
    #[arg(long, default_value = "balanced")]
    pub source_profile: String,
    /// Profile parameter (mild: max/min ratio, extreme: Pareto alpha).
    #[arg(long)]
    pub source_param: Option<f64>,
    #[arg(long, default_value = "balanced")]
    pub target_profile: String,
    #[arg(long)]
    pub target_param: Option<f64>,
    /// Examples in the largest class.
    #[arg(long, default_value_t = 200)]
    pub max_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: GenDataArgs) -> Result<()> {
    if a.classes < 2 {
        bail!("--classes must be at least 2, got {}", a.classes);
    }
    let (tx, ty) = parse_pair(&a.translation)?;
    let layout: Layout = parse_enum(&a.layout, "layout")?;
    let shift = ShiftSpec {
        translation: [tx, ty],
        rotation: a.rotation,
        scale: a.scale,
    };
    let mut spec = PairSpec::new(a.classes, a.dim, shift);
    spec.layout = layout;
    if let Some(r) = a.radius {
        spec.radius = r;
    }
    if let Some(s) = a.sigma {
        spec.sigma = s;
    }
    let profile = |name: &str, param: Option<f64>| -> Result<_> {
        let kind: ProfileKind = name.parse().map_err(anyhow::Error::msg)?;
        Ok(make_profile(kind, a.classes, a.max_count, param.unwrap_or(kind.default_parameter()))?)
    };
    let sp = profile(&a.source_profile, a.source_param)?;
    let tp = profile(&a.target_profile, a.target_param)?;

    let mut m = RunManifest::new("gen-data", a.seed, a.classes);
    m.config = implicit_align::harness::flatten(&json!({ "spec": spec, "max_count": a.max_count }));
    let files = ["source.csv", "target.csv", "target_labels.csv"];
    for f in files {
        m.outputs.insert(f.trim_end_matches(".csv").into(), a.out.join(f));
    }
    let run = Run::start(&a.out, m)?;
    run.finish(|m| {
        let pair = generate_domain_pair(a.seed, &spec, &sp, &tp)?;
        save_dataset(&pair.source, &a.out.join(files[0]))?;
        save_dataset(&pair.target, &a.out.join(files[1]))?;
        save_labels(pair.target_labels.as_slice(), &a.out.join(files[2]))?;
        m.details = serde_json::to_value(&pair.manifest)?;
        Ok(())
    })
}
