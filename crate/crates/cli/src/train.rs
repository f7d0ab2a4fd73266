use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde_json::{json, Value};

use implicit_align::checkpoint::save_model;
use implicit_align::data::{Dataset, HiddenLabels};
use implicit_align::harness::presets::ablation_config;
use implicit_align::harness::{train_with, MetricsRecord, TrainConfig, TrainData};
use implicit_align::objectives::TransferKind;

use crate::io::{infer_classes, load, load_labels, parse_assignment};
use crate::manifest::{InputFile, Run, RunManifest};

/// Dataset flags shared by train and ablate. Paths default to those of a
/// manifest passed as `--config`.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Hidden target labels, used for metrics and the oracle sampler only.
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
    /// Number of classes; inferred from the source labels when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
}

/// Config flags shared by train and ablate; flags override the config file.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat dotted-key JSON config, or a run manifest to reproduce.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base config when no file is given: default | desk
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// random | source_balanced | aligned | aligned_oracle
    #[arg(long)]
    pub sampler: Option<String>,
    /// dann | mdd | explicit_prototype
    #[arg(long)]
    pub objective: Option<String>,
    /// Classifier mask of the MDD objective: on | off
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Examples per class and domain (K).
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Classes per batch (N).
    #[arg(long)]
    pub classes_per_batch: Option<usize>,
    #[arg(long)]
    pub refresh_period: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub eval_period: Option<usize>,
    /// Any config key, e.g. `--set model.hidden=[64,64]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Config plus the manifest it came from, if any.
pub struct Resolved {
    pub config: TrainConfig,
    pub from_manifest: Option<RunManifest>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<Resolved> {
        let (base, from_manifest) = match &self.config {
            Some(path) => read_config(path)?,
            None => (
                match self.preset.as_str() {
                    "default" => TrainConfig::default(),
                    "desk" => ablation_config(),
                    p => bail!("unknown preset {p:?}"),
                },
                None,
            ),
        };
        let o = self.overrides(&base)?;
        let config = base.with_overrides(&o)?;
        config.validate()?;
        Ok(Resolved { config, from_manifest })
    }

    fn overrides(&self, base: &TrainConfig) -> Result<BTreeMap<String, Value>> {
        let mut o = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            o.insert(k.to_string(), v);
        };
        if let Some(v) = self.seed {
            put("seed", json!(v));
        }
        if let Some(v) = self.steps {
            put("steps", json!(v));
        }
        if let Some(v) = &self.sampler {
            put("sampler", json!(v));
        }
        if let Some(v) = self.eta {
            put("objective.eta", json!(v));
        }
        if let Some(v) = self.gamma {
            put("objective.gamma", json!(v));
        }
        if let Some(v) = self.lr {
            put("sgd.learning_rate", json!(v));
        }
        if let Some(v) = self.per_class {
            put("per_class", json!(v));
        }
        if let Some(v) = self.classes_per_batch {
            put("classes_per_batch", json!(v));
        }
        if let Some(v) = self.refresh_period {
            put("refresh_period", json!(v));
        }
        if let Some(v) = self.warmup_steps {
            put("warmup_steps", json!(v));
        }
        if let Some(v) = self.eval_period {
            put("eval_period", json!(v));
        }
        if let Some(kind) = objective_kind(self.objective.as_deref(), self.mask.as_deref(), &base.objective.kind)? {
            put("objective.kind", json!(kind));
        }
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            put(&k, v);
        }
        Ok(o)
    }
}

/// Objective kind name from `--objective` and `--mask`; `None` keeps the base.
fn objective_kind(objective: Option<&str>, mask: Option<&str>, base: &TransferKind) -> Result<Option<String>> {
    let mask = match mask {
        None => None,
        Some("on") => Some(true),
        Some("off") => Some(false),
        Some(m) => bail!("--mask takes on or off, got {m:?}"),
    };
    let name = match objective {
        Some(o) => o.to_string(),
        None if mask.is_some() => match base {
            TransferKind::Mdd | TransferKind::MddMasked => "mdd".into(),
            _ => bail!("--mask applies to the mdd objective only"),
        },
        None => return Ok(None),
    };
    Ok(Some(match (name.as_str(), mask) {
        ("mdd", Some(true)) => "mdd_masked".into(),
        ("mdd", _) => "mdd".into(),
        ("mdd_masked", Some(false)) => "mdd".into(),
        (_, Some(true)) => bail!("--mask on applies to the mdd objective only"),
        (o, _) => o.to_string(),
    }))
}

/// Reads a flat config file or a run manifest.
fn read_config(path: &Path) -> Result<(TrainConfig, Option<RunManifest>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if v.get("tool").is_some() && v.get("config").is_some() {
        let m: RunManifest = serde_json::from_value(v)?;
        let cfg = TrainConfig::from_flat(&m.config)?;
        return Ok((cfg, Some(m)));
    }
    let flat = implicit_align::harness::flatten(&v);
    Ok((TrainConfig::from_flat(&flat)?, None))
}

pub struct LoadedData {
    pub source: Dataset,
    pub target: Dataset,
    pub target_labels: Option<HiddenLabels>,
    pub num_classes: usize,
    pub inputs: BTreeMap<String, InputFile>,
}

impl LoadedData {
    pub fn view(&self) -> TrainData<'_> {
        TrainData {
            source: &self.source,
            target: &self.target,
            target_labels: self.target_labels.as_ref(),
        }
    }
}

impl DataArgs {
    /// Loads the datasets, taking missing paths from the manifest and checking
    /// that manifest inputs are unchanged.
    pub fn load(&self, manifest: Option<&RunManifest>) -> Result<LoadedData> {
        let pick = |flag: &Option<PathBuf>, role: &str| -> Result<Option<PathBuf>> {
            match (flag, manifest.and_then(|m| m.input(role))) {
                (Some(p), _) => Ok(Some(p.clone())),
                (None, Some(f)) => {
                    f.verify()?;
                    Ok(Some(f.path.clone()))
                }
                (None, None) => Ok(None),
            }
        };
        let source = pick(&self.source, "source")?.ok_or_else(|| anyhow!("--source is required"))?;
        let target = pick(&self.target, "target")?.ok_or_else(|| anyhow!("--target is required"))?;
        let labels = pick(&self.target_labels, "target_labels")?;
        let num_classes = match (self.classes, manifest) {
            (Some(c), _) => c,
            (None, Some(m)) => m.num_classes,
            (None, None) => infer_classes(&source)?,
        };
        let mut inputs = BTreeMap::new();
        inputs.insert("source".to_string(), InputFile::hash(&source)?);
        inputs.insert("target".to_string(), InputFile::hash(&target)?);
        if let Some(l) = &labels {
            inputs.insert("target_labels".to_string(), InputFile::hash(l)?);
        }
        let target_ds = load(&target, num_classes)?;
        let target_labels = labels.as_deref().map(load_labels).transpose()?;
        Ok(LoadedData {
            source: load(&source, num_classes)?,
            // training never reads target labels from the target file
            target: target_ds.without_labels(),
            target_labels,
            num_classes,
            inputs,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for manifest.json, metrics.jsonl, summary.csv and
    /// checkpoint.json.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(a: TrainArgs) -> Result<()> {
    let Resolved { config, from_manifest } = a.config.resolve()?;
    let data = a.data.load(from_manifest.as_ref())?;
    config.validate_for(data.num_classes)?;

    let mut m = RunManifest::new("train", config.seed, data.num_classes);
    m.config = config.to_flat();
    m.inputs = data.inputs.clone();
    for (role, file) in [
        ("metrics", "metrics.jsonl"),
        ("summary", "summary.csv"),
        ("checkpoint", "checkpoint.json"),
    ] {
        m.outputs.insert(role.into(), a.out.join(file));
    }
    let run = Run::start(&a.out, m)?;
    run.finish(|_| {
        let metrics_path = a.out.join("metrics.jsonl");
        let mut w = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
        let out = train_with::<f64>(&config, &data.view(), |rec| {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")
        })?;
        w.flush()?;
        let last = out.log.last().ok_or_else(|| anyhow!("training produced no metrics"))?;
        write_summary(last, &a.out.join("summary.csv"))?;
        save_model(&out.model, &a.out.join("checkpoint.json"))?;
        Ok(())
    })
}

/// Scalar fields of the final record as a two-row CSV.
fn write_summary(rec: &MetricsRecord, path: &Path) -> Result<()> {
    let v = serde_json::to_value(rec)?;
    let obj = v.as_object().expect("record is an object");
    let keys: Vec<&String> = obj.keys().collect();
    let cell = |x: &Value| match x {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let header = keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",");
    let row = keys.iter().map(|k| cell(&obj[*k])).collect::<Vec<_>>().join(",");
    fs::write(path, format!("{header}\n{row}\n")).with_context(|| format!("writing {}", path.display()))
}
