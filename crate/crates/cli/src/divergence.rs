use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use implicit_align::data::ClassIndex;
use implicit_align::divergence::{empirical_divergence, DivergenceReport, HypothesisClass, LabeledBatchPair};
use implicit_align::rng::{substream, Stream};
use implicit_align::sampler::{build_aligned_minibatch, random_minibatch, AlignmentDistribution};

use crate::io::{infer_classes, load, load_labels};
use crate::manifest::{InputFile, Run, RunManifest};

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub target_labels: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    /// random | aligned_oracle
    #[arg(long, default_value = "random")]
    pub sampler: String,
    /// label_oracle (membership of every subset of the batch's labels) |
    /// stumps (axis thresholds on the features)
    #[arg(long, default_value = "label_oracle")]
    pub hypotheses: String,
    /// Thresholds per axis for stump hypotheses.
    #[arg(long, default_value_t = 8)]
    pub stump_grid: usize,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    /// Classes per batch (N); the random sampler draws N*K rows.
    #[arg(long, default_value_t = 4)]
    pub batch_classes: usize,
    #[arg(long, default_value_t = 2)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest hypothesis class to enumerate.
    #[arg(long, default_value_t = implicit_align::divergence::DEFAULT_CAP)]
    pub cap: usize,
    /// Output directory for manifest.json and divergence.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct PairLine<'a> {
    pair: usize,
    hypotheses: usize,
    #[serde(flatten)]
    report: &'a DivergenceReport,
}

pub fn run(a: DivergenceArgs) -> Result<()> {
    let c = match a.classes {
        Some(c) => c,
        None => infer_classes(&a.source)?,
    };
    if !matches!(a.sampler.as_str(), "random" | "aligned_oracle") {
        bail!("divergence supports --sampler random or aligned_oracle, got {:?}", a.sampler);
    }
    if !matches!(a.hypotheses.as_str(), "label_oracle" | "stumps") {
        bail!("unknown hypothesis family {:?}", a.hypotheses);
    }
    let source = load(&a.source, c)?;
    let target = load(&a.target, c)?;
    let labels = load_labels(&a.target_labels)?;
    if labels.len() != target.len() {
        bail!("{} target labels for {} target rows", labels.len(), target.len());
    }

    let mut m = RunManifest::new("divergence", a.seed, c);
    m.config = implicit_align::harness::flatten(&json!({
        "sampler": a.sampler,
        "hypotheses": a.hypotheses,
        "stump_grid": a.stump_grid,
        "pairs": a.pairs,
        "batch_classes": a.batch_classes,
        "per_class": a.per_class,
        "cap": a.cap,
    }));
    m.inputs.insert("source".into(), InputFile::hash(&a.source)?);
    m.inputs.insert("target".into(), InputFile::hash(&a.target)?);
    m.inputs.insert("target_labels".into(), InputFile::hash(&a.target_labels)?);
    let out_path = a.out.join("divergence.jsonl");
    m.outputs.insert("reports".into(), out_path.clone());

    let run = Run::start(&a.out, m)?;
    run.finish(|m| {
        let mut rng = substream(a.seed, Stream::Probe);
        let src_index = ClassIndex::of_dataset(&source);
        let tgt_index = ClassIndex::from_labels(labels.as_slice(), c);
        let p = AlignmentDistribution::uniform(c);
        let stumps = (a.hypotheses == "stumps").then(|| {
            let all = source.features().iter().chain(target.features());
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let g = a.stump_grid.max(1);
            let grid: Vec<f64> = (1..=g).map(|i| lo + (hi - lo) * i as f64 / (g + 1) as f64).collect();
            HypothesisClass::stumps(source.dim(), &grid).with_constants()
        });
        let mut w = BufWriter::new(File::create(&out_path)?);
        let (mut sum, mut max_mis) = (0i64, 0i64);
        for i in 0..a.pairs {
            let batch = if a.sampler == "random" {
                random_minibatch(&source, target.len(), a.batch_classes * a.per_class, &mut rng)?
            } else {
                build_aligned_minibatch(&src_index, &tgt_index, &p, a.batch_classes, a.per_class, 1, &mut rng)?
            };
            let pair = LabeledBatchPair::from_datasets(&source, &batch.source, &target, &batch.target, labels.as_slice())?;
            let class = match &stumps {
                Some(h) => h.clone(),
                None => {
                    let mut present: Vec<usize> = pair.source_labels().iter().chain(pair.target_labels()).copied().collect();
                    present.sort_unstable();
                    present.dedup();
                    if present.len() >= 31 || (1usize << present.len()) > a.cap {
                        return Err(anyhow!(
                            "pair {i}: {} labels give 2^{} label-oracle hypotheses, over the cap {}",
                            present.len(),
                            present.len(),
                            a.cap
                        ));
                    }
                    HypothesisClass::label_oracle(&present)
                }
            };
            let report = empirical_divergence(&pair, &class, a.cap)?;
            sum += report.divergence;
            max_mis = max_mis.max(report.max_abs_misaligned);
            serde_json::to_writer(&mut w, &PairLine { pair: i, hypotheses: class.len(), report: &report })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let summary = json!({
            "pairs": a.pairs,
            "mean_divergence": if a.pairs == 0 { 0.0 } else { sum as f64 / a.pairs as f64 },
            "max_abs_misaligned": max_mis,
        });
        println!("{summary}");
        m.details = summary;
        Ok(())
    })
}
