//! DANN with random versus class-aligned batches across label-shift regimes.
//!
//! `cargo run --release --example shift_study -- [seeds] [steps]`

use std::time::Instant;

use implicit_align::harness::presets::{desk_config, shift_pair, Imbalance, ShiftRegime};
use implicit_align::harness::{train, SamplerKind, TrainData};
use implicit_align::objectives::TransferKind;

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(5);
    let steps = args.get(1).copied();
    println!("regime,imbalance,sampler,per_class_mean,seconds");
    for regime in ShiftRegime::ALL {
        for imb in [Imbalance::Mild, Imbalance::Extreme] {
            for sampler in [SamplerKind::Random, SamplerKind::Aligned] {
                let t0 = Instant::now();
                let mut acc = Vec::new();
                for seed in 0..seeds {
                    let pair = shift_pair(seed, regime, imb).expect("pair");
                    let data = TrainData {
                        source: &pair.source,
                        target: &pair.target,
                        target_labels: Some(&pair.target_labels),
                    };
                    let mut cfg = desk_config(sampler, TransferKind::Dann);
                    cfg.seed = seed;
                    if let Some(s) = steps {
                        cfg.steps = s as usize;
                    }
                    let out = train::<f64>(&cfg, &data).expect("train");
                    acc.push(out.log.last().unwrap().target_per_class_accuracy.unwrap());
                }
                let mean = acc.iter().sum::<f64>() / acc.len() as f64;
                println!(
                    "{regime},{imb},{sampler},{mean:.4},{:.1}",
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
}
