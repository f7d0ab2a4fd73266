//! Desk-scale experiment presets: synthetic domain pairs under controlled
//! label shift and matching training configs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, SamplerKind, TrainConfig};
use crate::data::{
    generate_domain_pair, make_profile, DataError, DomainPair, LabelProfile, Layout, PairSpec,
    ProfileKind, ShiftSpec,
};
use crate::objectives::{TransferKind, TransferLossConfig};
use crate::optim::SgdConfig;

/// How the two label distributions differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftRegime {
    SourceBalancedTargetImbalanced,
    SourceImbalancedTargetBalanced,
    /// Both imbalanced, with class ranks reversed between domains.
    BothImbalanced,
}

impl ShiftRegime {
    pub const ALL: [ShiftRegime; 3] = [
        ShiftRegime::SourceBalancedTargetImbalanced,
        ShiftRegime::SourceImbalancedTargetBalanced,
        ShiftRegime::BothImbalanced,
    ];
}

impl fmt::Display for ShiftRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftRegime::SourceBalancedTargetImbalanced => "source_balanced_target_imbalanced",
            ShiftRegime::SourceImbalancedTargetBalanced => "source_imbalanced_target_balanced",
            ShiftRegime::BothImbalanced => "both_imbalanced",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imbalance {
    Mild,
    Extreme,
}

impl fmt::Display for Imbalance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Imbalance::Mild => "mild",
            Imbalance::Extreme => "extreme",
        })
    }
}

impl FromStr for Imbalance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mild" => Ok(Imbalance::Mild),
            "extreme" => Ok(Imbalance::Extreme),
            o => Err(format!("unknown imbalance {o:?}")),
        }
    }
}

pub const NUM_CLASSES: usize = 10;
pub const MAX_COUNT: usize = 200;
/// Head class size of the RS-UT pair, large enough that the rarest target
/// class keeps a usable pseudo-label bucket.
pub const RS_UT_MAX_COUNT: usize = 600;

/// Covariate shift of the preset pairs: a quarter of the class spacing
/// along the line of class means.
pub fn default_shift() -> ShiftSpec {
    ShiftSpec {
        translation: [1.0, 0.0],
        rotation: 0.0,
        scale: 1.0,
    }
}

/// Class blobs on a line, where marginal alignment can undo the shift. On a
/// ring a rotated target has nearly the same marginal as the source, so
/// adversarial alignment has nothing to latch onto.
pub fn pair_spec() -> PairSpec {
    let mut spec = PairSpec::new(NUM_CLASSES, 2, default_shift());
    spec.layout = Layout::Line;
    spec.sigma = 0.6;
    spec
}

/// [`pair_spec`] shrunk by four, with the same separation in units of
/// sigma. Smaller inputs keep the MDD classifier steady enough that
/// pseudo-label buckets do not empty out between refreshes.
pub fn rs_ut_spec() -> PairSpec {
    let mut spec = pair_spec();
    spec.radius /= 4.0;
    spec.sigma /= 4.0;
    spec.shift.translation = [spec.shift.translation[0] / 4.0, spec.shift.translation[1] / 4.0];
    spec
}

/// Source and target count profiles for a regime.
pub fn profiles(
    regime: ShiftRegime,
    imbalance: Imbalance,
    num_classes: usize,
    max_count: usize,
) -> Result<(LabelProfile, LabelProfile), DataError> {
    let kind = match imbalance {
        Imbalance::Mild => ProfileKind::Mild,
        Imbalance::Extreme => ProfileKind::Extreme,
    };
    let skewed = make_profile(kind, num_classes, max_count, kind.default_parameter())?;
    let flat = make_profile(ProfileKind::Balanced, num_classes, max_count, 0.0)?;
    Ok(match regime {
        ShiftRegime::SourceBalancedTargetImbalanced => (flat, skewed),
        ShiftRegime::SourceImbalancedTargetBalanced => (skewed, flat),
        ShiftRegime::BothImbalanced => (skewed.reversed(), skewed),
    })
}

pub fn shift_pair(seed: u64, regime: ShiftRegime, imbalance: Imbalance) -> Result<DomainPair, DataError> {
    let (s, t) = profiles(regime, imbalance, NUM_CLASSES, MAX_COUNT)?;
    generate_domain_pair(seed, &pair_spec(), &s, &t)
}

/// Reversely-imbalanced source, imbalanced target.
pub fn rs_ut_pair(seed: u64) -> Result<DomainPair, DataError> {
    let (s, t) = profiles(ShiftRegime::BothImbalanced, Imbalance::Extreme, NUM_CLASSES, RS_UT_MAX_COUNT)?;
    generate_domain_pair(seed, &rs_ut_spec(), &s, &t)
}

/// Transfer-loss weight used with each objective in the presets. The
/// gradient reversal coefficient never exceeds 0.1, so DANN needs a larger
/// weight to move the features at this scale.
pub fn desk_eta(kind: &TransferKind) -> f64 {
    match kind {
        TransferKind::Dann => 3.0,
        _ => 1.0,
    }
}

/// Small, fast training config for the synthetic pairs.
pub fn desk_config(sampler: SamplerKind, kind: TransferKind) -> TrainConfig {
    let mut objective = TransferLossConfig::new(kind);
    objective.eta = desk_eta(&objective.kind);
    TrainConfig {
        seed: 0,
        steps: 4000,
        sampler,
        classes_per_batch: None,
        per_class: 2,
        objective,
        sgd: SgdConfig {
            learning_rate: 0.01,
            ..SgdConfig::default()
        },
        refresh_period: 20,
        warmup_steps: 1500,
        eval_period: 500,
        min_live_classes: 1,
        model: ModelConfig {
            hidden: vec![32, 32],
            feature_dim: 16,
            head_hidden: 16,
        },
        alignment: None,
        probe_divergence: false,
    }
}

/// Masked MDD with aligned sampling on the RS-UT pair. A smaller step and
/// a longer warm-up keep pseudo-label buckets from emptying, and drawing 8
/// of the 10 classes per batch gives the mask something to remove.
pub fn ablation_config() -> TrainConfig {
    let mut c = desk_config(SamplerKind::Aligned, TransferKind::MddMasked);
    c.steps = 6000;
    c.classes_per_batch = Some(8);
    c.per_class = 3;
    c.sgd.learning_rate = 0.003;
    c.warmup_steps = 2000;
    c
}
