use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Shape of a per-class count vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Balanced,
    /// Linear ramp over class rank; parameter is the max:min ratio.
    Mild,
    /// Pareto rank law `(rank+1)^-alpha`; parameter is alpha.
    Extreme,
    /// Extreme profile with class order reversed.
    RsUtSource,
    /// Extreme profile over class rank.
    RsUtTarget,
}

impl ProfileKind {
    pub fn default_parameter(self) -> f64 {
        match self {
            ProfileKind::Balanced => 0.0,
            ProfileKind::Mild => 3.0,
            _ => 1.5,
        }
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Balanced => "balanced",
            ProfileKind::Mild => "mild",
            ProfileKind::Extreme => "extreme",
            ProfileKind::RsUtSource => "rs_ut_source",
            ProfileKind::RsUtTarget => "rs_ut_target",
        })
    }
}

impl FromStr for ProfileKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "balanced" => ProfileKind::Balanced,
            "mild" => ProfileKind::Mild,
            "extreme" => ProfileKind::Extreme,
            "rs_ut_source" => ProfileKind::RsUtSource,
            "rs_ut_target" => ProfileKind::RsUtTarget,
            other => return Err(format!("unknown profile {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelProfile {
    pub kind: ProfileKind,
    pub parameter: f64,
    pub counts: Vec<usize>,
}

impl LabelProfile {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Same counts with class rank reversed.
    pub fn reversed(&self) -> Self {
        let kind = match self.kind {
            ProfileKind::RsUtSource => ProfileKind::RsUtTarget,
            ProfileKind::RsUtTarget => ProfileKind::RsUtSource,
            k => k,
        };
        Self {
            kind,
            parameter: self.parameter,
            counts: self.counts.iter().rev().copied().collect(),
        }
    }
}

const MIN_COUNT: usize = 2;

pub fn make_profile(
    kind: ProfileKind,
    num_classes: usize,
    max_count: usize,
    parameter: f64,
) -> Result<LabelProfile, DataError> {
    if num_classes < 2 {
        return Err(DataError::Profile(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if max_count < num_classes {
        return Err(DataError::Profile(format!(
            "max_count {max_count} smaller than num_classes {num_classes}"
        )));
    }
    let max = max_count as f64;
    let counts: Vec<usize> = match kind {
        ProfileKind::Balanced => vec![max_count; num_classes],
        ProfileKind::Mild => {
            if !(parameter >= 1.0) {
                return Err(DataError::Profile(format!(
                    "imbalance ratio must be >= 1, got {parameter}"
                )));
            }
            let min = max / parameter;
            (0..num_classes)
                .map(|r| {
                    let c = max - (max - min) * r as f64 / (num_classes - 1) as f64;
                    ((c + 1e-9).floor() as usize).max(MIN_COUNT)
                })
                .collect()
        }
        ProfileKind::Extreme | ProfileKind::RsUtSource | ProfileKind::RsUtTarget => {
            if !(parameter > 0.0) {
                return Err(DataError::Profile(format!(
                    "alpha must be > 0, got {parameter}"
                )));
            }
            let c: Vec<usize> = (0..num_classes)
                .map(|r| {
                    let v = max * ((r + 1) as f64).powf(-parameter);
                    ((v + 1e-9).floor() as usize).max(MIN_COUNT)
                })
                .collect();
            if kind == ProfileKind::RsUtSource {
                c.into_iter().rev().collect()
            } else {
                c
            }
        }
    };
    Ok(LabelProfile {
        kind,
        parameter,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_counts() {
        let p = make_profile(ProfileKind::Balanced, 5, 20, 0.0).unwrap();
        assert_eq!(p.counts, vec![20; 5]);
    }

    #[test]
    fn extreme_counts_match_direct_evaluation() {
        let p = make_profile(ProfileKind::Extreme, 4, 100, 1.5).unwrap();
        let direct: Vec<usize> = (1..=4)
            .map(|r| (100.0 * (r as f64).powf(-1.5)).floor() as usize)
            .collect();
        assert_eq!(direct, vec![100, 35, 19, 12]);
        assert_eq!(p.counts, direct);
    }

    #[test]
    fn extreme_is_clamped_at_two() {
        let p = make_profile(ProfileKind::Extreme, 10, 10, 3.0).unwrap();
        assert!(p.counts.iter().all(|&c| c >= 2));
        assert_eq!(p.counts[0], 10);
    }

    #[test]
    fn mild_is_a_linear_ramp() {
        let p = make_profile(ProfileKind::Mild, 3, 30, 3.0).unwrap();
        assert_eq!(p.counts, vec![30, 20, 10]);
        let p = make_profile(ProfileKind::Mild, 10, 90, 3.0).unwrap();
        assert!(p.counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(*p.counts.last().unwrap(), 30);
    }

    #[test]
    fn rs_ut_pair_is_rank_reversed_and_involutive() {
        let t = make_profile(ProfileKind::RsUtTarget, 6, 120, 1.5).unwrap();
        let s = make_profile(ProfileKind::RsUtSource, 6, 120, 1.5).unwrap();
        assert_eq!(s, t.reversed());
        assert_eq!(t.reversed().reversed(), t);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_profile(ProfileKind::Extreme, 4, 100, 0.0).is_err());
        assert!(make_profile(ProfileKind::Mild, 4, 100, 0.5).is_err());
        assert!(make_profile(ProfileKind::Balanced, 4, 3, 0.0).is_err());
        assert!(make_profile(ProfileKind::Balanced, 1, 3, 0.0).is_err());
    }
}
