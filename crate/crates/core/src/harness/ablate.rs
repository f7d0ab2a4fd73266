//! Experiment grids: each cell is a set of config overrides run over several
//! seeds; results are reduced to mean and standard error.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::TrainConfig;
use super::train::{train, TrainData, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub overrides: BTreeMap<String, Value>,
}

impl GridCell {
    pub fn new<const N: usize>(name: &str, overrides: [(&str, Value); N]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: TrainConfig,
    pub cells: Vec<GridCell>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// Masking on/off crossed with aligned/random sampling.
    pub fn masking_sampling(base: TrainConfig, seeds: Vec<u64>) -> Self {
        let cell = |mask: bool, sample: bool| {
            GridCell::new(
                &format!("masking={},sampling={}", on_off(mask), on_off(sample)),
                [
                    ("objective.kind", json!(if mask { "mdd_masked" } else { "mdd" })),
                    ("sampler", json!(if sample { "aligned" } else { "random" })),
                ],
            )
        };
        Self {
            base,
            cells: vec![cell(false, false), cell(true, false), cell(false, true), cell(true, true)],
            seeds,
        }
    }

    pub fn refresh_periods(base: TrainConfig, periods: &[usize], seeds: Vec<u64>) -> Self {
        Self {
            base,
            cells: periods
                .iter()
                .map(|&u| GridCell::new(&format!("refresh_period={u}"), [("refresh_period", json!(u))]))
                .collect(),
            seeds,
        }
    }

    pub fn samplers(base: TrainConfig, samplers: &[&str], seeds: Vec<u64>) -> Self {
        Self {
            base,
            cells: samplers
                .iter()
                .map(|s| GridCell::new(&format!("sampler={s}"), [("sampler", json!(s))]))
                .collect(),
            seeds,
        }
    }

    /// Resolved config of one cell and seed.
    pub fn config(&self, cell: &GridCell, seed: u64) -> Result<TrainConfig, TrainError> {
        let mut c = self.base.with_overrides(&cell.overrides)?;
        c.seed = seed;
        Ok(c)
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub cell: GridCell,
    /// Final target per-class accuracy of each successful seed, in seed order.
    pub per_class_accuracy: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub failures: Vec<String>,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl CellResult {
    pub fn per_class_summary(&self) -> (f64, f64) {
        mean_stderr(&self.per_class_accuracy)
    }

    pub fn accuracy_summary(&self) -> (f64, f64) {
        mean_stderr(&self.accuracy)
    }
}

/// Runs every cell for every seed. Independent runs execute in parallel; a
/// failing run is recorded in its cell without stopping the grid.
pub fn ablate(grid: &GridSpec, data: &TrainData<'_>) -> Vec<CellResult> {
    let jobs: Vec<(usize, u64)> = (0..grid.cells.len())
        .flat_map(|c| grid.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes: Vec<Result<(f64, f64), String>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cfg = grid.config(&grid.cells[c], seed).map_err(|e| e.to_string())?;
            let out = train::<f64>(&cfg, data).map_err(|e| format!("seed {seed}: {e}"))?;
            let last = out.log.last().ok_or("empty log")?;
            match (last.target_per_class_accuracy, last.target_accuracy) {
                (Some(p), Some(a)) => Ok((p, a)),
                _ => Err("target labels unavailable for scoring".to_string()),
            }
        })
        .collect();
    let mut results: Vec<CellResult> = grid
        .cells
        .iter()
        .map(|cell| CellResult {
            cell: cell.clone(),
            per_class_accuracy: Vec::new(),
            accuracy: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (&(c, _), o) in jobs.iter().zip(outcomes) {
        match o {
            Ok((p, a)) => {
                results[c].per_class_accuracy.push(p);
                results[c].accuracy.push(a);
            }
            Err(e) => results[c].failures.push(e),
        }
    }
    results
}

/// One row per cell: override columns, seed count, mean and standard error.
pub fn write_ablation_csv<W: Write>(results: &[CellResult], out: W) -> csv::Result<()> {
    let keys: Vec<String> = results
        .iter()
        .flat_map(|r| r.cell.overrides.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cell".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(
        [
            "seeds",
            "per_class_accuracy_mean",
            "per_class_accuracy_stderr",
            "accuracy_mean",
            "accuracy_stderr",
            "failures",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.cell.name.clone()];
        for k in &keys {
            row.push(match r.cell.overrides.get(k) {
                Some(Value::String(s)) => s.clone(),
                Some(v) => v.to_string(),
                None => String::new(),
            });
        }
        let (pm, ps) = r.per_class_summary();
        let (am, as_) = r.accuracy_summary();
        row.push(r.per_class_accuracy.len().to_string());
        row.extend([pm, ps, am, as_].map(|v| v.to_string()));
        row.push(r.failures.len().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain_pair, make_profile, PairSpec, ProfileKind, ShiftSpec};
    use crate::harness::config::ModelConfig;
    use crate::harness::train::train;

    #[test]
    fn mean_and_stderr() {
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn single_cell_grid_matches_direct_run() {
        let p = make_profile(ProfileKind::Balanced, 3, 20, 0.0).unwrap();
        let d = generate_domain_pair(4, &PairSpec::new(3, 2, ShiftSpec::identity()), &p, &p).unwrap();
        let data = TrainData {
            source: &d.source,
            target: &d.target,
            target_labels: Some(&d.target_labels),
        };
        let base = TrainConfig {
            steps: 20,
            eval_period: 10,
            model: ModelConfig {
                hidden: vec![6],
                feature_dim: 4,
                head_hidden: 4,
            },
            ..TrainConfig::default()
        };
        let grid = GridSpec::refresh_periods(base.clone(), &[5], vec![3]);
        let res = ablate(&grid, &data);
        let mut direct_cfg = base;
        direct_cfg.refresh_period = 5;
        direct_cfg.seed = 3;
        let direct = train::<f64>(&direct_cfg, &data).unwrap();
        assert_eq!(res[0].per_class_accuracy, vec![direct.log.last().unwrap().target_per_class_accuracy.unwrap()]);

        let grid = GridSpec::masking_sampling(grid.base.clone(), vec![1]);
        let res = ablate(&grid, &data);
        let mut buf = Vec::new();
        write_ablation_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().next().unwrap().starts_with("cell,objective.kind,sampler,seeds"));
    }
}
