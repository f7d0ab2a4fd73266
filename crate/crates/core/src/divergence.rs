//! Exact minibatch divergence over finite hypothesis classes, split into the
//! class-aligned and class-misaligned parts.
//!
//! Every hypothesis is evaluated once into a pair of bitsets (source half,
//! target half); a pair's disagreement count is then a popcount of an xor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

pub const DEFAULT_CAP: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("batch halves differ in size: {source_len} vs {target_len}")]
    Unequal { source_len: usize, target_len: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("hypothesis class has {size} members, cap is {cap}")]
    CapExceeded { size: usize, cap: usize },
    #[error("empty hypothesis class")]
    EmptyClass,
    #[error("hypothesis {index}: {msg}")]
    Hypothesis { index: usize, msg: String },
}

/// Source and target minibatches with (true or pseudo) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatchPair {
    num_classes: usize,
    dim: usize,
    source_features: Vec<f64>,
    source_labels: Vec<usize>,
    target_features: Vec<f64>,
    target_labels: Vec<usize>,
}

impl LabeledBatchPair {
    pub fn new(
        num_classes: usize,
        dim: usize,
        source_features: Vec<f64>,
        source_labels: Vec<usize>,
        target_features: Vec<f64>,
        target_labels: Vec<usize>,
    ) -> Result<Self, DivergenceError> {
        if source_labels.len() != target_labels.len() {
            return Err(DivergenceError::Unequal {
                source_len: source_labels.len(),
                target_len: target_labels.len(),
            });
        }
        if let Some(&label) = source_labels
            .iter()
            .chain(&target_labels)
            .find(|&&y| y >= num_classes)
        {
            return Err(DivergenceError::Label { label, num_classes });
        }
        assert_eq!(source_features.len(), source_labels.len() * dim);
        assert_eq!(target_features.len(), target_labels.len() * dim);
        Ok(Self {
            num_classes,
            dim,
            source_features,
            source_labels,
            target_features,
            target_labels,
        })
    }

    /// Label-only pair; feature-based hypotheses see a zero-width input.
    pub fn from_labels(
        num_classes: usize,
        source_labels: Vec<usize>,
        target_labels: Vec<usize>,
    ) -> Result<Self, DivergenceError> {
        Self::new(num_classes, 0, Vec::new(), source_labels, Vec::new(), target_labels)
    }

    /// Gathers rows of two datasets. `target_labels` indexes the whole target
    /// dataset (ground truth or pseudo-labels).
    pub fn from_datasets(
        source: &Dataset,
        source_rows: &[usize],
        target: &Dataset,
        target_rows: &[usize],
        target_labels: &[usize],
    ) -> Result<Self, DivergenceError> {
        Self::new(
            source.num_classes(),
            source.dim(),
            source.gather(source_rows),
            source_rows
                .iter()
                .map(|&i| source.label(i).expect("source rows are labeled"))
                .collect(),
            target.gather(target_rows),
            target_rows.iter().map(|&i| target_labels[i]).collect(),
        )
    }

    pub fn batch_size(&self) -> usize {
        self.source_labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    pub fn target_labels(&self) -> &[usize] {
        &self.target_labels
    }
}

/// Split of the label space into shared and domain-specific labels, and of
/// each batch into aligned and misaligned examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelPartition {
    pub common: Vec<usize>,
    pub source_only: Vec<usize>,
    pub target_only: Vec<usize>,
    /// `aligned_source[i]` iff source example `i` has a shared label.
    pub aligned_source: Vec<bool>,
    pub aligned_target: Vec<bool>,
}

impl LabelPartition {
    pub fn aligned_counts(&self) -> (usize, usize) {
        let c = |v: &[bool]| v.iter().filter(|&&b| b).count();
        (c(&self.aligned_source), c(&self.aligned_target))
    }
}

pub fn partition(pair: &LabeledBatchPair) -> LabelPartition {
    let c = pair.num_classes;
    let mut in_s = vec![false; c];
    let mut in_t = vec![false; c];
    pair.source_labels.iter().for_each(|&y| in_s[y] = true);
    pair.target_labels.iter().for_each(|&y| in_t[y] = true);
    let pick = |f: &dyn Fn(usize) -> bool| (0..c).filter(|&j| f(j)).collect::<Vec<_>>();
    LabelPartition {
        common: pick(&|j| in_s[j] && in_t[j]),
        source_only: pick(&|j| in_s[j] && !in_t[j]),
        target_only: pick(&|j| in_t[j] && !in_s[j]),
        aligned_source: pair.source_labels.iter().map(|&y| in_t[y]).collect(),
        aligned_target: pair.target_labels.iter().map(|&y| in_s[y]).collect(),
    }
}

/// Binary hypothesis on (features, label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Hypothesis {
    Constant { value: bool },
    /// `x[axis] > threshold`, flipped when `positive` is false.
    Stump { axis: usize, threshold: f64, positive: bool },
    /// `label(x)` is in the set encoded by bit `j` of `labels`.
    LabelSet { labels: u64 },
    /// Explicit outputs for each source and target example of one batch pair.
    Table { source: Vec<bool>, target: Vec<bool> },
}

impl Hypothesis {
    fn eval(&self, features: &[f64], dim: usize, labels: &[usize], table: Option<&[bool]>) -> Result<Vec<bool>, String> {
        Ok(match self {
            Hypothesis::Constant { value } => vec![*value; labels.len()],
            Hypothesis::Stump { axis, threshold, positive } => {
                if *axis >= dim {
                    return Err(format!("axis {axis} outside input dim {dim}"));
                }
                (0..labels.len())
                    .map(|i| (features[i * dim + axis] > *threshold) == *positive)
                    .collect()
            }
            Hypothesis::LabelSet { labels: set } => {
                labels.iter().map(|&y| y < 64 && set >> y & 1 == 1).collect()
            }
            Hypothesis::Table { .. } => {
                let t = table.expect("table outputs");
                if t.len() != labels.len() {
                    return Err(format!("table has {} entries for {} examples", t.len(), labels.len()));
                }
                t.to_vec()
            }
        })
    }
}

/// Finite, ordered hypothesis set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HypothesisClass {
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisClass {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn push(&mut self, h: Hypothesis) -> &mut Self {
        self.hypotheses.push(h);
        self
    }

    pub fn with_constants(mut self) -> Self {
        self.push(Hypothesis::Constant { value: false });
        self.push(Hypothesis::Constant { value: true });
        self
    }

    /// Axis stumps at every threshold of `grid`, both orientations.
    pub fn stumps(dim: usize, grid: &[f64]) -> Self {
        let mut hc = Self::new();
        for axis in 0..dim {
            for &threshold in grid {
                for positive in [true, false] {
                    hc.push(Hypothesis::Stump { axis, threshold, positive });
                }
            }
        }
        hc
    }

    /// Membership hypotheses for every subset of `labels` (the empty subset is
    /// the constant-0 hypothesis).
    pub fn label_oracle(labels: &[usize]) -> Self {
        assert!(labels.len() < 32 && labels.iter().all(|&y| y < 64));
        let mut hc = Self::new();
        for subset in 0u64..(1 << labels.len()) {
            let set = labels
                .iter()
                .enumerate()
                .filter(|(b, _)| subset >> b & 1 == 1)
                .fold(0u64, |acc, (_, &y)| acc | 1 << y);
            hc.push(Hypothesis::LabelSet { labels: set });
        }
        hc
    }

    pub fn extend(mut self, other: HypothesisClass) -> Self {
        self.hypotheses.extend(other.hypotheses);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits(Vec<u64>);

impl Bits {
    fn from_bools(v: &[bool]) -> Self {
        let mut w = vec![0u64; v.len().div_ceil(64)];
        for (i, &b) in v.iter().enumerate() {
            if b {
                w[i / 64] |= 1 << (i % 64);
            }
        }
        Bits(w)
    }

    fn xor_count(&self, other: &Bits, within: &Bits) -> i64 {
        self.0
            .iter()
            .zip(&other.0)
            .zip(&within.0)
            .map(|((a, b), m)| ((a ^ b) & m).count_ones() as i64)
            .sum()
    }
}

/// Hypothesis outputs on one batch pair.
#[derive(Debug, Clone)]
struct Evaluated {
    source: Vec<Bits>,
    target: Vec<Bits>,
}

fn evaluate(pair: &LabeledBatchPair, class: &HypothesisClass) -> Result<Evaluated, DivergenceError> {
    let mut source = Vec::with_capacity(class.len());
    let mut target = Vec::with_capacity(class.len());
    for (index, h) in class.hypotheses.iter().enumerate() {
        let (ts, tt) = match h {
            Hypothesis::Table { source, target } => (Some(source.as_slice()), Some(target.as_slice())),
            _ => (None, None),
        };
        let err = |msg| DivergenceError::Hypothesis { index, msg };
        let s = h
            .eval(&pair.source_features, pair.dim, &pair.source_labels, ts)
            .map_err(err)?;
        let t = h
            .eval(&pair.target_features, pair.dim, &pair.target_labels, tt)
            .map_err(err)?;
        source.push(Bits::from_bools(&s));
        target.push(Bits::from_bools(&t));
    }
    Ok(Evaluated { source, target })
}

/// Aligned and misaligned parts of the disagreement difference for one pair
/// of hypothesis outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct XiTerms {
    pub aligned: i64,
    pub misaligned: i64,
    /// Target disagreements minus source disagreements over whole batches.
    pub direct: i64,
}

struct Masks {
    all_s: Bits,
    all_t: Bits,
    aligned_s: Bits,
    aligned_t: Bits,
    mis_s: Bits,
    mis_t: Bits,
}

impl Masks {
    fn new(p: &LabelPartition) -> Self {
        let not = |v: &[bool]| v.iter().map(|b| !b).collect::<Vec<_>>();
        Self {
            all_s: Bits::from_bools(&vec![true; p.aligned_source.len()]),
            all_t: Bits::from_bools(&vec![true; p.aligned_target.len()]),
            aligned_s: Bits::from_bools(&p.aligned_source),
            aligned_t: Bits::from_bools(&p.aligned_target),
            mis_s: Bits::from_bools(&not(&p.aligned_source)),
            mis_t: Bits::from_bools(&not(&p.aligned_target)),
        }
    }

    fn terms(&self, hs: &Bits, ht: &Bits, gs: &Bits, gt: &Bits) -> XiTerms {
        XiTerms {
            aligned: ht.xor_count(gt, &self.aligned_t) - hs.xor_count(gs, &self.aligned_s),
            misaligned: ht.xor_count(gt, &self.mis_t) - hs.xor_count(gs, &self.mis_s),
            direct: ht.xor_count(gt, &self.all_t) - hs.xor_count(gs, &self.all_s),
        }
    }
}

/// Decomposition terms for hypotheses `h` and `h2` on `pair`.
pub fn xi_terms(
    pair: &LabeledBatchPair,
    part: &LabelPartition,
    h: &Hypothesis,
    h2: &Hypothesis,
) -> Result<XiTerms, DivergenceError> {
    let mut hc = HypothesisClass::new();
    hc.push(h.clone()).push(h2.clone());
    let ev = evaluate(pair, &hc)?;
    Ok(Masks::new(part).terms(&ev.source[0], &ev.target[0], &ev.source[1], &ev.target[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub batch_size: usize,
    pub common_labels: usize,
    pub source_only_labels: usize,
    pub target_only_labels: usize,
    pub aligned_source: usize,
    pub aligned_target: usize,
    /// `max |direct|` over ordered hypothesis pairs.
    pub divergence: i64,
    pub normalized: f64,
    pub xi_aligned: i64,
    pub xi_misaligned: i64,
    /// Indices of the maximising pair; ties go to the lexicographically smallest.
    pub argmax: (usize, usize),
    /// Largest `|xi_misaligned|` over all pairs.
    pub max_abs_misaligned: i64,
}

/// Exact sup over all ordered pairs of `|sum_T 1[h != h'] - sum_S 1[h != h']|`.
pub fn empirical_divergence(
    pair: &LabeledBatchPair,
    class: &HypothesisClass,
    cap: usize,
) -> Result<DivergenceReport, DivergenceError> {
    if class.is_empty() {
        return Err(DivergenceError::EmptyClass);
    }
    if class.len() > cap {
        return Err(DivergenceError::CapExceeded {
            size: class.len(),
            cap,
        });
    }
    let ev = evaluate(pair, class)?;
    let part = partition(pair);
    let masks = Masks::new(&part);
    let n = class.len();
    let mut best = masks.terms(&ev.source[0], &ev.target[0], &ev.source[0], &ev.target[0]);
    let mut arg = (0, 0);
    let mut max_mis = 0;
    for i in 0..n {
        for j in 0..n {
            let t = masks.terms(&ev.source[i], &ev.target[i], &ev.source[j], &ev.target[j]);
            debug_assert_eq!(t.direct, t.aligned + t.misaligned);
            max_mis = max_mis.max(t.misaligned.abs());
            if t.direct.abs() > best.direct.abs() {
                best = t;
                arg = (i, j);
            }
        }
    }
    let (aligned_source, aligned_target) = part.aligned_counts();
    let m = pair.batch_size();
    Ok(DivergenceReport {
        batch_size: m,
        common_labels: part.common.len(),
        source_only_labels: part.source_only.len(),
        target_only_labels: part.target_only.len(),
        aligned_source,
        aligned_target,
        divergence: best.direct.abs(),
        normalized: if m == 0 { 0.0 } else { best.direct.abs() as f64 / m as f64 },
        xi_aligned: best.aligned,
        xi_misaligned: best.misaligned,
        argmax: arg,
        max_abs_misaligned: max_mis,
    })
}

/// Every ordered pair's terms; used to check the decomposition exhaustively.
pub fn all_pair_terms(
    pair: &LabeledBatchPair,
    class: &HypothesisClass,
) -> Result<Vec<XiTerms>, DivergenceError> {
    let ev = evaluate(pair, class)?;
    let masks = Masks::new(&partition(pair));
    let n = class.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(masks.terms(&ev.source[i], &ev.target[i], &ev.source[j], &ev.target[j]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShortcutGap {
    pub pairs: usize,
    pub mean_random: f64,
    pub mean_aligned: f64,
    pub mean_misaligned_random: f64,
    pub mean_misaligned_aligned: f64,
    /// Largest `|xi_misaligned|` over all hypothesis pairs of all aligned batches.
    pub max_abs_misaligned_aligned: i64,
}

/// Paired comparison of batches drawn by two samplers.
pub fn shortcut_gap(
    random: &[LabeledBatchPair],
    aligned: &[LabeledBatchPair],
    class: &HypothesisClass,
    cap: usize,
) -> Result<ShortcutGap, DivergenceError> {
    let reports = |ps: &[LabeledBatchPair]| {
        ps.iter()
            .map(|p| empirical_divergence(p, class, cap))
            .collect::<Result<Vec<_>, _>>()
    };
    let r = reports(random)?;
    let a = reports(aligned)?;
    let mean = |v: &[DivergenceReport], f: fn(&DivergenceReport) -> f64| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        }
    };
    Ok(ShortcutGap {
        pairs: r.len().min(a.len()),
        mean_random: mean(&r, |x| x.divergence as f64),
        mean_aligned: mean(&a, |x| x.divergence as f64),
        mean_misaligned_random: mean(&r, |x| x.xi_misaligned as f64),
        mean_misaligned_aligned: mean(&a, |x| x.xi_misaligned as f64),
        max_abs_misaligned_aligned: a.iter().map(|x| x.max_abs_misaligned).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn partition_of_disjoint_digits() {
        let p = LabeledBatchPair::from_labels(10, vec![3, 3, 3], vec![6, 6, 6]).unwrap();
        let part = partition(&p);
        assert!(part.common.is_empty());
        assert_eq!(part.source_only, vec![3]);
        assert_eq!(part.target_only, vec![6]);
        assert_eq!(part.aligned_counts(), (0, 0));

        let p = LabeledBatchPair::from_labels(4, vec![0, 1, 2], vec![2, 1, 0]).unwrap();
        let part = partition(&p);
        assert!(part.source_only.is_empty() && part.target_only.is_empty());
        assert_eq!(part.aligned_counts(), (3, 3));
    }

    #[test]
    fn shortcut_reaches_batch_size() {
        let p = LabeledBatchPair::from_labels(10, vec![3; 5], vec![6; 5]).unwrap();
        let hc = HypothesisClass::label_oracle(&[3, 6]);
        let r = empirical_divergence(&p, &hc, DEFAULT_CAP).unwrap();
        assert_eq!(r.divergence, 5);
        assert_eq!(r.xi_aligned, 0);
        assert_eq!(r.xi_misaligned.abs(), 5);
    }

    #[test]
    fn identical_batches_have_zero_divergence() {
        let f = vec![0.1, -0.5, 1.0, 2.0, -1.0, 0.0];
        let p = LabeledBatchPair::new(3, 2, f.clone(), vec![0, 1, 2], f, vec![0, 1, 2]).unwrap();
        let hc = HypothesisClass::stumps(2, &[-0.5, 0.0, 0.5])
            .extend(HypothesisClass::label_oracle(&[0, 1, 2]))
            .with_constants();
        let r = empirical_divergence(&p, &hc, DEFAULT_CAP).unwrap();
        assert_eq!(r.divergence, 0);
        assert_eq!(r.max_abs_misaligned, 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            LabeledBatchPair::from_labels(3, vec![0], vec![0, 1]),
            Err(DivergenceError::Unequal { .. })
        ));
        assert!(LabeledBatchPair::from_labels(3, vec![3], vec![0]).is_err());
        let p = LabeledBatchPair::from_labels(3, vec![0], vec![1]).unwrap();
        let hc = HypothesisClass::label_oracle(&[0, 1, 2]);
        assert_eq!(
            empirical_divergence(&p, &hc, 4),
            Err(DivergenceError::CapExceeded { size: 8, cap: 4 })
        );
        let stump = HypothesisClass::stumps(1, &[0.0]);
        assert!(matches!(
            empirical_divergence(&p, &stump, 8),
            Err(DivergenceError::Hypothesis { index: 0, .. })
        ));
    }

    #[test]
    fn table_hypotheses() {
        let p = LabeledBatchPair::from_labels(2, vec![0, 1], vec![0, 1]).unwrap();
        let mut hc = HypothesisClass::new().with_constants();
        hc.push(Hypothesis::Table {
            source: vec![false, false],
            target: vec![true, true],
        });
        let r = empirical_divergence(&p, &hc, 8).unwrap();
        assert_eq!(r.divergence, 2);
        assert_eq!(r.argmax, (0, 2));
    }

    fn pair_strategy() -> impl Strategy<Value = (LabeledBatchPair, Vec<(Vec<bool>, Vec<bool>)>)> {
        (1usize..12).prop_flat_map(|m| {
            (
                prop::collection::vec(0usize..5, m),
                prop::collection::vec(0usize..5, m),
                prop::collection::vec(
                    (prop::collection::vec(any::<bool>(), m), prop::collection::vec(any::<bool>(), m)),
                    1..6,
                ),
            )
                .prop_map(|(s, t, tables)| (LabeledBatchPair::from_labels(5, s, t).unwrap(), tables))
        })
    }

    proptest! {
        #[test]
        fn partition_matches_set_algebra((p, _) in pair_strategy()) {
            let part = partition(&p);
            let ys: BTreeSet<usize> = p.source_labels().iter().copied().collect();
            let yt: BTreeSet<usize> = p.target_labels().iter().copied().collect();
            prop_assert_eq!(part.common, ys.intersection(&yt).copied().collect::<Vec<_>>());
            prop_assert_eq!(part.source_only, ys.difference(&yt).copied().collect::<Vec<_>>());
            prop_assert_eq!(part.target_only, yt.difference(&ys).copied().collect::<Vec<_>>());
        }

        #[test]
        fn xi_terms_match_recount((p, tables) in pair_strategy()) {
            let part = partition(&p);
            let hs: Vec<Hypothesis> = tables
                .iter()
                .map(|(s, t)| Hypothesis::Table { source: s.clone(), target: t.clone() })
                .collect();
            for (a, ha) in tables.iter().zip(&hs) {
                for (b, hb) in tables.iter().zip(&hs) {
                    let x = xi_terms(&p, &part, ha, hb).unwrap();
                    let count = |u: &[bool], v: &[bool], keep: &dyn Fn(usize) -> bool| {
                        (0..u.len()).filter(|&i| keep(i) && u[i] != v[i]).count() as i64
                    };
                    let al_t = count(&a.1, &b.1, &|i| part.aligned_target[i]);
                    let al_s = count(&a.0, &b.0, &|i| part.aligned_source[i]);
                    let mi_t = count(&a.1, &b.1, &|i| !part.aligned_target[i]);
                    let mi_s = count(&a.0, &b.0, &|i| !part.aligned_source[i]);
                    prop_assert_eq!(x.aligned, al_t - al_s);
                    prop_assert_eq!(x.misaligned, mi_t - mi_s);
                    prop_assert_eq!(x.direct, x.aligned + x.misaligned);
                }
            }
        }

        #[test]
        fn divergence_invariances((p, tables) in pair_strategy(), rot in 0usize..12) {
            let mut hc = HypothesisClass::new();
            for (s, t) in &tables {
                hc.push(Hypothesis::Table { source: s.clone(), target: t.clone() });
            }
            let base = empirical_divergence(&p, &hc, DEFAULT_CAP).unwrap();
            prop_assert!(base.divergence as usize <= p.batch_size());

            let mut dup = hc.clone();
            dup.push(hc.hypotheses[0].clone());
            prop_assert_eq!(empirical_divergence(&p, &dup, DEFAULT_CAP).unwrap().divergence, base.divergence);

            // permuting examples within each half, tables permuted alike
            let m = p.batch_size();
            let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
            let q = LabeledBatchPair::from_labels(
                5,
                perm.iter().map(|&i| p.source_labels()[i]).collect(),
                perm.iter().map(|&i| p.target_labels()[i]).collect(),
            ).unwrap();
            let mut hq = HypothesisClass::new();
            for (s, t) in &tables {
                hq.push(Hypothesis::Table {
                    source: perm.iter().map(|&i| s[i]).collect(),
                    target: perm.iter().map(|&i| t[i]).collect(),
                });
            }
            prop_assert_eq!(empirical_divergence(&q, &hq, DEFAULT_CAP).unwrap().divergence, base.divergence);

            let terms = all_pair_terms(&p, &hc).unwrap();
            let n = hc.len();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(terms[i * n + j].direct.abs(), terms[j * n + i].direct.abs());
                }
            }
        }
    }
}
