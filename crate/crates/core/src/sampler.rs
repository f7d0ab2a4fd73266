//! Class-aligned minibatch construction driven by a periodically refreshed
//! pseudo-label cache, plus the random and source-balanced baselines.
//!
//! An aligned batch draws a class set `Y` from the alignment distribution
//! without replacement, then `K` source examples from each class bucket and `K`
//! target examples from the matching pseudo-label bucket. Source labels and
//! target pseudo-labels therefore form the same multiset by construction.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassIndex, Dataset, HiddenLabels};
use crate::nn::{AdaptationModel, ModelError};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid alignment distribution: {0}")]
    Distribution(String),
    #[error("requested {requested} classes but only {available} have positive mass")]
    TooManyClasses { requested: usize, available: usize },
    #[error("degenerate pseudo-label cache: only {live} classes have target examples (need {min})")]
    DegenerateCache { live: usize, min: usize },
    #[error("class {0} has positive alignment mass but no source examples")]
    EmptySourceBucket(usize),
    #[error("cannot sample from an empty dataset")]
    EmptyDataset,
    #[error("batch geometry must be positive (N={n}, K={k})")]
    Geometry { n: usize, k: usize },
}

/// Probability vector over labels from which aligned classes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentDistribution(Vec<f64>);

impl AlignmentDistribution {
    pub fn uniform(num_classes: usize) -> Self {
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    /// Normalises nonnegative weights to sum to one.
    pub fn new(weights: Vec<f64>) -> Result<Self, SamplerError> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SamplerError::Distribution(format!(
                "weights must be finite and nonnegative: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(SamplerError::Distribution("weights sum to zero".into()));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Draws `n` distinct labels; each draw is proportional to the weights of the
/// labels not yet chosen. Labels with `eligible[j] == false` are never drawn.
fn draw_without_replacement<R: Rng>(
    weights: &[f64],
    eligible: &[bool],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut w: Vec<f64> = weights
        .iter()
        .zip(eligible)
        .map(|(&p, &e)| if e { p } else { 0.0 })
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = w.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &wj) in w.iter().enumerate() {
            if wj <= 0.0 {
                continue;
            }
            acc += wj;
            pick = Some(j);
            if u < acc {
                break;
            }
        }
        let j = pick.expect("positive remaining mass");
        out.push(j);
        w[j] = 0.0;
    }
    out
}

/// `n` unique labels drawn sequentially from `p`, renormalised over the
/// labels that remain.
pub fn sample_classes<R: Rng>(
    p: &AlignmentDistribution,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>, SamplerError> {
    let available = p.probs().iter().filter(|&&x| x > 0.0).count();
    if n > available {
        return Err(SamplerError::TooManyClasses {
            requested: n,
            available,
        });
    }
    Ok(draw_without_replacement(
        p.probs(),
        &vec![true; p.len()],
        n,
        rng,
    ))
}

/// `k` draws from a bucket: without replacement when it is large enough,
/// otherwise with replacement.
fn draw_from_bucket<R: Rng>(bucket: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if bucket.len() >= k {
        index::sample(rng, bucket.len(), k)
            .into_iter()
            .map(|i| bucket[i])
            .collect()
    } else {
        (0..k).map(|_| bucket[rng.random_range(0..bucket.len())]).collect()
    }
}

/// Paired source/target minibatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minibatch {
    /// Indices into the source dataset.
    pub source: Vec<usize>,
    pub source_labels: Vec<usize>,
    /// Indices into the target dataset.
    pub target: Vec<usize>,
    /// Pseudo-labels of the target picks; `None` when the target half was drawn at random.
    pub target_pseudo: Option<Vec<usize>>,
    /// Sampled class set `Y` in draw order; empty for the random sampler.
    pub classes: Vec<usize>,
    /// Alignment mask: `mask[i]` iff class `i` is in `Y` (all set for the random sampler).
    pub mask: Vec<bool>,
    /// Fewer classes than requested had nonempty target buckets.
    pub degraded: bool,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Number of distinct labels in the source half.
    pub fn class_diversity(&self) -> usize {
        let mut seen = vec![false; self.mask.len()];
        self.source_labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&b| b).count()
    }

    /// Checks the aligned-batch invariants: every class of `Y` contributes
    /// exactly `k` source and `k` target examples, source labels and target
    /// pseudo-labels agree as multisets, and the mask marks exactly `Y`.
    pub fn check_alignment(&self, k: usize) -> Result<(), String> {
        let pseudo = self
            .target_pseudo
            .as_ref()
            .ok_or("target half is not pseudo-labelled")?;
        let c = self.mask.len();
        let mut count_s = vec![0usize; c];
        let mut count_t = vec![0usize; c];
        self.source_labels.iter().for_each(|&y| count_s[y] += 1);
        pseudo.iter().for_each(|&y| count_t[y] += 1);
        if count_s != count_t {
            return Err(format!("label multisets differ: {count_s:?} vs {count_t:?}"));
        }
        let ones = self.mask.iter().filter(|&&b| b).count();
        if ones != self.classes.len() {
            return Err(format!("mask has {ones} ones for {} classes", self.classes.len()));
        }
        for j in 0..c {
            let expected = if self.mask[j] { k } else { 0 };
            if count_s[j] != expected {
                return Err(format!("class {j}: {} examples, expected {expected}", count_s[j]));
            }
        }
        if self.source.len() != self.target.len() || self.source.len() != self.classes.len() * k {
            return Err("batch halves have inconsistent sizes".into());
        }
        Ok(())
    }
}

fn mask_of(classes: &[usize], num_classes: usize) -> Vec<bool> {
    let mut m = vec![false; num_classes];
    classes.iter().for_each(|&j| m[j] = true);
    m
}

fn check_geometry(n: usize, k: usize) -> Result<(), SamplerError> {
    if n == 0 || k == 0 {
        return Err(SamplerError::Geometry { n, k });
    }
    Ok(())
}

fn check_source(source: &ClassIndex, p: &AlignmentDistribution) -> Result<(), SamplerError> {
    if p.len() != source.num_classes() {
        return Err(SamplerError::Distribution(format!(
            "{} probabilities for {} classes",
            p.len(),
            source.num_classes()
        )));
    }
    for (j, &pj) in p.probs().iter().enumerate() {
        if pj > 0.0 && source.bucket(j).is_empty() {
            return Err(SamplerError::EmptySourceBucket(j));
        }
    }
    Ok(())
}

/// Class-aligned minibatch. Classes whose target pseudo-bucket is empty are
/// never drawn (equivalent to reject-and-redraw from the remaining mass). If
/// fewer than `n` classes are live the batch shrinks and `degraded` is set;
/// fewer than `min_classes` live classes is an error.
pub fn build_aligned_minibatch<R: Rng>(
    source: &ClassIndex,
    target: &ClassIndex,
    p: &AlignmentDistribution,
    n: usize,
    k: usize,
    min_classes: usize,
    rng: &mut R,
) -> Result<Minibatch, SamplerError> {
    check_geometry(n, k)?;
    check_source(source, p)?;
    let eligible: Vec<bool> = (0..p.len())
        .map(|j| p.probs()[j] > 0.0 && !target.bucket(j).is_empty())
        .collect();
    let live = eligible.iter().filter(|&&e| e).count();
    let min = min_classes.max(1);
    if live < min {
        return Err(SamplerError::DegenerateCache { live, min });
    }
    let n_eff = n.min(live);
    let classes = draw_without_replacement(p.probs(), &eligible, n_eff, rng);
    let mut batch = Minibatch {
        source: Vec::with_capacity(n_eff * k),
        source_labels: Vec::with_capacity(n_eff * k),
        target: Vec::with_capacity(n_eff * k),
        target_pseudo: Some(Vec::with_capacity(n_eff * k)),
        mask: mask_of(&classes, p.len()),
        classes,
        degraded: n_eff < n,
    };
    for &y in &batch.classes {
        batch.source.extend(draw_from_bucket(source.bucket(y), k, rng));
        batch.source_labels.extend(std::iter::repeat_n(y, k));
        batch.target.extend(draw_from_bucket(target.bucket(y), k, rng));
        if let Some(t) = batch.target_pseudo.as_mut() {
            t.extend(std::iter::repeat_n(y, k));
        }
    }
    Ok(batch)
}

/// `m` indices drawn uniformly with replacement.
pub fn random_batch<R: Rng>(len: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, SamplerError> {
    if len == 0 {
        return Err(SamplerError::EmptyDataset);
    }
    Ok((0..m).map(|_| rng.random_range(0..len)).collect())
}

/// Random source and target halves of `m` examples each; mask all-ones.
pub fn random_minibatch<R: Rng>(
    source: &Dataset,
    target_len: usize,
    m: usize,
    rng: &mut R,
) -> Result<Minibatch, SamplerError> {
    let s = random_batch(source.len(), m, rng)?;
    let t = random_batch(target_len, m, rng)?;
    let labels = s
        .iter()
        .map(|&i| source.label(i).expect("source rows are labeled"))
        .collect();
    Ok(Minibatch {
        source: s,
        source_labels: labels,
        target: t,
        target_pseudo: None,
        classes: Vec::new(),
        mask: vec![true; source.num_classes()],
        degraded: false,
    })
}

/// Source half stratified as in the aligned sampler, target half uniform at
/// random with the same size. The mask records `Y`; objectives apply it only
/// when masking is enabled.
pub fn source_balanced_batch<R: Rng>(
    source: &ClassIndex,
    target_len: usize,
    p: &AlignmentDistribution,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Minibatch, SamplerError> {
    check_geometry(n, k)?;
    check_source(source, p)?;
    if target_len == 0 {
        return Err(SamplerError::EmptyDataset);
    }
    let classes = sample_classes(p, n, rng)?;
    let mut src = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n * k);
    for &y in &classes {
        src.extend(draw_from_bucket(source.bucket(y), k, rng));
        labels.extend(std::iter::repeat_n(y, k));
    }
    let target = random_batch(target_len, n * k, rng)?;
    Ok(Minibatch {
        source: src,
        source_labels: labels,
        target,
        target_pseudo: None,
        mask: mask_of(&classes, p.len()),
        classes,
        degraded: false,
    })
}

/// Expected number of distinct classes in `k` uniform draws over `n` classes:
/// `n * (1 - ((n-1)/n)^k)`.
pub fn expected_diversity(n: usize, k: usize) -> f64 {
    let n = n as f64;
    n * (1.0 - ((n - 1.0) / n).powi(k as i32))
}

/// Cached target predictions used to stratify the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelCache {
    labels: Vec<usize>,
    index: ClassIndex,
    refreshed_at: Option<usize>,
    refresh_period: usize,
}

impl PseudoLabelCache {
    pub fn new(num_classes: usize, refresh_period: usize) -> Self {
        Self {
            labels: Vec::new(),
            index: ClassIndex::from_labels(&[], num_classes),
            refreshed_at: None,
            refresh_period: refresh_period.max(1),
        }
    }

    /// Cache built from fixed labels (ground truth for the oracle sampler).
    pub fn from_labels(labels: Vec<usize>, num_classes: usize) -> Self {
        Self {
            index: ClassIndex::from_labels(&labels, num_classes),
            labels,
            refreshed_at: Some(0),
            refresh_period: usize::MAX,
        }
    }

    pub fn needs_refresh(&self, step: usize) -> bool {
        self.refreshed_at.is_none() || step % self.refresh_period == 0
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn index(&self) -> &ClassIndex {
        &self.index
    }

    pub fn refreshed_at(&self) -> Option<usize> {
        self.refreshed_at
    }

    pub fn refresh_period(&self) -> usize {
        self.refresh_period
    }

    /// Replaces labels and index together.
    pub fn replace(&mut self, labels: Vec<usize>, step: usize) {
        self.index = ClassIndex::from_labels(&labels, self.index.num_classes());
        self.labels = labels;
        self.refreshed_at = Some(step);
    }

    /// Fraction of cached labels equal to the hidden ground truth.
    pub fn accuracy(&self, truth: &HiddenLabels) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .labels
            .iter()
            .zip(truth.as_slice())
            .filter(|(a, b)| a == b)
            .count();
        hits as f64 / self.labels.len() as f64
    }
}

/// Predicts every target example with the main classifier and rebuilds the
/// target class index.
pub fn refresh_pseudo_labels<S: Scalar>(
    model: &AdaptationModel<S>,
    target: &Dataset,
    cache: &mut PseudoLabelCache,
    step: usize,
) -> Result<(), ModelError> {
    let x = model.input_tensor(target.features(), target.len())?;
    let labels = model.predict_label(&x)?;
    cache.replace(labels, step);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn rng() -> crate::rng::Rng {
        substream(5, Stream::Sampler)
    }

    #[test]
    fn exhaustive_class_draws() {
        let mut r = rng();
        for n in [3usize, 31] {
            let p = AlignmentDistribution::uniform(n);
            for _ in 0..20 {
                let mut y = sample_classes(&p, n, &mut r).unwrap();
                y.sort_unstable();
                assert_eq!(y, (0..n).collect::<Vec<_>>());
            }
        }
        let point = AlignmentDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(sample_classes(&point, 1, &mut r).unwrap(), vec![0]);
        assert!(matches!(
            sample_classes(&point, 2, &mut r),
            Err(SamplerError::TooManyClasses { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn aligned_batch_geometry() {
        let s = ClassIndex::from_labels(&[0, 0, 1, 1, 1, 2, 2], 3);
        let t = ClassIndex::from_labels(&[2, 1, 0, 0, 1], 3);
        let p = AlignmentDistribution::uniform(3);
        let b = build_aligned_minibatch(&s, &t, &p, 3, 2, 1, &mut rng()).unwrap();
        assert_eq!(b.len(), 6);
        let mut sl = b.source_labels.clone();
        sl.sort_unstable();
        assert_eq!(sl, vec![0, 0, 1, 1, 2, 2]);
        let mut tl = b.target_pseudo.clone().unwrap();
        tl.sort_unstable();
        assert_eq!(tl, sl);
        assert!(!b.degraded);
        b.check_alignment(2).unwrap();
        // picked target rows really carry the pseudo-label they are filed under
        let labels = [2, 1, 0, 0, 1];
        for (i, &y) in b.target.iter().zip(b.target_pseudo.as_ref().unwrap()) {
            assert_eq!(labels[*i], y);
        }
    }

    #[test]
    fn empty_pseudo_buckets_shrink_the_batch() {
        let s = ClassIndex::from_labels(&[0, 1, 2], 3);
        let t = ClassIndex::from_labels(&[0, 1, 1, 0], 3);
        let p = AlignmentDistribution::uniform(3);
        let b = build_aligned_minibatch(&s, &t, &p, 3, 1, 1, &mut rng()).unwrap();
        assert!(b.degraded);
        let mut y = b.classes.clone();
        y.sort_unstable();
        assert_eq!(y, vec![0, 1]);
        assert_eq!(b.mask, vec![true, true, false]);
        b.check_alignment(1).unwrap();

        let err = build_aligned_minibatch(&s, &t, &p, 3, 1, 3, &mut rng()).unwrap_err();
        assert_eq!(err, SamplerError::DegenerateCache { live: 2, min: 3 });
        let none = ClassIndex::from_labels(&[], 3);
        assert!(build_aligned_minibatch(&s, &none, &p, 3, 1, 1, &mut rng()).is_err());
    }

    #[test]
    fn source_balanced_covers_every_class_once() {
        let s = ClassIndex::from_labels(&[0, 0, 1, 2, 2, 2, 3], 4);
        let p = AlignmentDistribution::uniform(4);
        let b = source_balanced_batch(&s, 10, &p, 4, 1, &mut rng()).unwrap();
        let mut sl = b.source_labels.clone();
        sl.sort_unstable();
        assert_eq!(sl, vec![0, 1, 2, 3]);
        assert_eq!(b.target.len(), 4);
        assert!(b.target.iter().all(|&i| i < 10));
        assert!(b.target_pseudo.is_none());
    }

    #[test]
    fn random_batch_rejects_empty() {
        assert_eq!(random_batch(0, 3, &mut rng()), Err(SamplerError::EmptyDataset));
    }

    #[test]
    fn expected_diversity_values() {
        assert!((expected_diversity(7, 1) - 1.0).abs() < 1e-12);
        // enumerate the 4 equiprobable label pairs over 2 classes
        let pairs = [(0, 0), (0, 1), (1, 0), (1, 1)];
        let mean = pairs
            .iter()
            .map(|&(a, b)| if a == b { 1.0 } else { 2.0 })
            .sum::<f64>()
            / 4.0;
        assert_eq!(expected_diversity(2, 2), mean);
        assert!((expected_diversity(31, 31) - 19.78).abs() < 0.005);
    }

    #[test]
    fn cache_refresh_schedule() {
        let mut c = PseudoLabelCache::new(3, 20);
        assert!(c.needs_refresh(7));
        c.replace(vec![0, 1, 1], 0);
        assert!(!c.needs_refresh(7));
        assert!(c.needs_refresh(40));
        assert_eq!(c.index().bucket(1), &[1, 2]);
        assert_eq!(c.accuracy(&HiddenLabels::new(vec![0, 1, 2])), 2.0 / 3.0);
    }

    #[test]
    fn sampling_is_pure_in_rng_state() {
        let s = ClassIndex::from_labels(&[0, 1, 2, 0, 1, 2, 0], 3);
        let t = ClassIndex::from_labels(&[2, 1, 0, 0], 3);
        let p = AlignmentDistribution::uniform(3);
        let a = build_aligned_minibatch(&s, &t, &p, 2, 3, 1, &mut rng()).unwrap();
        let b = build_aligned_minibatch(&s, &t, &p, 2, 3, 1, &mut rng()).unwrap();
        assert_eq!(a, b);
    }
}
