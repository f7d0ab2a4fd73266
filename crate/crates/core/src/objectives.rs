//! Training objectives: supervised source loss, domain-adversarial (DANN)
//! loss, classifier-discrepancy (MDD) loss with an optional class mask, and the
//! explicit prototype-alignment baseline.
//!
//! The adversarial terms are wired for a single backward pass: the head that
//! plays the maximiser (auxiliary classifier or discriminator) sits behind a
//! gradient reversal layer, so minimising the returned total trains the heads
//! normally and pushes the feature extractor the opposite way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::nn::{argmax, BoundModel};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Probability floor inside `-log(1 - p)`.
pub const MDD_FLOOR: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty {0} half")]
    EmptyHalf(&'static str),
    #[error("invalid objective config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PrototypeVariant {
    /// Plain batch means.
    Basic,
    /// Exponential moving average with decay `rho`.
    MovingAvg { rho: f64 },
    /// Target rows are kept only when the main classifier's confidence reaches
    /// a threshold ramping linearly from `tau_start` to `tau_end`.
    Curriculum { tau_start: f64, tau_end: f64 },
}

impl PrototypeVariant {
    pub fn moving_avg() -> Self {
        PrototypeVariant::MovingAvg { rho: 0.7 }
    }

    pub fn curriculum() -> Self {
        PrototypeVariant::Curriculum {
            tau_start: 0.5,
            tau_end: 0.9,
        }
    }

    /// Curriculum threshold at `progress` in [0, 1].
    pub fn threshold(&self, progress: f64) -> Option<f64> {
        match *self {
            PrototypeVariant::Curriculum { tau_start, tau_end } => {
                Some(tau_start + (tau_end - tau_start) * progress.clamp(0.0, 1.0))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferKind {
    Dann,
    Mdd,
    MddMasked,
    /// Unmasked MDD plus the prototype distance.
    ExplicitPrototype(PrototypeVariant),
}

impl TransferKind {
    pub fn uses_mask(self) -> bool {
        matches!(self, TransferKind::MddMasked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferLossConfig {
    #[serde(flatten)]
    pub kind: TransferKind,
    /// Weight of the transfer term against the source loss.
    pub eta: f64,
    /// MDD margin factor on the source term.
    pub gamma: f64,
}

impl TransferLossConfig {
    pub fn new(kind: TransferKind) -> Self {
        Self {
            kind,
            eta: 1.0,
            gamma: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            errs.push(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            errs.push(format!("gamma must be >= 1, got {}", self.gamma));
        }
        match self.kind {
            TransferKind::ExplicitPrototype(PrototypeVariant::MovingAvg { rho })
                if !(0.0..1.0).contains(&rho) =>
            {
                errs.push(format!("rho must lie in [0, 1), got {rho}"));
            }
            TransferKind::ExplicitPrototype(PrototypeVariant::Curriculum { tau_start, tau_end })
                if !((0.0..=1.0).contains(&tau_start) && (0.0..=1.0).contains(&tau_end)) =>
            {
                errs.push(format!("tau must lie in [0, 1], got {tau_start}..{tau_end}"));
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Mean softmax cross-entropy on the source half.
pub fn source_classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    labels: &[usize],
) -> Result<Var, ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyHalf("source"));
    }
    Ok(tape.cross_entropy(logits, labels, None)?)
}

/// Domain-classification loss on stacked features `z` (the first
/// `num_source` rows are source). The discriminator sees `z` through a
/// gradient reversal layer with coefficient `lambda`.
pub fn dann_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &BoundModel,
    z: Var,
    num_source: usize,
    lambda: S,
) -> Result<Var, ObjectiveError> {
    let (m, _) = tape.value(z).dims2("dann_loss")?;
    if num_source == 0 {
        return Err(ObjectiveError::EmptyHalf("source"));
    }
    if num_source >= m {
        return Err(ObjectiveError::EmptyHalf("target"));
    }
    let r = tape.gradient_reversal(z, lambda)?;
    let d = model.discriminator(tape, r)?;
    let targets: Vec<S> = (0..m)
        .map(|i| if i < num_source { S::one() } else { S::zero() })
        .collect();
    Ok(tape.bce_with_logits(d, &targets)?)
}

fn masked_argmax<S: Scalar>(row: &[S], mask: Option<&[bool]>) -> usize {
    match mask {
        None => argmax(row),
        Some(mk) => {
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if mk[j] && best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            best.expect("mask has at least one class")
        }
    }
}

/// Predicted labels of `logits` restricted to the mask's support.
pub fn predicted_labels<S: Scalar>(
    logits: &Tensor<S>,
    mask: Option<&[bool]>,
) -> Result<Vec<usize>, TensorError> {
    let (_, n) = logits.dims2("predicted_labels")?;
    if let Some(mk) = mask {
        if mk.len() != n {
            return Err(TensorError::MaskLength {
                mask: mk.len(),
                cols: n,
            });
        }
        if !mk.iter().any(|&b| b) {
            return Err(TensorError::EmptyMask);
        }
    }
    Ok(logits
        .values()
        .chunks(n)
        .map(|r| masked_argmax(r, mask))
        .collect())
}

/// MDD transfer loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct MddTerms {
    /// `gamma * CE(f'(x_s), y_hat) + mean_t[-log(1 - p'_{y_hat}(x_t))]`,
    /// minimised by the auxiliary head.
    pub loss: Var,
    /// Source part, already multiplied by gamma.
    pub source_term: f64,
    pub target_term: f64,
}

impl MddTerms {
    /// The discrepancy the auxiliary head ascends: the negated loss.
    pub fn discrepancy(&self) -> f64 {
        -(self.source_term + self.target_term)
    }
}

/// Classifier discrepancy between the main head `f` and the auxiliary head
/// `f'`. Labels `y_hat` are the (masked) argmax of `f` and carry no gradient.
/// With a mask every softmax is restricted to the classes it marks.
pub fn mdd_discrepancy<S: Scalar>(
    tape: &mut Tape<S>,
    f_source: Var,
    fp_source: Var,
    f_target: Var,
    fp_target: Var,
    gamma: S,
    mask: Option<&[bool]>,
) -> Result<MddTerms, ObjectiveError> {
    let ys = predicted_labels(tape.value(f_source), mask)?;
    let yt = predicted_labels(tape.value(f_target), mask)?;
    if ys.is_empty() {
        return Err(ObjectiveError::EmptyHalf("source"));
    }
    if yt.is_empty() {
        return Err(ObjectiveError::EmptyHalf("target"));
    }
    let ce = tape.cross_entropy(fp_source, &ys, mask)?;
    let src = tape.scale(ce, gamma);
    let tgt = tape.complement_nll(fp_target, &yt, mask, S::of(MDD_FLOOR))?;
    let source_term = tape.scalar_value(src).as_f64();
    let target_term = tape.scalar_value(tgt).as_f64();
    let loss = tape.add(src, tgt)?;
    Ok(MddTerms {
        loss,
        source_term,
        target_term,
    })
}

/// Per-domain, per-class prototypes carried across steps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrototypeBank {
    source: Vec<Option<Vec<f64>>>,
    target: Vec<Option<Vec<f64>>>,
}

impl PrototypeBank {
    pub fn new(num_classes: usize) -> Self {
        Self {
            source: vec![None; num_classes],
            target: vec![None; num_classes],
        }
    }

    pub fn source(&self, class: usize) -> Option<&[f64]> {
        self.source[class].as_deref()
    }

    pub fn target(&self, class: usize) -> Option<&[f64]> {
        self.target[class].as_deref()
    }

    /// Classes observed at least once in both domains.
    pub fn observed(&self) -> Vec<bool> {
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, t)| s.is_some() && t.is_some())
            .collect()
    }

    fn slot(&mut self, source: bool, class: usize) -> &mut Option<Vec<f64>> {
        if source {
            &mut self.source[class]
        } else {
            &mut self.target[class]
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PrototypeLoss {
    pub loss: Var,
    /// Classes present in both halves.
    pub shared: usize,
}

/// Prototype of `class` on the tape: the batch mean, or for the moving
/// average `rho * old + (1 - rho) * mean` with the first observation taken as is.
fn prototype<S: Scalar>(
    tape: &mut Tape<S>,
    z: Var,
    rows: &[usize],
    old: Option<&[f64]>,
    rho: Option<f64>,
) -> Result<(Var, Vec<f64>), TensorError> {
    let g = tape.gather_rows(z, rows)?;
    let mut c = tape.mean_rows(g)?;
    if let (Some(rho), Some(old)) = (rho, old) {
        let prev = tape.constant(Tensor::vector(old.iter().map(|&v| S::of(v * rho)).collect()));
        let fresh = tape.scale(c, S::of(1.0 - rho));
        c = tape.add(fresh, prev)?;
    }
    let detached = tape.value(c).values().iter().map(|v| v.as_f64()).collect();
    Ok((c, detached))
}

/// Sum over shared classes of the squared Euclidean distance between source
/// and target prototypes. `keep_target` drops target rows (curriculum).
/// The bank is updated with the new prototypes for the moving-average variant.
#[allow(clippy::too_many_arguments)]
pub fn explicit_prototype_loss<S: Scalar>(
    tape: &mut Tape<S>,
    z_source: Var,
    y_source: &[usize],
    z_target: Var,
    y_target: &[usize],
    keep_target: Option<&[bool]>,
    bank: &mut PrototypeBank,
    variant: &PrototypeVariant,
) -> Result<PrototypeLoss, ObjectiveError> {
    let c = bank.source.len();
    let rho = match *variant {
        PrototypeVariant::MovingAvg { rho } => Some(rho),
        _ => None,
    };
    let mut rows_s = vec![Vec::new(); c];
    let mut rows_t = vec![Vec::new(); c];
    y_source.iter().enumerate().for_each(|(i, &y)| rows_s[y].push(i));
    for (i, &y) in y_target.iter().enumerate() {
        if keep_target.is_none_or(|k| k[i]) {
            rows_t[y].push(i);
        }
    }
    let mut total: Option<Var> = None;
    let mut shared = 0;
    for j in 0..c {
        let mut protos = Vec::with_capacity(2);
        for (is_source, z, rows) in [(true, z_source, &rows_s[j]), (false, z_target, &rows_t[j])] {
            if rows.is_empty() {
                continue;
            }
            let old = bank.slot(is_source, j).clone();
            let (v, detached) = prototype(tape, z, rows, old.as_deref(), rho)?;
            if rho.is_some() {
                *bank.slot(is_source, j) = Some(detached);
            }
            protos.push(v);
        }
        if let [cs, ct] = protos[..] {
            let d = tape.sub(cs, ct)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
            shared += 1;
        }
    }
    let loss = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    Ok(PrototypeLoss { loss, shared })
}

/// Inputs of one optimisation step; source rows come first.
#[derive(Debug, Clone)]
pub struct StepBatch<S> {
    pub inputs: Tensor<S>,
    pub num_source: usize,
    pub source_labels: Vec<usize>,
    /// Class mask of the batch; used only by the masked objective.
    pub mask: Vec<bool>,
}

impl<S: Scalar> StepBatch<S> {
    pub fn new(
        source: &[f64],
        source_labels: Vec<usize>,
        target: &[f64],
        dim: usize,
        mask: Vec<bool>,
    ) -> Result<Self, TensorError> {
        let rows = (source.len() + target.len()) / dim.max(1);
        let values = source.iter().chain(target).map(|&v| S::of(v)).collect();
        Ok(Self {
            inputs: Tensor::new(vec![rows, dim], values)?,
            num_source: source_labels.len(),
            source_labels,
            mask,
        })
    }

    pub fn num_target(&self) -> usize {
        self.inputs.shape()[0] - self.num_source
    }
}

/// Scalar summary of one step's loss graph.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    /// `source + eta * transfer`; call `backward` on this.
    pub total: Var,
    pub source_loss: f64,
    /// Unweighted transfer term (adversarial plus prototype parts).
    pub transfer_loss: f64,
    /// Part of the transfer term routed through gradient reversal.
    pub adversarial_loss: f64,
    pub prototype_loss: Option<f64>,
    pub prototype_classes: Option<usize>,
    /// Negated MDD loss, for the MDD-based kinds.
    pub discrepancy: Option<f64>,
}

/// Full minimax objective for one batch. `progress` in [0, 1] drives the
/// curriculum threshold; `bank` is required by the prototype kinds.
pub fn total_step_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &BoundModel,
    config: &TransferLossConfig,
    batch: &StepBatch<S>,
    lambda: S,
    progress: f64,
    bank: Option<&mut PrototypeBank>,
) -> Result<StepLoss, ObjectiveError> {
    let ns = batch.num_source;
    let m = batch.inputs.shape()[0];
    if ns == 0 {
        return Err(ObjectiveError::EmptyHalf("source"));
    }
    if ns >= m {
        return Err(ObjectiveError::EmptyHalf("target"));
    }
    let src_rows: Vec<usize> = (0..ns).collect();
    let tgt_rows: Vec<usize> = (ns..m).collect();

    let x = tape.constant(batch.inputs.clone());
    let z = model.features(tape, x)?;
    let logits = model.classifier(tape, z)?;
    let logits_s = tape.gather_rows(logits, &src_rows)?;
    let source = source_classification_loss(tape, logits_s, &batch.source_labels)?;
    let mut out = StepLoss {
        total: source,
        source_loss: tape.scalar_value(source).as_f64(),
        transfer_loss: 0.0,
        adversarial_loss: 0.0,
        prototype_loss: None,
        prototype_classes: None,
        discrepancy: None,
    };
    if config.eta == 0.0 {
        return Ok(out);
    }

    let transfer = match config.kind {
        TransferKind::Dann => dann_loss(tape, model, z, ns, lambda)?,
        TransferKind::Mdd | TransferKind::MddMasked | TransferKind::ExplicitPrototype(_) => {
            let mask = config.kind.uses_mask().then_some(batch.mask.as_slice());
            let r = tape.gradient_reversal(z, lambda)?;
            let aux = model.auxiliary(tape, r)?;
            let fp_s = tape.gather_rows(aux, &src_rows)?;
            let fp_t = tape.gather_rows(aux, &tgt_rows)?;
            let f_t = tape.gather_rows(logits, &tgt_rows)?;
            let terms = mdd_discrepancy(tape, logits_s, fp_s, f_t, fp_t, S::of(config.gamma), mask)?;
            out.discrepancy = Some(terms.discrepancy());
            out.adversarial_loss = tape.scalar_value(terms.loss).as_f64();
            match config.kind {
                TransferKind::ExplicitPrototype(variant) => {
                    let bank = bank.ok_or_else(|| {
                        ObjectiveError::Config("prototype objective needs a prototype bank".into())
                    })?;
                    let f_t_vals = tape.value(f_t).clone();
                    let y_t = predicted_labels(&f_t_vals, None)?;
                    let keep = variant
                        .threshold(progress)
                        .map(|tau| confident_rows(&f_t_vals, tau));
                    let zs = tape.gather_rows(z, &src_rows)?;
                    let zt = tape.gather_rows(z, &tgt_rows)?;
                    let p = explicit_prototype_loss(
                        tape,
                        zs,
                        &batch.source_labels,
                        zt,
                        &y_t,
                        keep.as_deref(),
                        bank,
                        &variant,
                    )?;
                    out.prototype_loss = Some(tape.scalar_value(p.loss).as_f64());
                    out.prototype_classes = Some(p.shared);
                    tape.add(terms.loss, p.loss)?
                }
                _ => terms.loss,
            }
        }
    };
    if matches!(config.kind, TransferKind::Dann) {
        out.adversarial_loss = tape.scalar_value(transfer).as_f64();
    }
    out.transfer_loss = tape.scalar_value(transfer).as_f64();
    let weighted = tape.scale(transfer, S::of(config.eta));
    out.total = tape.add(source, weighted)?;
    Ok(out)
}

/// Rows whose maximum softmax probability reaches `tau`.
fn confident_rows<S: Scalar>(logits: &Tensor<S>, tau: f64) -> Vec<bool> {
    let n = logits.shape()[1];
    logits
        .values()
        .chunks(n)
        .map(|r| {
            let mx = r.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let denom: f64 = r.iter().map(|&v| (v - mx).as_f64().exp()).sum();
            1.0 / denom >= tau
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdaptationModel, Architecture, Part};
    use crate::optim::{SgdConfig, SgdState};
    use crate::rng::{substream, Stream};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn source_loss_matches_scalar_oracle() {
        let logits = [0.2, -1.0, 0.5, 1.5, 0.0, -0.3, -2.0, 0.7, 0.1];
        let labels = [2, 0, 1];
        let oracle: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let r = &logits[i * 3..i * 3 + 3];
                let lse = r.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
                lse - r[y]
            })
            .sum::<f64>()
            / 3.0;
        let mut tape = Tape::new();
        let l = tape.constant(t(&[3, 3], &logits));
        let loss = source_classification_loss(&mut tape, l, &labels).unwrap();
        assert!((tape.scalar_value(loss) - oracle).abs() < 1e-14);

        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 4], &[0.0; 8]));
        let loss = source_classification_loss(&mut tape, l, &[0, 3]).unwrap();
        assert!((tape.scalar_value(loss) - 4f64.ln()).abs() < 1e-15);

        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2], &[80.0, -80.0]));
        let loss = source_classification_loss(&mut tape, l, &[0]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-30);
    }

    #[test]
    fn mdd_hand_value() {
        // Source: f' certain of f's label, so the source term vanishes.
        // Target: p'_{y_hat} = 0.5, so the target term is ln 2.
        let mut tape = Tape::new();
        let f_s = tape.constant(t(&[1, 2], &[3.0, 0.0]));
        let fp_s = tape.leaf(t(&[1, 2], &[200.0, 0.0]).with_grad());
        let f_t = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let fp_t = tape.leaf(t(&[1, 2], &[0.0, 0.0]).with_grad());
        let terms = mdd_discrepancy(&mut tape, f_s, fp_s, f_t, fp_t, 4.0, None).unwrap();
        assert!((tape.scalar_value(terms.loss) - 2f64.ln()).abs() < 1e-12);
        assert!(terms.source_term.abs() < 1e-12);
        assert!((terms.discrepancy() + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mdd_mask_rejects_empty_support() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 1.0]));
        let r = mdd_discrepancy(&mut tape, a, a, a, a, 4.0, Some(&[false, false]));
        assert!(matches!(r, Err(ObjectiveError::Tensor(TensorError::EmptyMask))));
    }

    #[test]
    fn masked_shortcut_value_is_lower() {
        // Source batch is class 0, target batch class 1; f is an oracle.
        // The shortcut f' agrees with f on source and puts all target mass on
        // class 2, outside the sampled set {0}.
        let f_s = [9.0, 0.0, 0.0];
        let f_t = [0.0, 9.0, 0.0];
        let fp_s = [30.0, 0.0, 0.0];
        let fp_t = [0.0, 0.0, 30.0];
        let eval = |mask: Option<&[bool]>| {
            let mut tape = Tape::new();
            let a = tape.constant(t(&[1, 3], &f_s));
            let b = tape.constant(t(&[1, 3], &fp_s));
            let c = tape.constant(t(&[1, 3], &f_t));
            let d = tape.constant(t(&[1, 3], &fp_t));
            mdd_discrepancy(&mut tape, a, b, c, d, 4.0, mask).unwrap().discrepancy()
        };
        let unmasked = eval(None);
        let masked = eval(Some(&[true, false, false]));
        assert!(unmasked > -1e-9);
        assert!((masked - MDD_FLOOR.ln()).abs() < 1e-9);
        assert!(masked < unmasked);
    }

    #[test]
    fn prototype_hand_distance() {
        let mut tape = Tape::new();
        let zs = tape.constant(t(&[2, 2], &[-1.0, 1.0, 1.0, -1.0]));
        let zt = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let mut bank = PrototypeBank::new(2);
        let p = explicit_prototype_loss(&mut tape, zs, &[0, 0], zt, &[0], None, &mut bank, &PrototypeVariant::Basic)
            .unwrap();
        assert_eq!(tape.scalar_value(p.loss), 25.0);
        assert_eq!(p.shared, 1);

        let mut tape = Tape::new();
        let zs = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let zt = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let p = explicit_prototype_loss(&mut tape, zs, &[0], zt, &[1], None, &mut bank, &PrototypeVariant::Basic)
            .unwrap();
        assert_eq!(p.shared, 0);
        assert_eq!(tape.scalar_value(p.loss), 0.0);
    }

    #[test]
    fn prototype_is_symmetric() {
        let zs_v = [0.3, -1.2, 2.0, 0.5, -0.7, 1.1];
        let zt_v = [1.0, 0.0, -0.4, 0.9];
        let run = |swap: bool| {
            let mut tape = Tape::new();
            let a = tape.constant(t(&[3, 2], &zs_v));
            let b = tape.constant(t(&[2, 2], &zt_v));
            let mut bank = PrototypeBank::new(2);
            let (za, ya, zb, yb): (Var, &[usize], Var, &[usize]) =
                if swap { (b, &[1, 0], a, &[0, 1, 0]) } else { (a, &[0, 1, 0], b, &[1, 0]) };
            let p = explicit_prototype_loss(&mut tape, za, ya, zb, yb, None, &mut bank, &PrototypeVariant::Basic)
                .unwrap();
            tape.scalar_value(p.loss)
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn moving_average_matches_closed_form() {
        let rho = 0.7;
        let batches = [[1.0, 2.0, 3.0, 6.0], [-1.0, 0.0, 5.0, 2.0]];
        let mut bank = PrototypeBank::new(1);
        for b in &batches {
            let mut tape = Tape::new();
            let zs = tape.constant(t(&[2, 2], b));
            let zt = tape.constant(t(&[1, 2], &[0.0, 0.0]));
            explicit_prototype_loss(&mut tape, zs, &[0, 0], zt, &[0], None, &mut bank, &PrototypeVariant::MovingAvg { rho })
                .unwrap();
        }
        let m1 = [2.0, 4.0];
        let m2 = [2.0, 1.0];
        let expected: Vec<f64> = (0..2).map(|i| rho * m1[i] + (1.0 - rho) * m2[i]).collect();
        let got = bank.source(0).unwrap();
        for i in 0..2 {
            assert!((got[i] - expected[i]).abs() < 1e-12);
        }
        assert_eq!(bank.target(0).unwrap(), &[0.0, 0.0]);
        assert_eq!(bank.observed(), vec![true]);
    }

    #[test]
    fn curriculum_threshold_ramps() {
        let v = PrototypeVariant::curriculum();
        assert_eq!(v.threshold(0.0), Some(0.5));
        assert!((v.threshold(1.0).unwrap() - 0.9).abs() < 1e-15);
        assert!((v.threshold(0.5).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(PrototypeVariant::Basic.threshold(0.3), None);
    }

    #[test]
    fn config_validation_lists_every_problem() {
        let mut c = TransferLossConfig::new(TransferKind::ExplicitPrototype(PrototypeVariant::MovingAvg { rho: 1.0 }));
        c.eta = -1.0;
        c.gamma = 0.5;
        assert_eq!(c.validate().unwrap_err().len(), 3);
        assert!(TransferLossConfig::new(TransferKind::Mdd).validate().is_ok());
    }

    fn small_model(seed: u64) -> AdaptationModel<f64> {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![6],
            feature_dim: 4,
            num_classes: 3,
            head_hidden: 5,
        };
        AdaptationModel::new(arch, &mut substream(seed, Stream::Init)).unwrap()
    }

    fn batch() -> StepBatch<f64> {
        let xs = [0.5, -1.0, 1.5, 0.3, -0.8, 0.9, 0.1, 0.2];
        let xt = [1.0, 1.0, -0.5, 0.4, 0.7, -1.2];
        StepBatch::new(&xs, vec![0, 1, 2, 1], &xt, 2, vec![true, true, false]).unwrap()
    }

    fn grads(model: &AdaptationModel<f64>, cfg: &TransferLossConfig, lambda: f64) -> (AdaptationModel<f64>, StepLoss) {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let mut bank = PrototypeBank::new(3);
        let l = total_step_loss(&mut tape, &b, cfg, &batch(), lambda, 0.0, Some(&mut bank)).unwrap();
        tape.backward(l.total).unwrap();
        m.zero_grad();
        m.accumulate_grads(&tape, &b);
        (m, l)
    }

    #[test]
    fn eta_zero_is_plain_source_loss() {
        let model = small_model(4);
        let mut cfg = TransferLossConfig::new(TransferKind::Mdd);
        cfg.eta = 0.0;
        let (m, l) = grads(&model, &cfg, 0.1);
        let x = t(&[4, 2], &[0.5, -1.0, 1.5, 0.3, -0.8, 0.9, 0.1, 0.2]);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let xv = tape.constant(x);
        let z = b.features(&mut tape, xv).unwrap();
        let lo = b.classifier(&mut tape, z).unwrap();
        let direct = source_classification_loss(&mut tape, lo, &[0, 1, 2, 1]).unwrap();
        assert_eq!(l.source_loss, tape.scalar_value(direct));
        assert_eq!(l.transfer_loss, 0.0);
        for p in &m.params()[m.group(Part::Auxiliary)] {
            assert!(p.tensor.grad.is_none());
        }
    }

    #[test]
    fn dann_reversal_at_zero_lambda() {
        let model = small_model(6);
        let mut cfg = TransferLossConfig::new(TransferKind::Dann);
        cfg.eta = 1.0;
        let (with, _) = grads(&model, &cfg, 0.0);
        cfg.eta = 0.0;
        let (without, _) = grads(&model, &cfg, 0.0);
        for i in with.group(Part::Features) {
            assert_eq!(with.params()[i].tensor.grad, without.params()[i].tensor.grad);
        }
        let disc_grad: f64 = with.params()[with.group(Part::Discriminator)]
            .iter()
            .flat_map(|p| p.tensor.grad.clone().unwrap())
            .map(f64::abs)
            .sum();
        assert!(disc_grad > 0.0);
    }

    #[test]
    fn dann_at_half_probability_is_ln2() {
        let model = small_model(6);
        let mut m = model.clone();
        for i in m.group(Part::Discriminator) {
            m.params_mut()[i].tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let z = tape.constant(t(&[4, 4], &[0.3; 16]));
        let l = dann_loss(&mut tape, &b, z, 2, 0.1).unwrap();
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(dann_loss(&mut tape, &b, z, 0, 0.1), Err(ObjectiveError::EmptyHalf("source"))));
        assert!(matches!(dann_loss(&mut tape, &b, z, 4, 0.1), Err(ObjectiveError::EmptyHalf("target"))));
    }

    #[test]
    fn auxiliary_step_ascends_discrepancy() {
        let model = small_model(8);
        for kind in [TransferKind::Mdd, TransferKind::MddMasked] {
            let cfg = TransferLossConfig::new(kind);
            let (mut m, before) = grads(&model, &cfg, 0.1);
            let mut opt = SgdState::new();
            let sgd = SgdConfig {
                learning_rate: 1e-3,
                nesterov_momentum: 0.0,
                weight_decay: 0.0,
            };
            opt.step_part(&mut m, Part::Auxiliary, &sgd).unwrap();
            let (_, after) = grads(&m, &cfg, 0.1);
            assert!(after.discrepancy.unwrap() >= before.discrepancy.unwrap());
        }
    }
}
