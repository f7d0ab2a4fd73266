//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::nn::{AdaptationModel, ModelError};
use crate::scalar::Scalar;

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            counts[t][p] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Evaluation summary. Macro averages run over classes present in the
/// evaluated labels; `absent_classes` counts the ones left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    /// Mean recall over present classes.
    pub per_class_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub absent_classes: usize,
    /// `None` for absent classes.
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn report_from_confusion(confusion: ConfusionMatrix) -> Option<EvalReport> {
    let c = confusion.counts.len();
    let n = confusion.total();
    if n == 0 {
        return None;
    }
    let support: Vec<usize> = confusion.counts.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..c).map(|j| confusion.counts.iter().map(|r| r[j]).sum()).collect();
    let correct: usize = (0..c).map(|j| confusion.counts[j][j]).sum();

    let mut recall = vec![None; c];
    let mut precision = vec![None; c];
    let (mut mp, mut mr, mut mf, mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let present: Vec<usize> = (0..c).filter(|&j| support[j] > 0).collect();
    for &j in &present {
        let tp = confusion.counts[j][j];
        let r = ratio(tp, support[j]);
        // zero predictions for a present class count as zero precision
        let p = ratio(tp, predicted[j]);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        recall[j] = Some(r);
        precision[j] = Some(p);
        let w = support[j] as f64 / n as f64;
        mp += p;
        mr += r;
        mf += f;
        wp += w * p;
        wr += w * r;
        wf += w * f;
    }
    let k = present.len() as f64;
    Some(EvalReport {
        examples: n,
        accuracy: ratio(correct, n),
        per_class_accuracy: mr / k,
        macro_precision: mp / k,
        macro_recall: mr / k,
        macro_f1: mf / k,
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        absent_classes: c - present.len(),
        recall,
        precision,
        confusion,
    })
}

pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Option<EvalReport> {
    report_from_confusion(ConfusionMatrix::from_predictions(truth, predicted, num_classes))
}

/// Runs the main classifier over row-major `features` and scores it.
pub fn evaluate<S: Scalar>(
    model: &AdaptationModel<S>,
    features: &[f64],
    labels: &[usize],
) -> Result<Option<EvalReport>, ModelError> {
    if labels.is_empty() {
        return Ok(None);
    }
    let x = model.input_tensor(features, labels.len())?;
    let predicted = model.predict_label(&x)?;
    Ok(evaluate_predictions(labels, &predicted, model.architecture().num_classes))
}
