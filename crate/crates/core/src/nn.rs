//! Adaptation model: feature extractor, main classifier, auxiliary classifier
//! and domain discriminator, all small relu MLPs over a shared representation.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected input of width {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer widths for each part of the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub head_hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            feature_dim: 64,
            num_classes,
            head_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [self.input_dim, self.feature_dim, self.num_classes, self.head_hidden];
        if widths.contains(&0) || self.hidden.contains(&0) {
            return Err(ModelError::Architecture(format!("zero width in {self:?}")));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Architecture("need at least 2 classes".into()));
        }
        Ok(())
    }

    fn widths(&self, part: Part) -> Vec<usize> {
        match part {
            Part::Features => {
                let mut w = vec![self.input_dim];
                w.extend(&self.hidden);
                w.push(self.feature_dim);
                w
            }
            Part::Classifier | Part::Auxiliary => {
                vec![self.feature_dim, self.head_hidden, self.num_classes]
            }
            Part::Discriminator => vec![self.feature_dim, self.head_hidden, 1],
        }
    }
}

/// The four parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Features,
    Classifier,
    Auxiliary,
    Discriminator,
}

impl Part {
    pub const ALL: [Part; 4] = [
        Part::Features,
        Part::Classifier,
        Part::Auxiliary,
        Part::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Part::Features => "features",
            Part::Classifier => "classifier",
            Part::Auxiliary => "auxiliary",
            Part::Discriminator => "discriminator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Weight decay applies to weight matrices, not biases.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationModel<S> {
    arch: Architecture,
    params: Vec<Param<S>>,
    groups: [Range<usize>; 4],
}

/// Model parameters registered on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: Vec<Var>,
    groups: [Range<usize>; 4],
}

impl BoundModel {
    fn layers(&self, part: Part) -> impl Iterator<Item = (Var, Var)> + '_ {
        self.vars[self.groups[part as usize].clone()]
            .chunks(2)
            .map(|c| (c[0], c[1]))
    }

    fn mlp<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        part: Part,
        x: Var,
        relu_last: bool,
    ) -> Result<Var, TensorError> {
        let layers: Vec<_> = self.layers(part).collect();
        let mut h = x;
        for (i, (w, b)) in layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row(h, *b)?;
            if relu_last || i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Representation z = phi(x); relu after every layer.
    pub fn features<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var, TensorError> {
        self.mlp(tape, Part::Features, x, true)
    }

    pub fn classifier<S: Scalar>(&self, tape: &mut Tape<S>, z: Var) -> Result<Var, TensorError> {
        self.mlp(tape, Part::Classifier, z, false)
    }

    pub fn auxiliary<S: Scalar>(&self, tape: &mut Tape<S>, z: Var) -> Result<Var, TensorError> {
        self.mlp(tape, Part::Auxiliary, z, false)
    }

    pub fn discriminator<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        z: Var,
    ) -> Result<Var, TensorError> {
        self.mlp(tape, Part::Discriminator, z, false)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl<S: Scalar> AdaptationModel<S> {
    /// Uniform He initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self, ModelError> {
        Self::build(arch, |fan_in, n| {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect()
        })
    }

    fn build(
        arch: Architecture,
        mut init: impl FnMut(usize, usize) -> Vec<S>,
    ) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut groups: [Range<usize>; 4] = Default::default();
        for part in Part::ALL {
            let start = params.len();
            for (i, pair) in arch.widths(part).windows(2).enumerate() {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                params.push(Param {
                    name: format!("{}.{i}.weight", part.name()),
                    tensor: Tensor::new(vec![fan_in, fan_out], init(fan_in, fan_in * fan_out))?
                        .with_grad(),
                    decay: true,
                });
                params.push(Param {
                    name: format!("{}.{i}.bias", part.name()),
                    tensor: Tensor::zeros(vec![fan_out]).with_grad(),
                    decay: false,
                });
            }
            groups[part as usize] = start..params.len();
        }
        Ok(Self {
            arch,
            params,
            groups,
        })
    }

    /// Rebuilds a model from named parameters, checking every shape.
    pub fn from_params(arch: Architecture, tensors: Vec<(String, Tensor<S>)>) -> Result<Self, ModelError> {
        let mut template = Self::build(arch, |_, n| vec![S::zero(); n])?;
        if tensors.len() != template.params.len() {
            return Err(ModelError::Architecture(format!(
                "expected {} parameters, got {}",
                template.params.len(),
                tensors.len()
            )));
        }
        for (p, (name, t)) in template.params.iter_mut().zip(tensors) {
            if p.name != name || p.tensor.shape() != t.shape() {
                return Err(ModelError::Architecture(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(t.shape().to_vec(), t.into_values())?.with_grad();
        }
        Ok(template)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn group(&self, part: Part) -> Range<usize> {
        self.groups[part as usize].clone()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> BoundModel {
        let vars = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        BoundModel {
            vars,
            groups: self.groups.clone(),
        }
    }

    /// Copies leaf gradients from a completed backward pass into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, bound: &BoundModel) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn input_tensor(&self, x: &[f64], rows: usize) -> Result<Tensor<S>, ModelError> {
        let d = self.arch.input_dim;
        if rows == 0 || x.len() != rows * d {
            return Err(ModelError::InputDim {
                expected: d,
                got: if rows == 0 { 0 } else { x.len() / rows },
            });
        }
        Ok(Tensor::new(vec![rows, d], x.iter().map(|&v| S::of(v)).collect())?)
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<(), ModelError> {
        let (_, d) = x.dims2("features")?;
        if d != self.arch.input_dim {
            return Err(ModelError::InputDim {
                expected: self.arch.input_dim,
                got: d,
            });
        }
        Ok(())
    }

    /// Representation `[batch, feature_dim]` for `x: [batch, input_dim]`.
    pub fn features(&self, x: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = b.features(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Main-classifier logits.
    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let z = b.features(&mut tape, xv)?;
        let l = b.classifier(&mut tape, z)?;
        let mut out = tape.value(l).clone();
        out.requires_grad = false;
        Ok(out)
    }

    /// Class probabilities from the main classifier; rows sum to one.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>, ModelError> {
        let logits = self.logits(x)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let p = tape.softmax(l, None)?;
        Ok(tape.value(p).clone())
    }

    /// Argmax labels of the main classifier, ties to the smallest label.
    pub fn predict_label(&self, x: &Tensor<S>) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(x)?;
        let c = self.arch.num_classes;
        Ok(logits.values().chunks(c).map(argmax).collect())
    }

    pub fn cast<T: Scalar>(&self) -> AdaptationModel<T> {
        AdaptationModel {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            groups: self.groups.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn small() -> AdaptationModel<f64> {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![8],
            feature_dim: 5,
            num_classes: 4,
            head_hidden: 6,
        };
        AdaptationModel::new(arch, &mut substream(1, Stream::Init)).unwrap()
    }

    #[test]
    fn feature_shape_contract() {
        let m = small();
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(m.features(&x).unwrap().shape(), &[5, 5]);
        let bad = Tensor::<f64>::zeros(vec![5, 4]);
        assert!(matches!(m.features(&bad), Err(ModelError::InputDim { expected: 3, got: 4 })));
    }

    #[test]
    fn single_row_matches_batch_row() {
        let m = small();
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![4, 3], vals.clone()).unwrap();
        let batch = m.features(&x).unwrap();
        for i in 0..4 {
            let xi = Tensor::new(vec![1, 3], vals[i * 3..i * 3 + 3].to_vec()).unwrap();
            assert_eq!(m.features(&xi).unwrap().values(), batch.row(i));
        }
    }

    #[test]
    fn argmax_rule() {
        assert_eq!(argmax(&[2.0, 1.0, 1.0]), 0);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn predict_rows_sum_to_one() {
        let m = small();
        let x = Tensor::new(vec![3, 3], vec![0.1, -2.0, 3.0, 1.0, 1.0, 1.0, -5.0, 0.0, 2.5]).unwrap();
        let p = m.predict(&x).unwrap();
        for r in p.values().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let labels = m.predict_label(&x).unwrap();
        assert!(labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn initialisation_is_seeded() {
        assert_eq!(small(), small());
        let arch = small().architecture().clone();
        let other = AdaptationModel::<f64>::new(arch, &mut substream(2, Stream::Init)).unwrap();
        assert_ne!(small(), other);
    }

    #[test]
    fn heads_share_feature_width() {
        let m = small();
        let names: Vec<_> = m.params().iter().map(|p| (p.name.as_str(), p.tensor.shape().to_vec())).collect();
        assert!(names.contains(&("classifier.1.weight", vec![6, 4])));
        assert!(names.contains(&("auxiliary.1.weight", vec![6, 4])));
        assert!(names.contains(&("discriminator.0.weight", vec![5, 6])));
        assert!(names.contains(&("discriminator.1.weight", vec![6, 1])));
    }
}
