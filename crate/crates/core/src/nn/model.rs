use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Scalar, Tape, Tensor, Var};
use crate::analysis::RankedLogits;
use crate::error::{Error, Result};
use crate::losses::{evaluate, LossEvaluation, LossKind};
use crate::precision::PrecisionProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs, inputs]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }
}

/// A stack of dense layers; every hidden layer uses a rectifier and the last
/// one is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<DenseLayer>,
}

/// Input width plus every layer width, e.g. `[784, 128, 64, 10]`.
pub const DESK_ARCH: [usize; 4] = [784, 128, 64, 10];

impl ModelWeights {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::ShapeMismatch { expected: pair[0].outputs, got: pair[1].inputs });
            }
        }
        for layer in &layers {
            if layer.weight.len() != layer.inputs * layer.outputs {
                return Err(Error::ShapeMismatch {
                    expected: layer.inputs * layer.outputs,
                    got: layer.weight.len(),
                });
            }
            if layer.bias.len() != layer.outputs {
                return Err(Error::ShapeMismatch { expected: layer.outputs, got: layer.bias.len() });
            }
        }
        Ok(Self { layers })
    }

    /// All-zero model with rectified hidden layers.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig("need an input and an output width".into()));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        Self::new(layers)
    }

    /// He-normal weights, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let std = (2.0 / layer.inputs as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weight {
                *w = normal.sample(&mut rng) as f32;
            }
        }
        Ok(model)
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::ShapeMismatch { expected: self.input_width(), got: x.len() });
        }
        Ok(())
    }

    /// Records the network on `tape` for a `[batch, inputs]` input. Returns
    /// the logits and the parameter vars (weight, bias per layer).
    pub(crate) fn record<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        trainable: bool,
    ) -> (Var, Vec<(Var, Var)>) {
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = Tensor::new(
                vec![layer.outputs, layer.inputs],
                layer.weight.iter().map(|&v| T::from(v).unwrap()).collect(),
            );
            let b = Tensor::new(
                vec![layer.outputs],
                layer.bias.iter().map(|&v| T::from(v).unwrap()).collect(),
            );
            let (w, b) = if trainable {
                (tape.input(w), tape.input(b))
            } else {
                (tape.constant(w), tape.constant(b))
            };
            h = tape.affine(h, w, b);
            if layer.activation == Activation::Relu {
                h = tape.relu(h);
            }
            params.push((w, b));
        }
        (h, params)
    }

    /// Logits for a batch of flattened inputs.
    pub fn forward_batch(&self, xs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let x = tape.constant(Tensor::new(vec![xs.len(), self.input_width()], data));
        let (z, _) = self.record(&mut tape, x, false);
        let z = tape.value(z);
        Ok((0..xs.len()).map(|r| z.row(r).to_vec()).collect())
    }
}

/// Logits of one input in 32-bit.
pub fn forward(model: &ModelWeights, x: &[f32]) -> Result<Vec<f32>> {
    Ok(model.forward_batch(&[x])?.remove(0))
}

/// Logits of one input in any working type (64-bit is the check mode).
pub fn forward_in<T: Scalar>(model: &ModelWeights, x: &[T]) -> Result<Vec<T>> {
    if x.len() != model.input_width() {
        return Err(Error::ShapeMismatch { expected: model.input_width(), got: x.len() });
    }
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec()));
    let (z, _) = model.record(&mut tape, xv, false);
    Ok(tape.value(z).data.clone())
}

#[derive(Debug, Clone)]
pub struct InputGradient<T> {
    pub gradient: Vec<T>,
    pub logits: Vec<T>,
    pub loss: LossEvaluation,
}

/// Gradient of `loss` with respect to the input: forward on a tape, the loss's
/// analytic logit gradient as the seed, then a reverse sweep.
pub fn input_gradient(
    model: &ModelWeights,
    x: &[f32],
    loss: LossKind,
    label: usize,
    profile: &PrecisionProfile,
) -> Result<InputGradient<f32>> {
    input_gradient_in(model, x, loss, label, profile)
}

pub fn input_gradient_in<T: Scalar>(
    model: &ModelWeights,
    x: &[T],
    loss: LossKind,
    label: usize,
    profile: &PrecisionProfile,
) -> Result<InputGradient<T>> {
    input_gradient_with(model, x, |z| {
        let ranked = RankedLogits::new(z)?;
        evaluate(loss, &ranked, label, profile)
    })
}

/// Input gradient for an arbitrary logit-space loss.
pub fn input_gradient_with<T: Scalar>(
    model: &ModelWeights,
    x: &[T],
    loss: impl FnOnce(&[f64]) -> Result<LossEvaluation>,
) -> Result<InputGradient<T>> {
    if x.len() != model.input_width() {
        return Err(Error::ShapeMismatch { expected: model.input_width(), got: x.len() });
    }
    let mut tape = Tape::<T>::new();
    let xv = tape.input(Tensor::new(vec![1, x.len()], x.to_vec()));
    let (z, _) = model.record(&mut tape, xv, false);
    let logits = tape.value(z).data.clone();
    let wide: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let eval = loss(&wide)?;
    let seed = Tensor::new(
        vec![1, logits.len()],
        eval.logit_gradient.iter().map(|&g| T::from(g).unwrap()).collect(),
    );
    let mut grads = tape.backward(z, seed);
    let gradient = grads.take(xv).map(|t| t.data).unwrap_or_else(|| vec![T::zero(); x.len()]);
    Ok(InputGradient { gradient, logits, loss: eval })
}

/// Batched form of [`input_gradient_with`]: one tape for all rows, with
/// `loss(row, logits)` supplying each row's logit gradient. Rows do not
/// interact, so every row's result equals the single-input result.
pub fn input_gradient_batch<T: Scalar>(
    model: &ModelWeights,
    xs: &[&[T]],
    mut loss: impl FnMut(usize, &[f64]) -> Result<LossEvaluation>,
) -> Result<Vec<InputGradient<T>>> {
    let width = model.input_width();
    for x in xs {
        if x.len() != width {
            return Err(Error::ShapeMismatch { expected: width, got: x.len() });
        }
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::<T>::new();
    let data: Vec<T> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    let xv = tape.input(Tensor::new(vec![xs.len(), width], data));
    let (z, _) = model.record(&mut tape, xv, false);
    let zt = tape.value(z);
    let classes = zt.cols();
    let mut logits = Vec::with_capacity(xs.len());
    let mut evals = Vec::with_capacity(xs.len());
    let mut seed = Vec::with_capacity(xs.len() * classes);
    for r in 0..xs.len() {
        let row = zt.row(r).to_vec();
        let wide: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let eval = loss(r, &wide)?;
        seed.extend(eval.logit_gradient.iter().map(|&g| T::from(g).unwrap()));
        logits.push(row);
        evals.push(eval);
    }
    let mut grads = tape.backward(z, Tensor::new(vec![xs.len(), classes], seed));
    let gx = grads.take(xv).map(|t| t.data).unwrap_or_else(|| vec![T::zero(); xs.len() * width]);
    Ok(evals
        .into_iter()
        .zip(logits)
        .enumerate()
        .map(|(r, (loss, logits))| InputGradient {
            gradient: gx[r * width..(r + 1) * width].to_vec(),
            logits,
            loss,
        })
        .collect())
}
