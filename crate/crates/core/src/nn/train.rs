use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward, input_gradient_batch, ModelWeights};
use super::tape::{Tape, Tensor};
use crate::analysis::RankedLogits;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ce_loss;

/// Projected sign-gradient inner loop used to craft training examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdTraining {
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub adversarial: Option<PgdTraining>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch: 64, learning_rate: 0.05, momentum: 0.9, seed: 0, adversarial: None }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if let Some(adv) = self.adversarial {
            if !(adv.eps >= 0.0 && adv.step_size >= 0.0) {
                return Err(Error::InvalidConfig("adversarial eps and step size must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch, on the (possibly adversarial) batches.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(model: &ModelWeights, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(256) {
        let xs: Vec<&[f32]> = chunk.iter().map(|&i| data.images[i].as_slice()).collect();
        let logits = model.forward_batch(&xs)?;
        for (z, &i) in logits.iter().zip(chunk) {
            if argmax(z) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(z: &[f32]) -> usize {
    // First maximal index, matching the stable ranking used elsewhere.
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Prediction for a single input.
pub fn predict(model: &ModelWeights, x: &[f32]) -> Result<usize> {
    Ok(argmax(&forward(model, x)?))
}

/// Trains `widths` from a seeded He initialization with cross-entropy and
/// momentum SGD. The same config and seed always give identical weights.
pub fn train(
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    widths: &[usize],
    config: &TrainConfig,
) -> Result<(ModelWeights, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if widths.first() != Some(&train_set.width) {
        return Err(Error::ShapeMismatch { expected: train_set.width, got: widths.first().copied().unwrap_or(0) });
    }
    if widths.last() != Some(&train_set.classes) {
        return Err(Error::ShapeMismatch { expected: train_set.classes, got: widths.last().copied().unwrap_or(0) });
    }
    let mut model = ModelWeights::init(widths, config.seed)?;
    let mut velocity: Vec<(Vec<f32>, Vec<f32>)> = model
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
        .collect();
    // A separate stream from the initializer keeps shuffling independent of
    // the architecture.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut xs: Vec<Vec<f32>> = chunk.iter().map(|&i| train_set.images[i].clone()).collect();
            if let Some(adv) = config.adversarial {
                perturb_batch(&model, &mut xs, &labels, adv, &mut rng)?;
            }

            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = xs.iter().flatten().copied().collect();
            let x = tape.constant(Tensor::new(vec![xs.len(), train_set.width], data));
            let (z, params) = model.record(&mut tape, x, true);
            let loss = tape.softmax_cross_entropy(z, &labels);
            let value = tape.value(loss).data[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value as f64 });
            }
            let mut grads = tape.backward(loss, Tensor::new(vec![1], vec![1.0]));
            for ((layer, (w, b)), (vw, vb)) in model.layers.iter_mut().zip(params).zip(&mut velocity) {
                let gw = grads.take(w).expect("trainable weight");
                let gb = grads.take(b).expect("trainable bias");
                sgd_step(&mut layer.weight, vw, &gw.data, config);
                sgd_step(&mut layer.bias, vb, &gb.data, config);
            }
            total += value as f64;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        epochs.push(EpochStats { epoch, loss: mean });
    }

    let report = TrainReport {
        epochs,
        train_accuracy: accuracy(&model, train_set)?,
        test_accuracy: test_set.map(|t| accuracy(&model, t)).transpose()?,
    };
    Ok((model, report))
}

fn sgd_step(param: &mut [f32], velocity: &mut [f32], grad: &[f32], config: &TrainConfig) {
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v + g;
        *p -= config.learning_rate * *v;
    }
}

/// Random start in the ℓ∞ ball, then `steps` signed cross-entropy ascent
/// steps, each projected back onto the ball and the unit box.
fn perturb_batch(
    model: &ModelWeights,
    xs: &mut [Vec<f32>],
    labels: &[usize],
    adv: PgdTraining,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if adv.eps == 0.0 {
        return Ok(());
    }
    let clean: Vec<Vec<f32>> = xs.to_vec();
    for (x, x0) in xs.iter_mut().zip(&clean) {
        for (v, &v0) in x.iter_mut().zip(x0) {
            let u: f32 = rng.random_range(-adv.eps..=adv.eps);
            *v = (v0 + u).clamp(0.0, 1.0);
        }
    }
    for _ in 0..adv.steps {
        let refs: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
        let grads = input_gradient_batch(model, &refs, |r, z| ce_loss(&RankedLogits::new(z)?, labels[r]))?;
        for ((x, x0), g) in xs.iter_mut().zip(&clean).zip(grads) {
            for ((v, &v0), &d) in x.iter_mut().zip(x0).zip(&g.gradient) {
                let step = if d > 0.0 {
                    adv.step_size
                } else if d < 0.0 {
                    -adv.step_size
                } else {
                    0.0
                };
                *v = (*v + step).clamp(v0 - adv.eps, v0 + adv.eps).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn blobs() -> (Dataset, Dataset) {
        (synth_blobs(0, 2, 100, 2, 4.0).unwrap(), synth_blobs(1, 2, 100, 2, 4.0).unwrap())
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (tr, te) = blobs();
        let cfg = TrainConfig { epochs: 10, batch: 16, learning_rate: 0.1, ..Default::default() };
        let (_, report) = train(&tr, Some(&te), &[2, 16, 2], &cfg).unwrap();
        assert!(report.test_accuracy.unwrap() >= 0.99, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, _) = blobs();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 8,
            adversarial: Some(PgdTraining { eps: 0.05, steps: 2, step_size: 0.03 }),
            ..Default::default()
        };
        let (a, _) = train(&tr, None, &[2, 8, 2], &cfg).unwrap();
        let (b, _) = train(&tr, None, &[2, 8, 2], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let (tr, _) = blobs();
        let cfg = TrainConfig { epochs: 50, batch: 4, learning_rate: 1e30, ..Default::default() };
        match train(&tr, None, &[2, 8, 2], &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let (tr, _) = blobs();
        let bad = TrainConfig { batch: 0, ..Default::default() };
        assert!(train(&tr, None, &[2, 2], &bad).is_err());
        assert!(train(&tr, None, &[3, 2], &TrainConfig::default()).is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
