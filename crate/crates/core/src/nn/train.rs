use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingMeta};
use super::model::{argmax, evaluate, Model};
use super::{ArchDescriptor, NnError};
use crate::autodiff::Tensor;
use crate::data::{LabeledDataset, NUM_CLASSES};

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop once an epoch's running training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            stop_at_train_accuracy: None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if let Some(t) = self.stop_at_train_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return bad("stop_at_train_accuracy must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(config: &TrainConfig, params: &[Tensor]) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.epsilon,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t))) as f32;
        let eps = self.eps as f32;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

fn one_hot(labels: impl ExactSizeIterator<Item = u8>) -> Result<Tensor, NnError> {
    let n = labels.len();
    let mut data = vec![0.0; n * NUM_CLASSES];
    for (i, l) in labels.enumerate() {
        data[i * NUM_CLASSES + l as usize] = 1.0;
    }
    Ok(Tensor::new(vec![n, NUM_CLASSES], data)?)
}

/// Train a freshly initialised model with minibatch Adam on softmax
/// cross-entropy. Initialisation and shuffling both derive from `config.seed`,
/// so equal inputs give bitwise-equal checkpoints. When `eval` is given its
/// accuracy is recorded in the checkpoint.
pub fn train(
    arch: &ArchDescriptor,
    data: &LabeledDataset,
    config: &TrainConfig,
    eval: Option<&LabeledDataset>,
) -> Result<Checkpoint, NnError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if data.shape() != arch.input {
        return Err(NnError::InputShape { expected: arch.input.len(), found: data.shape().len() });
    }
    if let Some((i, &l)) = data.labels().iter().enumerate().find(|(_, &l)| l as usize >= arch.classes) {
        return Err(NnError::LabelOutOfRange { index: i, label: l });
    }
    let mut model = Model::new(arch.clone(), config.seed)?;
    let mut adam = Adam::new(config, model.params());
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let n = data.len();
    let batches = n.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut meta = TrainingMeta::new(config, data);
    let mut decile_sums = [0.0f64; 10];
    let mut decile_counts = [0usize; 10];

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(idx.len() * model.input_len());
            for &i in idx {
                pixels.extend_from_slice(data.image(i));
            }
            let x = model.batch(pixels)?;
            let y = one_hot(idx.iter().map(|&i| data.label(i)))?;
            let (loss, logits, grads) = model.train_step(&x, &y)?;
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch, batch: b });
            }
            adam.step(model.params_mut(), &grads);
            loss_sum += loss as f64 * idx.len() as f64;
            correct += logits
                .data()
                .chunks_exact(NUM_CLASSES)
                .zip(idx)
                .filter(|(z, &i)| argmax(z) == data.label(i) as usize)
                .count();
            if epoch == 0 {
                let d = b * 10 / batches;
                decile_sums[d] += loss as f64;
                decile_counts[d] += 1;
            }
        }
        let epoch_loss = loss_sum / n as f64;
        let epoch_acc = correct as f64 / n as f64;
        log::info!(
            "epoch {}/{}: loss {epoch_loss:.4}, running train accuracy {epoch_acc:.4}",
            epoch + 1,
            config.epochs
        );
        meta.epoch_losses.push(epoch_loss);
        meta.epochs_run = epoch + 1;
        if config.stop_at_train_accuracy.is_some_and(|t| epoch_acc >= t) {
            break;
        }
    }
    meta.first_epoch_loss_curve =
        decile_sums.iter().zip(decile_counts).filter(|(_, c)| *c > 0).map(|(s, c)| s / c as f64).collect();
    meta.train_accuracy = evaluate(&model, data)?.fraction();
    if let Some(eval) = eval {
        meta.test_accuracy = Some(evaluate(&model, eval)?.fraction());
        meta.test_dataset_sha256 = Some(eval.sha256().to_string());
    }
    Ok(Checkpoint::new(&model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::nn::ArchName;

    fn tiny() -> ArchDescriptor {
        ArchDescriptor::two_block(ArchName::MnistCnn, [2, 2], 8)
    }

    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u8;
            for p in 0..784 {
                let lit = if class == 0 { p % 28 < 14 } else { p % 28 >= 14 };
                let base = if lit { 0.8 } else { 0.1 };
                pixels.push((base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
        LabeledDataset::new(ImageShape::new(28, 28, 1), pixels, labels, (0..n as u64).collect(), "blobs").unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::vector(&[1.0, -1.0]).unwrap()];
        let g = vec![Tensor::vector(&[0.5, -2.0]).unwrap()];
        let mut adam = Adam::new(&TrainConfig::new(0), &p);
        adam.step(&mut p, &g);
        // The bias-corrected first step is lr * sign(g).
        assert!((p[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((p[0].data()[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }

    #[test]
    fn learns_a_separable_problem() {
        let train_set = blobs(200, 1);
        let config = TrainConfig { epochs: 5, batch_size: 20, ..TrainConfig::new(7) };
        let cp = train(&tiny(), &train_set, &config, Some(&blobs(50, 2))).unwrap();
        assert!(cp.meta.train_accuracy >= 0.95, "train accuracy {}", cp.meta.train_accuracy);
        assert!(cp.meta.test_accuracy.unwrap() >= 0.95);
        let curve = &cp.meta.first_epoch_loss_curve;
        assert!(curve.last().unwrap() < curve.first().unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let d = blobs(40, 3);
        let config = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::new(11) };
        let a = train(&tiny(), &d, &config, None).unwrap();
        let b = train(&tiny(), &d, &config, None).unwrap();
        assert_eq!(a, b);
        let c = train(&tiny(), &d, &TrainConfig { seed: 12, ..config }, None).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn early_stop_halts_training() {
        let config =
            TrainConfig { epochs: 50, batch_size: 20, stop_at_train_accuracy: Some(0.9), ..TrainConfig::new(7) };
        let cp = train(&tiny(), &blobs(200, 1), &config, None).unwrap();
        assert!(cp.meta.epochs_run < 50);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = LabeledDataset::empty(ImageShape::new(28, 28, 1), "none");
        assert!(matches!(train(&tiny(), &empty, &TrainConfig::new(0), None), Err(NnError::EmptyDataset)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let d = blobs(4, 0);
        for config in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::new(0) },
            TrainConfig { batch_size: 0, ..TrainConfig::new(0) },
            TrainConfig { epochs: 0, ..TrainConfig::new(0) },
        ] {
            assert!(matches!(train(&tiny(), &d, &config, None), Err(NnError::InvalidConfig(_))));
        }
    }

    #[test]
    fn config_requires_a_seed() {
        assert!(serde_json::from_str::<TrainConfig>("{}").is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(c, TrainConfig::new(5));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"seed": 5, "lr": 1}"#).is_err());
    }
}
