//! Empirical-risk-minimization training with Adam, plus the STVP checkpoint format.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, GroupedDataset};
use crate::error::{Error, Result};
use crate::format::{Reader, Writer};
use crate::model::{
    accumulate_gradient, forward, predict, InterventionSpec, ModelConfig, ModelParams,
};

pub use crate::model::cross_entropy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".to_string()));
        }
        if self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "epsilon must be positive and weight_decay non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on the untrained model over the training set.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Validation accuracy per group id; `None` for groups absent from validation data.
    pub val_group_accuracy: Vec<Option<f64>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Wall time is excluded: two runs with identical inputs compare equal.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.initial_loss == other.initial_loss
            && self.epochs == other.epochs
            && self.val_group_accuracy == other.val_group_accuracy
    }
}

/// Examples per parallel work unit; fixed so the gradient sum order never
/// depends on the number of threads.
const GRAD_CHUNK: usize = 8;

struct Adam {
    m: ModelParams<f32>,
    v: ModelParams<f32>,
    step: i32,
}

impl Adam {
    fn new(config: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(config),
            v: ModelParams::zeros(config),
            step: 0,
        }
    }

    fn update(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &ModelParams<f32>,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate as f32;
        let wd = cfg.weight_decay as f32;
        let eps = cfg.epsilon as f32;
        let (b1, b2, bc1, bc2) = (b1 as f32, b2 as f32, bc1 as f32, bc2 as f32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                let grad = g.data[i] + wd * p[i];
                m[i] = b1 * m[i] + (1.0 - b1) * grad;
                v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Summed loss, correct count and summed gradient over a batch.
fn batch_gradient(
    params: &ModelParams<f32>,
    batch: &[&Example],
) -> Result<(f64, usize, ModelParams<f32>)> {
    let partials: Vec<(f64, usize, ModelParams<f32>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = ModelParams::zeros(&params.config);
            let mut loss = 0.0f64;
            let mut correct = 0;
            for ex in chunk {
                let (l, logits) = accumulate_gradient(
                    params,
                    &ex.tokens,
                    ex.y as usize,
                    &InterventionSpec::None,
                    &mut grads,
                )?;
                loss += l as f64;
                correct += usize::from(predict(&logits) == ex.y as usize);
            }
            Ok((loss, correct, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut correct, mut grads) = iter.next().expect("nonempty batch");
    for (l, c, g) in iter {
        loss += l;
        correct += c;
        grads.add_assign(&g);
    }
    Ok((loss, correct, grads))
}

/// Mean cross-entropy over a dataset without updating anything.
pub fn mean_loss(params: &ModelParams<f32>, dataset: &GroupedDataset) -> Result<f64> {
    let losses: Vec<f64> = dataset
        .examples
        .par_iter()
        .map(|ex| {
            let (logits, _) = forward(params, &ex.tokens, &InterventionSpec::None, false)?;
            Ok(cross_entropy(&logits, ex.y as usize)?.0 as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn val_accuracy(params: &ModelParams<f32>, val: &GroupedDataset) -> Result<Vec<Option<f64>>> {
    let preds: Vec<usize> = val
        .examples
        .par_iter()
        .map(|ex| {
            forward(params, &ex.tokens, &InterventionSpec::None, false).map(|(l, _)| predict(&l))
        })
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; val.n_groups()];
    for (ex, p) in val.examples.iter().zip(preds) {
        correct[ex.group as usize] += usize::from(p == ex.y as usize);
    }
    Ok(correct
        .iter()
        .zip(&val.group_table)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect())
}

/// Full-model fine-tuning on mean cross-entropy with Adam.
///
/// Each epoch's visiting order comes from a generator seeded with
/// `config.seed` on stream `epoch`, so any epoch can be replayed in isolation.
pub fn train_erm(
    params: &ModelParams<f32>,
    train: &GroupedDataset,
    val: &GroupedDataset,
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainReport)> {
    config.validate()?;
    params.check_shapes()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".to_string()));
    }
    if train.n_classes > params.config.n_classes {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model has {}",
            train.n_classes, params.config.n_classes
        )));
    }
    let started = Instant::now();
    let mut params = params.clone();
    let mut adam = Adam::new(&params.config);
    let initial_loss = mean_loss(&params, train)?;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<&Example> = train.examples.iter().collect();
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, c, mut grads) = batch_gradient(&params, batch).map_err(|e| match e {
                Error::Numeric { hook, detail } => Error::Training {
                    epoch,
                    batch: b,
                    detail: format!("{hook}: {detail}"),
                },
                other => other,
            })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    detail: format!("non-finite loss or gradient (loss {loss})"),
                });
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.update(&mut params, &grads, config);
            if !params.all_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    detail: "parameters became non-finite".to_string(),
                });
            }
            loss_sum += loss;
            correct += c;
        }
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
    }

    let val_group_accuracy = val_accuracy(&params, val)?;
    Ok((
        params,
        TrainReport {
            initial_loss,
            epochs,
            val_group_accuracy,
            wall_time: started.elapsed(),
        },
    ))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"STVP";
const CHECKPOINT_VERSION: u32 = 1;

/// `STVP | u32 version | u64 len | ModelConfig JSON | u32 count | tensor frames`,
/// tensors in [`ModelParams::layout`] order.
pub fn checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let json = serde_json::to_vec(&params.config).expect("config serializes");
    w.u64(json.len() as u64);
    w.bytes(&json);
    let tensors = params.tensors();
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.tensor(&t.shape, t.data);
    }
    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let at = r.offset();
    let len = r.u64("config length")?;
    let len = usize::try_from(len).map_err(|_| Error::format(at, "config length overflows"))?;
    let json_at = r.offset();
    let json = r.take(len, "config JSON")?;
    let config: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| Error::format(json_at, format!("invalid config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::format(json_at, e.to_string()))?;
    let layout = ModelParams::<f32>::layout(&config);
    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(Error::format(
            count_at,
            format!("expected {} tensors, found {count}", layout.len()),
        ));
    }
    let mut params = ModelParams::<f32>::zeros(&config);
    for ((name, shape), dst) in layout.iter().zip(params.tensors_mut()) {
        let at = r.offset();
        let (dims, data) = r.tensor(name)?;
        if &dims != shape {
            return Err(Error::format(
                at,
                format!("{name}: expected shape {shape:?}, found {dims:?}"),
            ));
        }
        *dst = data;
    }
    r.expect_end()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, BiasConfig};
    use crate::model::init_params;

    fn setup() -> (ModelParams<f32>, GroupedDataset) {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 16,
            seq_len: 8,
            n_classes: 2,
            seed: 1,
        };
        let data = generate(&BiasConfig {
            n_train: 40,
            n_val: 8,
            n_test: 8,
            vocab_size: 16,
            seq_len: 8,
            seed: 2,
            ..BiasConfig::default()
        })
        .unwrap();
        (init_params(&cfg).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (p, data) = setup();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (trained, report) = train_erm(&p, &data, &data, &cfg).unwrap();
        assert_eq!(trained, p);
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (p, data) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let a = train_erm(&p, &data, &data, &cfg).unwrap();
        let b = train_erm(&p, &data, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.epochs.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut p, data) = setup();
        p.classifier[0] = 1e38;
        p.classifier[1] = -1e38;
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let err = train_erm(&p, &data, &data, &cfg).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Training {
                    epoch: 0,
                    batch: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn rejects_bad_config() {
        let (p, data) = setup();
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_erm(&p, &data, &data, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (p, _) = setup();
        let bytes = checkpoint_bytes(&p);
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            checkpoint_from_bytes(truncated),
            Err(Error::Format { .. })
        ));
    }
}
