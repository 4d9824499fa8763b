//! Minibatch training with the permutation-invariant loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, Scene};
use crate::error::{invalid, Error, Result};
use crate::loss_metrics::{pit_loss, pit_loss_graph, Targets, DEFAULT_EPS, DEFAULT_TAU};
use crate::network::{build_model, ModelConfig, SeparationModel};
use crate::tensor::{clip_gradients, AdamState, Graph, LrSchedule, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub eps: f64,
    pub tau: f64,
    pub augment: bool,
    pub max_gain_db: f64,
    /// Learning-rate multiplier for the latent filter centres and widths,
    /// which live on a rad/s scale.
    pub latent_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 4,
            schedule: LrSchedule::default(),
            clip_norm: 5.0,
            eps: DEFAULT_EPS,
            tau: DEFAULT_TAU,
            augment: true,
            max_gain_db: 5.0,
            latent_lr_scale: 8000.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.clip_norm > 0.0 && self.latent_lr_scale > 0.0 && self.schedule.initial > 0.0) {
            return invalid("clip norm, learning rate and latent lr scale must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub best: SeparationModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Mean PIT loss of `model` over `scenes`, using cached inference kernels.
pub fn validation_loss(model: &SeparationModel, scenes: &[Scene], eps: f64, tau: f64) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in scenes {
        let outputs = model.separate(&s.mixture, s.fs)?;
        total += pit_loss(&outputs, &s.sources, &s.mixture, eps, tau)?.total;
    }
    Ok(total / scenes.len() as f64)
}

fn mix_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// One optimizer step on `batch`; returns `(loss, pre-clip gradient norm)`.
fn train_step(
    model: &mut SeparationModel,
    adam: &mut AdamState,
    batch: &[Scene],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let fs = batch[0].fs;
    let mixtures: Vec<Vec<f64>> = batch.iter().map(|s| s.mixture.clone()).collect();
    let targets: Vec<Targets> = batch
        .iter()
        .map(|s| Targets {
            sources: s.sources.clone(),
            mixture: s.mixture.clone(),
        })
        .collect();
    let mut g = Graph::new();
    g.set_finite_checks(false);
    let params = model.bind(&mut g, true);
    let outputs = model.forward(&mut g, &params, &mixtures, fs)?;
    let (loss, _) = pit_loss_graph(&mut g, outputs, &targets, cfg.eps, cfg.tau)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")));
    }
    let mut grads_store = g.backward(loss)?;
    let mut grads: Vec<Tensor> = params
        .vars()
        .iter()
        .zip(model.param_shapes())
        .map(|(&v, shape)| grads_store.take(v).unwrap_or_else(|| Tensor::zeros(shape)))
        .collect();
    if !grads.iter().all(Tensor::is_finite) {
        return Err(Error::Numeric(format!("non-finite gradient in epoch {epoch}")));
    }
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    clip_gradients(&mut grads, cfg.clip_norm);
    let mut tensors = model.params_mut();
    adam.step(&mut tensors, &grads, epoch)?;
    model.canonicalize_latent_filters();
    Ok((loss_value, norm))
}

/// Trains from a fresh initialization; `on_epoch` sees every epoch's log and
/// whether that epoch produced a new best validation loss.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    mut on_epoch: impl FnMut(&EpochLog, &SeparationModel, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return invalid("training set is empty");
    }
    let fs = train_set[0].fs;
    if fs != cfg.model.fs_train || train_set.iter().any(|s| s.fs != fs) {
        return invalid(format!("training scenes must all be at {} Hz", cfg.model.fs_train));
    }
    let mut model = build_model(cfg.model.clone())?;
    let mut adam = AdamState::new(&model.param_shapes(), cfg.schedule);
    for decoder in [false, true] {
        let [mu, sigma, _] = model.mgf_ids(decoder);
        adam.set_lr_scale(mu.index(), cfg.latent_lr_scale)?;
        adam.set_lr_scale(sigma.index(), cfg.latent_lr_scale)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SeparationModel)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut steps = 0;
        // items of one batch must share a length
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for &i in &order {
            match groups.last_mut() {
                Some(g) if g.len() < cfg.batch_size && train_set[g[0]].len() == train_set[i].len() => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        for (b, idx) in groups.iter().enumerate() {
            let batch: Vec<Scene> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = if cfg.augment {
                augment_batch(&batch, mix_seed(cfg.seed, epoch, b), cfg.max_gain_db)?.0
            } else {
                batch
            };
            let (loss, norm) = train_step(&mut model, &mut adam, &batch, cfg, epoch)?;
            loss_sum += loss;
            norm_sum += norm;
            steps += 1;
        }
        let val_loss = validation_loss(&model, val_set, cfg.eps, cfg.tau)?;
        if !val_set.is_empty() && !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss in epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            lr: cfg.schedule.lr_at(epoch),
            train_loss: loss_sum / steps as f64,
            val_loss,
            grad_norm: norm_sum / steps as f64,
        };
        let score = if val_set.is_empty() { entry.train_loss } else { val_loss };
        let improved = best.as_ref().is_none_or(|(b, _, _)| score < *b);
        if improved {
            best = Some((score, epoch, model.clone()));
        }
        on_epoch(&entry, &model, improved)?;
        log.push(entry);
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome { best, best_epoch, log })
}

/// Writes the per-epoch log as CSV.
pub fn write_train_log(path: &std::path::Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for entry in log {
        w.serialize(entry)?;
    }
    w.flush()?;
    Ok(())
}
