//! Two-phase training: a warm start on the initialisation module alone, then
//! the full objective over every branch.
//!
//! Epoch `e` (zero-based) draws its shuffle order, dropout masks and drop-net
//! choices from `rng::stream(seed, STREAM_EPOCH_BASE + e)`, so a run resumed
//! from the checkpoint written after epoch `e - 1` replays epoch `e` exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{batch, Sample};
use crate::loss::{compute_loss, warm_start_loss};
use crate::metrics::argmax_hits;
use crate::model::{Model, PAD};
use crate::nn::Pass;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::ParamId;
use crate::rng::{self, STREAM_EPOCH_BASE};
use crate::tape::Tape;
use crate::tensor::{Result, Tensor, TensorError};

/// Groups optimised during the warm start.
pub const WARM_START_GROUPS: [&str; 5] = ["embedder", "token_embedding", "e1", "d1", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    WarmStart,
    Full,
}

/// Everything besides parameters and optimiser moments needed to continue a
/// run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    /// Phase of the next epoch.
    pub phase: Phase,
    pub warm_epochs: usize,
    pub warm_best_ce0: Option<f64>,
    pub warm_stale: usize,
    pub best_dev_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    fn new(config: &RunConfig) -> Self {
        Self {
            epochs_done: 0,
            phase: if config.train.warm_start_max_epochs == 0 {
                Phase::Full
            } else {
                Phase::WarmStart
            },
            warm_epochs: 0,
            warm_best_ce0: None,
            warm_stale: 0,
            best_dev_accuracy: None,
            best_epoch: None,
        }
    }
}

/// Mean loss components over an epoch; `ce_k` and `idl` are absent during the
/// warm start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub ce0: f64,
    pub ce_k: Option<f64>,
    pub idl: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub ce0: f64,
    pub ce_k: f64,
    pub idl: f64,
    pub total: f64,
    /// Teacher-forced accuracy of the final branch over non-PAD targets.
    pub token_accuracy: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train: LossMeans,
    pub dev: DevMetrics,
    pub mean_grad_norm: f64,
    pub steps: u64,
    pub best: bool,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
}

pub fn adam_config(config: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: config.train.lr,
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        eps: config.train.eps,
    }
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate().map_err(|e| TensorError::Usage(e.to_string()))?;
        let model = Model::new(config.model.clone(), config.seed).map_err(TensorError::Usage)?;
        let adam = Adam::new(adam_config(&config), &model.store);
        let state = TrainState::new(&config);
        Ok(Self {
            config,
            model,
            adam,
            state,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_done >= self.config.train.epochs
    }

    /// Parameters updated in the current phase. The refinement module is
    /// left out when the model has no refinement iterations.
    pub fn trainable(&self) -> Vec<ParamId> {
        match self.state.phase {
            Phase::WarmStart => self.model.params_in(&WARM_START_GROUPS),
            Phase::Full if self.model.config.iterations == 0 => self.model.params_in(&WARM_START_GROUPS),
            Phase::Full => self.model.store.ids().collect(),
        }
    }

    /// Runs one epoch over `train`, evaluates on `dev` and advances the
    /// schedule.
    pub fn run_epoch(&mut self, train: &[Sample], dev: &[Sample]) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done;
        let phase = self.state.phase;
        let mut rng = rng::stream(self.config.seed, STREAM_EPOCH_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let batches = batch(train, &order, self.config.train.batch_size, self.config.model.stride)
            .map_err(|e| TensorError::Usage(e.to_string()))?;
        let trainable = self.trainable();
        let k = self.model.config.iterations;
        let lambda = self.config.lambda;
        let lr = self.config.train.lr_at(epoch);
        self.adam.config.lr = lr;

        let (mut ce0, mut ce_k, mut idl, mut total, mut norms) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for b in &batches {
            let frames = b.frames(train);
            let mut tape = Tape::new();
            let mut pass = Pass::train(self.model.config.dropout, &mut rng);
            let loss = match phase {
                Phase::WarmStart => {
                    let logits = self.model.forward_branches(&mut tape, &frames, &b.tokens, 0, &mut pass)?;
                    warm_start_loss(&mut tape, logits[0], &b.gold, PAD)?
                }
                Phase::Full => {
                    let logits = self.model.forward_train(&mut tape, &frames, &b.tokens, &mut pass)?;
                    compute_loss(&mut tape, &logits, &b.gold, k, lambda, PAD)?
                }
            };
            tape.backward(loss.total)?;
            let mut grads: HashMap<ParamId, Vec<f32>> = tape
                .param_grads()
                .into_iter()
                .filter(|(id, _)| trainable.contains(id))
                .map(|(id, g)| (id, g.to_vec()))
                .collect();
            drop(tape);
            norms += clip_global_norm(&mut grads, self.config.train.clip_norm);
            // parameters the pass never reached (the unused drop-net branch)
            // keep their moments untouched this step
            let reached: Vec<ParamId> = trainable.iter().copied().filter(|id| grads.contains_key(id)).collect();
            self.adam.step(&mut self.model.store, &grads, &reached)?;
            let bd = loss.breakdown;
            ce0 += bd.ce0;
            ce_k += bd.ce_k;
            idl += bd.idl;
            total += bd.total;
        }
        let n = batches.len().max(1) as f64;
        let train_means = match phase {
            Phase::WarmStart => LossMeans {
                ce0: ce0 / n,
                ce_k: None,
                idl: None,
                total: total / n,
            },
            Phase::Full => LossMeans {
                ce0: ce0 / n,
                ce_k: Some(ce_k / n),
                idl: Some(idl / n),
                total: total / n,
            },
        };

        let dev_metrics = evaluate_teacher_forced(&self.model, dev, self.config.train.batch_size, lambda)?;
        let best = self.advance(epoch, phase, &dev_metrics);
        Ok(EpochRecord {
            epoch,
            phase,
            lr,
            train: train_means,
            dev: dev_metrics,
            mean_grad_norm: norms / n,
            steps: self.adam.steps,
            best,
        })
    }

    /// Updates the schedule after an epoch; returns whether it is the new best.
    fn advance(&mut self, epoch: usize, phase: Phase, dev: &DevMetrics) -> bool {
        let s = &mut self.state;
        s.epochs_done = epoch + 1;
        if phase == Phase::WarmStart {
            s.warm_epochs += 1;
            let delta = self.config.train.warm_start_min_delta;
            match s.warm_best_ce0 {
                Some(b) if dev.ce0 >= b - delta => s.warm_stale += 1,
                _ => {
                    s.warm_best_ce0 = Some(dev.ce0);
                    s.warm_stale = 0;
                }
            }
            if s.warm_stale >= self.config.train.warm_start_patience
                || s.warm_epochs >= self.config.train.warm_start_max_epochs
            {
                s.phase = Phase::Full;
                if self.config.train.seed_refinement_from_warm_start {
                    seed_refinement_module(&mut self.model);
                }
            }
        }
        let s = &mut self.state;
        // during the warm start the final branch is untrained unless it is d1
        let eligible = phase == Phase::Full || self.model.config.iterations == 0;
        let better = match s.best_dev_accuracy {
            None => true,
            Some(b) => dev.token_accuracy > b,
        };
        if eligible && better {
            s.best_dev_accuracy = Some(dev.token_accuracy);
            s.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }

    /// Trains until the configured epoch count or until `stop_after` total
    /// epochs are done, calling `on_epoch` after each.
    pub fn train<E>(
        &mut self,
        train: &[Sample],
        dev: &[Sample],
        stop_after: Option<usize>,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> std::result::Result<(), E>,
    ) -> std::result::Result<Vec<EpochRecord>, E>
    where
        E: From<TensorError>,
    {
        let mut records = Vec::new();
        let limit = stop_after.map_or(self.config.train.epochs, |s| s.min(self.config.train.epochs));
        while self.state.epochs_done < limit {
            let record = self.run_epoch(train, dev)?;
            on_epoch(self, &record)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Copies every `e1`/`d1` parameter onto its `e2`/`d2` counterpart. The
/// refinement encoder's cross-attention takes the query/key/value weights of
/// the matching `e1` self-attention and a zero output projection, so every
/// refinement pass starts out ignoring the previous prototype and all
/// iterations agree.
pub fn seed_refinement_module(model: &mut Model<f32>) {
    let mut pairs: Vec<(ParamId, ParamId)> = Vec::new();
    for (id, e) in model.store.iter() {
        let targets = if let Some(rest) = e.name.strip_prefix("e1.") {
            vec![format!("e2.{rest}"), format!("e2.{}", rest.replace(".self_attn.", ".cross_attn."))]
        } else if let Some(rest) = e.name.strip_prefix("d1.") {
            vec![format!("d2.{rest}")]
        } else {
            continue;
        };
        pairs.extend(targets.iter().filter_map(|t| model.store.id(t)).map(|t| (id, t)));
    }
    pairs.dedup();
    for (src, dst) in pairs {
        let value = model.store.get(src).clone();
        *model.store.get_mut(dst) = value;
    }
    let outputs: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, e)| e.name.starts_with("e2.") && e.name.ends_with(".cross_attn.w_o"))
        .map(|(id, _)| id)
        .collect();
    for id in outputs {
        model.store.get_mut(id).data_mut().fill(0.0);
    }
}

/// Teacher-forced dev losses (eval mode) and final-branch token accuracy.
pub fn evaluate_teacher_forced(
    model: &Model<f32>,
    samples: &[Sample],
    batch_size: usize,
    lambda: f64,
) -> Result<DevMetrics> {
    if samples.is_empty() {
        return Err(TensorError::Usage("no dev samples".into()));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let batches =
        batch(samples, &order, batch_size, model.config.stride).map_err(|e| TensorError::Usage(e.to_string()))?;
    let k = model.config.iterations;
    let (mut ce0, mut ce_k, mut idl, mut total) = (0.0, 0.0, 0.0, 0.0);
    let (mut hits, mut count) = (0, 0);
    for b in &batches {
        let mut tape = Tape::inference();
        let logits = model.forward_train(&mut tape, &b.frames(samples), &b.tokens, &mut Pass::eval())?;
        let loss = compute_loss(&mut tape, &logits, &b.gold, k, lambda, PAD)?;
        let last: &Tensor<f32> = tape.value(*logits.last().expect("K + 1 branches"));
        let (h, c) = argmax_hits(last, &b.gold);
        hits += h;
        count += c;
        ce0 += loss.breakdown.ce0;
        ce_k += loss.breakdown.ce_k;
        idl += loss.breakdown.idl;
        total += loss.breakdown.total;
    }
    let n = batches.len() as f64;
    Ok(DevMetrics {
        ce0: ce0 / n,
        ce_k: ce_k / n,
        idl: idl / n,
        total: total / n,
        token_accuracy: hits as f64 / count.max(1) as f64,
    })
}
