use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::network::{Example, FRec, Mode};
use crate::data::{compute_m_proxy, ItemCatalog, TrainingInstance, M_PROXY_HORIZON};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ScoredInstance};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Tensor};
use crate::seeds;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (&id, grad) in grads {
            if !store.kind(id).is_trainable() {
                continue;
            }
            let param = store.get_mut(id);
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: param.shape(),
                    rhs: grad.shape(),
                });
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(grad.rows(), grad.cols()), Tensor::zeros(grad.rows(), grad.cols())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adds `λ·W` for every weight matrix, including ones the batch did not
/// touch.
pub fn add_l2(store: &ParamStore, grads: &mut BTreeMap<ParamId, Tensor>, l2: f64) {
    if l2 == 0.0 {
        return;
    }
    for id in store.ids() {
        if store.kind(id) != ParamKind::Weight {
            continue;
        }
        let w = store.get(id);
        let g = grads.entry(id).or_insert_with(|| Tensor::zeros(w.rows(), w.cols()));
        for (g, &w) in g.data_mut().iter_mut().zip(w.data()) {
            *g += l2 * w;
        }
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_of_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale_assign(factor));
    }
    norm
}

/// Stops once validation GAUC has dropped two epochs in a row and
/// remembers the best epoch.
#[derive(Clone, Debug, Default)]
pub struct EarlyStopping {
    pub best: Option<(usize, f64)>,
    previous: Option<f64>,
    decreases: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub const PATIENCE: usize = 2;

    pub fn observe(&mut self, epoch: usize, gauc: f64) -> StopDecision {
        match self.previous {
            Some(p) if gauc < p => self.decreases += 1,
            _ => self.decreases = 0,
        }
        self.previous = Some(gauc);
        let improved = self.best.is_none_or(|(_, b)| gauc > b);
        if improved {
            self.best = Some((epoch, gauc));
        }
        StopDecision {
            improved,
            stop: self.decreases >= Self::PATIENCE,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the training history. Epoch records carry mean losses over
/// the epoch and the validation GAUC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub rec_loss: f64,
    pub con_loss: f64,
    pub con_weight: f64,
    pub valid_gauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_gauc: f64,
    pub epochs_run: usize,
    pub steps: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub rec_loss: f64,
    pub con_loss: f64,
}

/// Builds the training examples of a batch; augmentations are drawn from a
/// stream keyed by `(epoch, user, position)`.
pub fn training_examples(model: &FRec, batch: &[&TrainingInstance], catalog: &ItemCatalog, seed: u64, epoch: usize) -> Result<Vec<Example>> {
    let augment = !model.config.ablations.no_cl;
    batch
        .iter()
        .map(|inst| {
            let mut rng = seeds::rng(seed, seeds::AUGMENT, &[epoch as u64, inst.user, inst.position as u64]);
            Example::new(inst, catalog, model.config.window, augment.then_some(&mut rng as &mut dyn rand::RngCore))
        })
        .collect()
}

/// One optimizer step on `examples`. `(epoch, step)` only label a
/// divergence error.
pub fn train_step(model: &mut FRec, adam: &mut Adam, examples: &[Example], cfg: &TrainConfig, epoch: usize, step: usize) -> Result<StepResult> {
    let mut g = Graph::new();
    let out = model.forward_batch(&mut g, examples, Mode::Train)?;
    let loss = g.value(out.loss).item()?;
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch, step, loss });
    }
    let result = StepResult {
        loss,
        rec_loss: g.value(out.rec_loss).item()?,
        con_loss: out.con_loss.map(|c| g.value(c).item()).transpose()?.unwrap_or(0.0),
    };
    let mut grads = g.backward(out.loss)?.into_params();
    add_l2(&model.store, &mut grads, cfg.l2);
    if let Some(max) = cfg.clip_norm {
        clip_global_norm(&mut grads, max);
    }
    if grads.values().any(|t| !t.all_finite()) {
        return Err(Error::Diverged { epoch, step, loss });
    }
    adam.step(&mut model.store, &grads)?;
    model.head.update_running(&mut model.store, &out.bn_stats)?;
    Ok(result)
}

/// Scores every candidate of every instance with running batch-norm
/// statistics. `with_m` also attaches the fatigue-importance proxy.
pub fn score_instances(model: &FRec, instances: &[TrainingInstance], catalog: &ItemCatalog, batch_size: usize, with_m: bool) -> Result<Vec<ScoredInstance>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let examples = chunk
            .iter()
            .map(|inst| Example::new(inst, catalog, model.config.window, None))
            .collect::<Result<Vec<_>>>()?;
        for (inst, y) in chunk.iter().zip(model.score_examples(&examples)?) {
            out.push(ScoredInstance {
                user: inst.user,
                positive: y[0],
                negatives: y[1..].to_vec(),
                m: if with_m { Some(compute_m_proxy(inst, catalog, M_PROXY_HORIZON)?) } else { None },
            });
        }
    }
    Ok(out)
}

/// Evenly spaced subset of at most `cap` instances.
fn subsample<T: Clone>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(cap) if items.len() > cap => {
            let stride = items.len().div_ceil(cap);
            items.iter().step_by(stride).cloned().collect()
        }
        _ => items.to_vec(),
    }
}

/// Mini-batch training with per-epoch validation GAUC and early stopping.
/// The model ends with the parameters of the best validation epoch.
pub fn train(
    model: &mut FRec,
    train_set: &[TrainingInstance],
    valid_set: &[TrainingInstance],
    catalog: &ItemCatalog,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&HistoryRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            reason: format!("need non-empty splits, got {} train and {} valid instances", train_set.len(), valid_set.len()),
        });
    }
    let valid = subsample(valid_set, cfg.max_valid_instances);
    let con_weight = model.config.contrastive_weight();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut stopper = EarlyStopping::default();
    let mut best_store = model.store.clone();
    let mut step = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, seeds::SHUFFLE, &[epoch as u64]));
        let mut sums = [0.0; 3];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size).take(cfg.max_steps_per_epoch.unwrap_or(usize::MAX)) {
            step += 1;
            let batch: Vec<&TrainingInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let examples = training_examples(model, &batch, catalog, cfg.seed, epoch)?;
            let r = train_step(model, &mut adam, &examples, cfg, epoch, step)?;
            log::debug!("epoch {epoch} step {step}: loss {:.6}", r.loss);
            for (s, v) in sums.iter_mut().zip([r.loss, r.rec_loss, r.con_loss]) {
                *s += v;
            }
            batches += 1;
            on_record(&HistoryRecord {
                kind: RecordKind::Step,
                epoch,
                step,
                loss: r.loss,
                rec_loss: r.rec_loss,
                con_loss: r.con_loss,
                con_weight,
                valid_gauc: None,
            })?;
        }
        epochs_run = epoch;
        let scored = score_instances(model, &valid, catalog, cfg.eval_batch_size, false)?;
        let gauc = evaluate(&scored)?.gauc;
        log::info!("epoch {epoch}: train loss {:.5}, valid GAUC {gauc:.5}", sums[0] / batches as f64);
        on_record(&HistoryRecord {
            kind: RecordKind::Epoch,
            epoch,
            step,
            loss: sums[0] / batches as f64,
            rec_loss: sums[1] / batches as f64,
            con_loss: sums[2] / batches as f64,
            con_weight,
            valid_gauc: Some(gauc),
        })?;
        let decision = stopper.observe(epoch, gauc);
        if decision.improved {
            best_store = model.store.clone();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
    }
    model.store = best_store;
    let (best_epoch, best_gauc) = stopper.best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_epoch,
        best_gauc,
        epochs_run,
        steps: step,
        stopped_early,
    })
}
