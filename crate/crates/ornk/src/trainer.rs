//! Training loops: a single backbone, a ranking bank (one loop per
//! sub-model), and the merged-label baselines. Every source of
//! randomness is a stream derived from (seed, tag), so results do not
//! depend on training order or worker count.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy};
use crate::backbone::{argmax_lowest, Backbone, BackboneConfig};
use crate::dataset::LabeledSample;
use crate::ranking::{relabel, ClassMapping, SubModelBank};
use crate::rng::seed_stream;
use crate::tensor::{
    adam_update, plateau_step, AdamState, Mode, PlateauSchedule, Tape, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain categorical cross-entropy.
    Ce,
    /// 1 + alpha * cross-entropy - batch accuracy. Only the
    /// cross-entropy term carries gradients; accuracy is piecewise
    /// constant in the parameters.
    Cea,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Cea => "cea",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub loss: LossKind,
    pub alpha: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            plateau_patience: 10,
            plateau_factor: 0.5,
            loss: LossKind::Ce,
            alpha: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 (batch statistics need it)".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must be in (0,1), got {}",
                self.plateau_factor
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean cross-entropy and accuracy of a probability batch [b, classes].
/// Probabilities are clamped at 1e-12 before the log; argmax ties
/// resolve to the lower class index.
pub fn batch_ce_acc(probs: &Tensor, targets: &[usize]) -> Result<(f64, f64)> {
    let &[b, c] = probs.shape() else {
        return Err(Error::Shape(format!("expected [batch, classes], got {:?}", probs.shape())));
    };
    if b != targets.len() || b == 0 {
        return Err(Error::Shape(format!("{b} probability rows for {} targets", targets.len())));
    }
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (row, &t) in probs.data().chunks(c).zip(targets) {
        if t >= c {
            return Err(Error::Config(format!("target {t} out of range for {c} classes")));
        }
        ce -= row[t].max(1e-12).ln();
        correct += usize::from(argmax_lowest(row) == t);
    }
    Ok((ce / b as f64, correct as f64 / b as f64))
}

pub fn cea_value(ce: f64, acc: f64, alpha: f64) -> f64 {
    1.0 + alpha * ce - acc
}

pub fn composite_loss(kind: LossKind, alpha: f64, ce: f64, acc: f64) -> f64 {
    match kind {
        LossKind::Ce => ce,
        LossKind::Cea => cea_value(ce, acc, alpha),
    }
}

/// Whole-set loss and accuracy in eval mode, batched internally.
pub fn evaluate_model(
    model: &Backbone,
    samples: &[LabeledSample],
    kind: LossKind,
    alpha: f64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty sample set".into()));
    }
    let mut ce_sum = 0.0;
    let mut acc_sum = 0.0;
    for chunk in samples.chunks(64) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].image.numel());
        let mut targets = Vec::with_capacity(chunk.len());
        for s in chunk {
            data.extend_from_slice(s.image.data());
            targets.push(s.label);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].image.shape());
        let xb = Tensor::new(shape, data)?;
        let (_, probs) = model.forward_batch(&xb)?;
        let (ce, acc) = batch_ce_acc(&probs, &targets)?;
        ce_sum += ce * chunk.len() as f64;
        acc_sum += acc * chunk.len() as f64;
    }
    let n = samples.len() as f64;
    let (ce, acc) = (ce_sum / n, acc_sum / n);
    Ok((composite_loss(kind, alpha, ce, acc), acc))
}

/// Batch boundaries over `total` samples. A trailing single sample is
/// folded into the previous batch so batch statistics stay defined.
fn batch_bounds(total: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut bounds: Vec<(usize, usize)> = (0..total)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(total)))
        .collect();
    if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 == 1 {
        let (_, end) = bounds.pop().expect("nonempty");
        bounds.last_mut().expect("nonempty").1 = end;
    }
    bounds
}

/// Trains one backbone in place. Validation runs after every epoch; the
/// parameters with the strictly lowest validation loss are restored at
/// the end. `tag` namespaces this model's random streams, so two models
/// trained under the same seed see unrelated shuffles, augmentation
/// draws, and dropout masks.
pub fn train_model(
    model: &mut Backbone,
    train: &[LabeledSample],
    val: &[LabeledSample],
    schedule: &TrainSchedule,
    policy: &AugmentPolicy,
    seed: u64,
    tag: &str,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    policy.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let sizes = model.trainable_sizes();
    let mut adam = AdamState::new(&sizes, schedule.learning_rate);
    let mut plateau =
        PlateauSchedule::new(schedule.learning_rate, schedule.plateau_patience, schedule.plateau_factor)?;
    let mut curves = Vec::with_capacity(schedule.epochs);
    let mut best: Option<(usize, f64, Backbone)> = None;
    let sample_numel = train[0].image.numel();

    for epoch in 1..=schedule.epochs {
        let mut shuffle_rng = seed_stream(seed, &format!("{tag}.shuffle.e{epoch}"));
        let mut aug_rng = seed_stream(seed, &format!("{tag}.augment.e{epoch}"));
        let mut drop_rng = seed_stream(seed, &format!("{tag}.dropout.e{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (start, end) in batch_bounds(order.len(), schedule.batch_size) {
            let len = end - start;
            let mut data = Vec::with_capacity(len * sample_numel);
            let mut targets = Vec::with_capacity(len);
            for &i in &order[start..end] {
                let aug = augment(&train[i].image, policy, &mut aug_rng)?;
                data.extend_from_slice(aug.data());
                targets.push(train[i].label);
            }
            let mut shape = vec![len];
            shape.extend_from_slice(train[0].image.shape());
            let xb = Tensor::new(shape, data)?;

            let mut tape = Tape::new();
            let xn = tape.leaf(xb);
            let built = model.build_forward(&mut tape, xn, Mode::Train, Some(&mut drop_rng))?;
            let ce = tape.cross_entropy(built.probabilities, &targets)?;
            let loss_node = match schedule.loss {
                LossKind::Ce => ce,
                LossKind::Cea => {
                    let (_, acc) = batch_ce_acc(tape.value(built.probabilities), &targets)?;
                    tape.affine(ce, schedule.alpha, 1.0 - acc)
                }
            };
            let loss_value = tape.value(loss_node).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("{tag} epoch {epoch} training loss")));
            }
            loss_sum += loss_value * len as f64;
            tape.backward(loss_node)?;
            let grads: Vec<Vec<f64>> =
                built.param_nodes.iter().map(|&(_, node)| tape.grad(node).to_vec()).collect();
            drop(tape);

            let mut grad_iter = grads.iter();
            let mut pairs: Vec<(&mut [f64], &[f64])> = model
                .params_mut()
                .iter_mut()
                .filter(|p| p.trainable)
                .map(|p| (p.tensor.data_mut(), grad_iter.next().expect("aligned").as_slice()))
                .collect();
            adam_update(&mut adam, &mut pairs)?;
            drop(pairs);
            model.apply_bn_updates(&built.bn_stats);
        }

        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_acc) = evaluate_model(model, val, schedule.loss, schedule.alpha)?;
        curves.push(EpochStats { epoch, train_loss, val_loss, val_acc });
        if best.as_ref().is_none_or(|(_, loss, _)| val_loss < *loss) {
            best = Some((epoch, val_loss, model.clone()));
        }
        adam.learning_rate = plateau_step(&mut plateau, val_loss);
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch ran");
    *model = snapshot;
    Ok(TrainOutcome { curves, best_epoch, best_val_loss })
}

/// Trains every sub-model of a bank on its own relabeled data, at most
/// `workers` at a time. Stream tags are `{tag_prefix}.sub{k}.*`, so the
/// result is independent of worker count and completion order.
pub fn train_bank(
    bank: &mut SubModelBank,
    train: &[LabeledSample],
    val: &[LabeledSample],
    schedule: &TrainSchedule,
    policy: &AugmentPolicy,
    seed: u64,
    tag_prefix: &str,
    workers: usize,
) -> Result<Vec<TrainOutcome>> {
    let n = bank.n();
    let mut jobs = Vec::with_capacity(n - 1);
    for k in 1..n {
        let train_k = relabel(train, k, n)?;
        let val_k = relabel(val, k, n)?;
        let first = train_k[0].label;
        if train_k.iter().all(|s| s.label == first) {
            log::warn!(
                "{tag_prefix}.sub{k}: every relabeled training sample is class {first}; training proceeds"
            );
        }
        jobs.push((k, bank.model(k).clone(), train_k, val_k));
    }

    let workers = workers.max(1);
    let mut outcomes: Vec<Option<TrainOutcome>> = vec![None; n - 1];
    for wave in jobs.chunks_mut(workers) {
        let results: Vec<(usize, Result<TrainOutcome>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter_mut()
                .map(|(k, model, train_k, val_k)| {
                    let k = *k;
                    scope.spawn(move || {
                        let tag = format!("{tag_prefix}.sub{k}");
                        (k, train_model(model, train_k, val_k, schedule, policy, seed, &tag))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training threads do not panic"))
                .collect()
        });
        for ((k, model, _, _), (rk, outcome)) in wave.iter().zip(results) {
            debug_assert_eq!(*k, rk);
            let outcome = outcome?;
            bank.set_model(*k, model.clone(), outcome.best_val_loss)?;
            outcomes[*k - 1] = Some(outcome);
        }
    }
    Ok(outcomes.into_iter().map(|o| o.expect("every sub-model trained")).collect())
}

/// Builds and trains one multi-class (or merged binary) baseline on the
/// same backbone and schedule the ranking models use.
pub fn train_multiclass(
    base: &BackboneConfig,
    n: usize,
    mapping: ClassMapping,
    train: &[LabeledSample],
    val: &[LabeledSample],
    schedule: &TrainSchedule,
    policy: &AugmentPolicy,
    seed: u64,
    tag: &str,
) -> Result<(Backbone, TrainOutcome)> {
    let mut config = base.clone();
    config.classes = mapping.classes(n);
    let mut model = Backbone::build(config, &mut seed_stream(seed, &format!("{tag}.init")))?;
    let map = |samples: &[LabeledSample]| -> Result<Vec<LabeledSample>> {
        samples
            .iter()
            .map(|s| {
                Ok(LabeledSample {
                    id: s.id.clone(),
                    image: s.image.clone(),
                    label: mapping.apply(s.label, n)?,
                    disc_box: s.disc_box,
                })
            })
            .collect()
    };
    let train_m = map(train)?;
    let val_m = map(val)?;
    let outcome = train_model(&mut model, &train_m, &val_m, schedule, policy, seed, tag)?;
    Ok((model, outcome))
}

pub fn curves_to_csv(curves: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for c in curves {
        out.push_str(&format!("{},{},{},{}\n", c.epoch, c.train_loss, c.val_loss, c.val_acc));
    }
    out
}

pub fn save_curves(path: impl AsRef<Path>, curves: &[EpochStats]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, curves_to_csv(curves))
        .map_err(|e| Error::io(path.display().to_string(), e))
}
