//! Multi-exit training: weighted per-stage loss, the shallow/deep λ schedule,
//! stage-dependent dropout and the masked SGD update.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Mode, ParamStore, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{DynAdapterModel, ForwardOpts};
use crate::rng::{Rng, StreamRng, Streams, DATA, DROPOUT, GRADMASK};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub lambda_shallow_init: f64,
    pub lambda_deep_init: f64,
    /// Common end point: the ceiling of shallow weights and floor of deep ones.
    pub lambda_bound: f64,
    pub p_shallow: f64,
    pub p_deep: f64,
    /// Stages `1..=shallow_cutoff` count as shallow.
    pub shallow_cutoff: usize,
    pub p_m: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Constant per-stage weights replacing the schedule (e.g. final exit only).
    pub fixed_lambdas: Option<Vec<f64>>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_epochs: 100,
            lambda_shallow_init: 0.1,
            lambda_deep_init: 1.0,
            lambda_bound: 0.5,
            p_shallow: 0.5,
            p_deep: 0.1,
            shallow_cutoff: 2,
            p_m: 0.1,
            alpha: 0.05,
            batch_size: 32,
            seed: 0,
            fixed_lambdas: None,
        }
    }
}

impl TrainSchedule {
    /// Default schedule with the shallow cutoff derived from `stages`.
    pub fn for_stages(stages: usize) -> Self {
        TrainSchedule {
            shallow_cutoff: stages / 2,
            ..TrainSchedule::default()
        }
    }

    /// Supervises only the last exit, with every other knob unchanged.
    pub fn final_exit_only(mut self, stages: usize) -> Self {
        let mut l = vec![0.0; stages];
        l[stages - 1] = 1.0;
        self.fixed_lambdas = Some(l);
        self
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.total_epochs == 0 {
            problems.push("total_epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.p_m) {
            problems.push(format!("p_m {} must lie in [0, 1)", self.p_m));
        }
        if !(0.0 <= self.p_deep && self.p_deep <= self.p_shallow && self.p_shallow < 1.0) {
            problems.push(format!(
                "dropout rates must satisfy 0 <= p_deep ({}) <= p_shallow ({}) < 1",
                self.p_deep, self.p_shallow
            ));
        }
        let (s, b, d) = (self.lambda_shallow_init, self.lambda_bound, self.lambda_deep_init);
        if !(0.0 <= s && s <= b && b <= d && d.is_finite()) {
            problems.push(format!(
                "lambda initials must satisfy 0 <= shallow ({s}) <= bound ({b}) <= deep ({d})"
            ));
        }
        if self.shallow_cutoff > stages {
            problems.push(format!("shallow_cutoff {} exceeds {stages} stages", self.shallow_cutoff));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            problems.push(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if let Some(l) = &self.fixed_lambdas {
            if l.len() != stages {
                problems.push(format!("fixed_lambdas has {} entries for {stages} stages", l.len()));
            }
            if l.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                problems.push("fixed_lambdas must be finite and non-negative".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Loss weight of `stage` (1-based) during `epoch` (0-based). Shallow
    /// stages rise linearly to the bound, deep ones fall linearly to it; both
    /// reach it at the final epoch.
    pub fn lambda_at(&self, epoch: usize, stage: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        if stage == 0 {
            return Err(Error::contract("stages are numbered from 1"));
        }
        if let Some(l) = &self.fixed_lambdas {
            return l
                .get(stage - 1)
                .copied()
                .ok_or_else(|| Error::contract(format!("no fixed lambda for stage {stage}")));
        }
        let t = if self.total_epochs == 1 {
            1.0
        } else {
            epoch as f64 / (self.total_epochs - 1) as f64
        };
        let start = if stage <= self.shallow_cutoff {
            self.lambda_shallow_init
        } else {
            self.lambda_deep_init
        };
        if t >= 1.0 {
            return Ok(self.lambda_bound);
        }
        Ok(start + (self.lambda_bound - start) * t)
    }

    pub fn lambdas(&self, epoch: usize, stages: usize) -> Result<Vec<f64>> {
        (1..=stages).map(|i| self.lambda_at(epoch, i)).collect()
    }

    pub fn stage_dropout_rate(&self, stage: usize) -> f64 {
        if stage <= self.shallow_cutoff {
            self.p_shallow
        } else {
            self.p_deep
        }
    }

    pub fn dropout_rates(&self, stages: usize) -> Vec<f64> {
        (1..=stages).map(|i| self.stage_dropout_rate(i)).collect()
    }
}

/// `Σ_i λ_i · CE_i`, each CE averaged over the batch. Terms with `λ_i = 0`
/// are left out of the graph.
pub fn multi_exit_loss(g: &mut Graph, logits: &[Var], targets: &[usize], lambdas: &[f64]) -> Result<Var> {
    if logits.len() != lambdas.len() {
        return Err(Error::dim(
            "multi_exit_loss",
            format!("{} logit sets vs {} weights", logits.len(), lambdas.len()),
        ));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::contract(format!("loss weight {l} must be finite and non-negative")));
    }
    let mut total: Option<Var> = None;
    for (&z, &lambda) in logits.iter().zip(lambdas) {
        if lambda == 0.0 {
            continue;
        }
        let ce = g.cross_entropy(z, targets)?;
        let term = g.mul_scalar(ce, lambda)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(&Tensor::scalar(0.0))),
    }
}

/// Per-element keep mask over every trainable tensor. `true` means the
/// element is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMask {
    masks: BTreeMap<String, Vec<bool>>,
}

impl GradMask {
    /// Draws an i.i.d. Bernoulli(1 − p_m) keep bit for every trainable
    /// element, walking tensors in name order.
    pub fn generate(store: &ParamStore, p_m: f64, rng: &mut StreamRng) -> Result<GradMask> {
        if !(0.0..=1.0).contains(&p_m) {
            return Err(Error::contract(format!("mask probability {p_m} outside [0, 1]")));
        }
        let mut masks = BTreeMap::new();
        for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
            let m = (0..p.tensor.len()).map(|_| rng.random::<f64>() >= p_m).collect();
            masks.insert(name.to_string(), m);
        }
        Ok(GradMask { masks })
    }

    /// Mask with every element kept.
    pub fn all_ones(store: &ParamStore) -> GradMask {
        let masks = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_string(), vec![true; p.tensor.len()]))
            .collect();
        GradMask { masks }
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn num_elements(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    /// Fraction of elements held fixed (`M = 0`).
    pub fn masked_fraction(&self) -> f64 {
        let n = self.num_elements();
        if n == 0 {
            return 0.0;
        }
        let off: usize = self.masks.values().map(|m| m.iter().filter(|k| !**k).count()).sum();
        off as f64 / n as f64
    }
}

/// `w ← w − α · (g ⊙ M)` for every trainable entry. Frozen entries and
/// masked elements are left untouched.
pub fn masked_step(store: &mut ParamStore, alpha: f64, mask: &GradMask) -> Result<()> {
    let names = store.trainable_names();
    for name in &names {
        let t = store.get(name)?;
        if t.grad.is_none() {
            return Err(Error::contract(format!("no gradient for trainable `{name}`")));
        }
        let m = mask
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient mask has no entry for `{name}`")))?;
        if m.len() != t.len() {
            return Err(Error::dim(
                "masked_step",
                format!("mask for `{name}` has {} elements, tensor {:?}", m.len(), t.dims()),
            ));
        }
    }
    for name in &names {
        let t = store.get_mut(name)?;
        let grad = t.grad.take().expect("checked above");
        let m = mask.get(name).expect("checked above");
        for ((w, g), keep) in t.data_mut().iter_mut().zip(&grad).zip(m) {
            if *keep {
                *w = (*w as f64 - alpha * *g as f64) as f32;
            }
        }
        t.grad = Some(grad);
    }
    Ok(())
}

/// Forward in train mode, weighted loss, fresh gradients in the store.
/// Returns the loss value and each stage's logits.
pub fn loss_and_grads(
    model: &mut DynAdapterModel,
    images: &Tensor,
    targets: &[usize],
    lambdas: &[f64],
    rates: &[f64],
    dropout_rng: &mut StreamRng,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(Mode::Train);
    let mut opts = ForwardOpts::with_dropout(rates, dropout_rng);
    let logits = model.forward_all(&mut g, images, &mut opts)?;
    let loss = multi_exit_loss(&mut g, &logits, targets, lambdas)?;
    let store = model.store_mut();
    store.zero_grads();
    g.backward(loss, store)?;
    Ok((g.scalar(loss), logits.iter().map(|&v| g.value(v)).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub stage_accuracy: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Mean fraction of trainable elements held fixed by the gradient mask.
    pub mask_fraction: f64,
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One pass over `data` in a seeded shuffled order.
pub fn train_epoch(
    model: &mut DynAdapterModel,
    data: &Dataset,
    schedule: &TrainSchedule,
    epoch: usize,
) -> Result<EpochMetrics> {
    if model.is_fused() {
        return Err(Error::contract("cannot train a fused model"));
    }
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let stages = model.stages();
    schedule.validate(stages)?;
    let lambdas = schedule.lambdas(epoch, stages)?;
    let rates = schedule.dropout_rates(stages);
    let streams = Streams::new(schedule.seed);
    let seg = epoch as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut streams.stream_at(DATA, seg));
    let mut drop_rng = streams.stream_at(DROPOUT, seg);
    let mut mask_rng = streams.stream_at(GRADMASK, seg);

    let mut loss_sum = 0.0;
    let mut correct = vec![0usize; stages];
    let mut masked = 0.0;
    let mut steps = 0usize;
    for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
        let (images, targets) = data.batch(chunk);
        let (loss, logits) = loss_and_grads(model, &images, &targets, &lambdas, &rates, &mut drop_rng)
            .map_err(|e| match e {
                Error::Numeric { op } => Error::Numeric {
                    op: format!("{op} (epoch {epoch}, batch {b})"),
                },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: format!("multi_exit_loss (epoch {epoch}, batch {b})"),
            });
        }
        let mask = GradMask::generate(model.store(), schedule.p_m, &mut mask_rng)?;
        masked_step(model.store_mut(), schedule.alpha, &mask)?;
        loss_sum += loss * chunk.len() as f64;
        for (i, z) in logits.iter().enumerate() {
            correct[i] += (0..chunk.len()).filter(|&r| argmax(z.row(r)) == targets[r]).count();
        }
        masked += mask.masked_fraction();
        steps += 1;
    }
    model.store_mut().clear_grads();
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        mean_loss: loss_sum / n,
        stage_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        lambdas,
        mask_fraction: masked / steps as f64,
    })
}

/// Runs every epoch of `schedule`, handing each epoch's metrics to `on_epoch`.
pub fn fit(
    model: &mut DynAdapterModel,
    data: &Dataset,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let mut all = Vec::with_capacity(schedule.total_epochs);
    for epoch in 0..schedule.total_epochs {
        let m = train_epoch(model, data, schedule, epoch)?;
        on_epoch(&m);
        all.push(m);
    }
    Ok(all)
}

/// Optional surrogate pre-training of the backbone on a separate task before
/// it is frozen: the whole backbone and the final head are trained with plain
/// SGD, adapters bypassed. Heads are restored afterwards so that fine-tuning
/// starts from the same head initialisation.
pub fn pretrain_backbone(
    model: &mut DynAdapterModel,
    data: &Dataset,
    epochs: usize,
    alpha: f64,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    if model.is_fused() {
        return Err(Error::contract("cannot pre-train a fused model"));
    }
    let stages = model.stages();
    let heads: Vec<(String, Tensor)> = model
        .store()
        .iter()
        .filter(|(n, _)| n.starts_with("head."))
        .map(|(n, p)| (n.to_string(), p.tensor.clone()))
        .collect();
    let flags: Vec<(String, bool)> = model
        .store()
        .iter()
        .map(|(n, p)| (n.to_string(), p.trainable))
        .collect();
    for (n, _) in &flags {
        let on = DynAdapterModel::is_backbone(n) || n.starts_with(&format!("head.{stages}."));
        model.store_mut().set_trainable(n, on)?;
    }
    let mut lambdas = vec![0.0; stages];
    lambdas[stages - 1] = 1.0;
    let streams = Streams::new(seed);
    let result = (|| {
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut streams.stream_at("pretrain", epoch as u64));
            for chunk in order.chunks(batch_size.max(1)) {
                let (images, targets) = data.batch(chunk);
                let mut g = Graph::new(Mode::Train);
                let logits = model.forward_all(&mut g, &images, &mut ForwardOpts::backbone_only())?;
                let loss = multi_exit_loss(&mut g, &logits, &targets, &lambdas)?;
                let store = model.store_mut();
                store.zero_grads();
                g.backward(loss, store)?;
                let mask = GradMask::all_ones(store);
                masked_step(store, alpha, &mask)?;
            }
        }
        Ok(())
    })();
    let store = model.store_mut();
    store.clear_grads();
    for (n, t) in heads {
        store.get_mut(&n)?.data_mut().copy_from_slice(t.data());
    }
    for (n, on) in flags {
        store.set_trainable(&n, on)?;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = TrainSchedule {
            total_epochs: 3,
            ..TrainSchedule::default()
        };
        assert_eq!(s.lambdas(0, 4).unwrap(), vec![0.1, 0.1, 1.0, 1.0]);
        let mid = s.lambdas(1, 4).unwrap();
        assert!((mid[0] - 0.3).abs() < 1e-12 && (mid[3] - 0.75).abs() < 1e-12);
        assert_eq!(s.lambdas(2, 4).unwrap(), vec![0.5; 4]);
        assert!(matches!(s.lambda_at(3, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn single_epoch_schedule_sits_at_bound() {
        let s = TrainSchedule {
            total_epochs: 1,
            ..TrainSchedule::default()
        };
        assert_eq!(s.lambdas(0, 4).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn dropout_rates_follow_cutoff() {
        let s = TrainSchedule::default();
        assert_eq!(s.dropout_rates(4), vec![0.5, 0.5, 0.1, 0.1]);
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainSchedule::default();
        s.validate(4).unwrap();
        s.p_deep = 0.6;
        assert!(s.validate(4).is_err());
        let s = TrainSchedule {
            p_m: 1.0,
            ..TrainSchedule::default()
        };
        assert!(s.validate(4).is_err());
    }

    #[test]
    fn masked_step_requires_grads() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3]), true).unwrap();
        let mask = GradMask::all_ones(&store);
        assert!(matches!(masked_step(&mut store, 0.1, &mask), Err(Error::Contract(_))));
        store.zero_grads();
        masked_step(&mut store, 0.1, &mask).unwrap();
    }

    #[test]
    fn all_zero_weights_give_constant_loss() {
        let mut g = Graph::new(Mode::Train);
        let z = g.input(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l = multi_exit_loss(&mut g, &[z], &[0], &[0.0]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        assert!(multi_exit_loss(&mut g, &[z], &[0], &[0.5, 0.5]).is_err());
    }
}
