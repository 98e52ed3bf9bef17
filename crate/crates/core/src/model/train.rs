use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::ForwardOptions;
use super::metrics::{evaluate, EvalMetrics};
use super::Model;
use crate::autodiff::{BackwardPolicy, LeafKind, Tensor};
use crate::data::{LabStats, PatientRecord, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
    pub eps: f64,
    /// Weight each class's loss by `(n / (k · n_c))^power`; 0 disables
    /// reweighting and 1 is fully balanced.
    pub class_weight_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 32, seed: 0, rho: 0.9, eps: 1e-8, class_weight_power: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: EvalMetrics,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch RMSprop on the cross-entropy loss. Lab statistics are taken
/// from `train_set` before the first step; metrics are computed on
/// `heldout`.
pub fn train(mut model: Model, train_set: &[PatientRecord], heldout: &[PatientRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::InvalidConfig("epochs, batch-size and lr must be positive".into()));
    }
    let n_classes = model.n_classes();
    if let Some(r) = train_set.iter().chain(heldout).find(|r| r.label >= n_classes) {
        return Err(Error::InvalidConfig(format!("label {} outside {n_classes} classes", r.label)));
    }
    model.lab_stats = LabStats::from_records(train_set, model.config.n_labs);
    let class_weights = class_weights(train_set, n_classes, config.class_weight_power);

    let mut sq_avg: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let dropout_base = config.seed ^ ((epoch as u64) << 40) ^ ((b as u64) << 20);
            let per_record: Vec<(f64, Vec<Option<Vec<f64>>>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let seed = (model.config.dropout > 0.0).then_some(dropout_base + k as u64);
                    record_gradient(&model, &train_set[i], &class_weights, seed)
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch },
                    other => other,
                })?;

            let mut grad: Vec<Vec<f64>> = sq_avg.iter().map(|v| vec![0.0; v.len()]).collect();
            for (loss, g) in &per_record {
                total += loss;
                for (acc, part) in grad.iter_mut().zip(g) {
                    if let Some(part) = part {
                        acc.iter_mut().zip(part).for_each(|(a, v)| *a += v);
                    }
                }
            }
            if !total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let scale = 1.0 / batch.len() as f64;
            let pad_row = model.params.position("emb.codes");
            let d = model.config.embed_dim;
            for (k, (param, g)) in model.params.tensors_mut().iter_mut().zip(&grad).enumerate() {
                let v = &mut sq_avg[k];
                for ((w, gv), s) in param.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                    let gv = gv * scale;
                    *s = config.rho * *s + (1.0 - config.rho) * gv * gv;
                    *w -= config.lr * gv / (s.sqrt() + config.eps);
                }
                if Some(k) == pad_row {
                    param.data_mut()[PAD * d..(PAD + 1) * d].iter_mut().for_each(|w| *w = 0.0);
                }
            }
        }
        let mean = total / train_set.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }

    let metrics = evaluate(&model, heldout)?;
    Ok(TrainOutcome { model, metrics, epoch_losses })
}

fn class_weights(records: &[PatientRecord], n_classes: usize, power: f64) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for r in records {
        counts[r.label] += 1;
    }
    let n = records.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 || power == 0.0 { 1.0 } else { (n / (n_classes as f64 * c as f64)).powf(power) })
        .collect()
}

/// Loss and per-parameter gradients for one record, indexed like
/// `model.params`.
fn record_gradient(
    model: &Model,
    record: &PatientRecord,
    class_weights: &[f64],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let prepared = model.prepare(record)?;
    let codes = model.code_vectors(&prepared);
    let trace = model.forward_inputs(&prepared, codes, prepared.labs.clone(), ForwardOptions { dropout_seed, ..Default::default() })?;
    let probs = trace.probabilities();
    let logits = trace.logits();
    let w = class_weights[record.label];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = w * (log_z - logits[record.label]);
    let seed: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, p)| w * (p - if c == record.label { 1.0 } else { 0.0 }))
        .collect();
    let grads = trace.tape.backward_with_seed(trace.logits, Tensor::row(seed), &BackwardPolicy::standard())?;

    // parameter leaves borrow the store's tensors, so addresses identify them
    let by_address: HashMap<*const Tensor, usize> =
        model.params.tensors().iter().enumerate().map(|(k, t)| (t as *const Tensor, k)).collect();
    let mut out: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
    for id in trace.tape.leaves(LeafKind::Param) {
        let Some(k) = by_address.get(&(trace.tape.value(id) as *const Tensor)) else { continue };
        if let Some(g) = grads.wrt(id) {
            accumulate(&mut out[*k], g.data());
        }
    }
    if let (Some(leaf), Some(k)) = (trace.code_leaf, model.params.position("emb.codes")) {
        if let Some(g) = grads.wrt(leaf) {
            let d = model.config.embed_dim;
            let table = out[k].get_or_insert_with(|| vec![0.0; model.params.tensors()[k].numel()]);
            for (slot, &code) in prepared.codes.iter().enumerate() {
                if code == PAD {
                    continue;
                }
                let row = &g.data()[slot * d..(slot + 1) * d];
                table[code * d..(code + 1) * d].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
    }
    Ok((loss, out))
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}
