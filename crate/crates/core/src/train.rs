//! Mini-batch training with per-epoch eigenbasis and prior refresh.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultimodalDataset;
use crate::error::{Error, Result};
use crate::fusion::LossBreakdown;
use crate::model::{CrossWeighting, Model};
use crate::nn::{Adam, AdamConfig};
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            lr_decay_factor: adam.decay_factor,
            lr_decay_every: adam.decay_every,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_factor: self.lr_decay_factor,
            decay_every: self.lr_decay_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::invalid("lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_assa,l_o,l_a,l_saca,l_nll_s,l_nll_c,l_re,l_cls,train_acc\n");
        for r in &self.records {
            let l = &r.losses;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                l.assa(),
                l.orthogonality,
                l.alignment,
                l.saca(),
                l.nll_specific,
                l.nll_cross,
                l.reconstruction,
                l.classification,
                r.train_accuracy
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Batches of `size` consecutive entries; a short tail is merged into the
/// previous batch so every batch has at least two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let k = out.len() - 1;
        out[k] = &order[k * size..];
    }
    out
}

/// Trains `model` in place. On a non-finite loss or update the model is
/// restored to its state at the start of the failing epoch and the error is
/// returned.
pub fn train(model: &mut Model, ds: &MultimodalDataset, cfg: &TrainConfig, shuffle_seed: u64) -> Result<History> {
    cfg.validate()?;
    ds.validate()?;
    if ds.len() < 2 {
        return Err(Error::InsufficientSamples {
            required: 2,
            actual: ds.len(),
        });
    }
    let mut adams: Vec<Adam> = model.nets().into_iter().map(|n| Adam::for_net(cfg.adam(), n)).collect();
    let mut history = History::default();
    let n = ds.len();
    for epoch in 0..cfg.epochs {
        let snapshot = model.clone();
        match run_epoch(model, &mut adams, ds, cfg, epoch, shuffle_seed) {
            Ok(record) => {
                debug!(
                    "epoch {epoch}: total {:.4} cls {:.4} acc {:.3}",
                    record.losses.total(),
                    record.losses.classification,
                    record.train_accuracy
                );
                history.records.push(record);
            }
            Err(e) if e.is_numerical() => {
                *model = snapshot;
                return Err(Error::NonFinite(format!("training diverged in epoch {epoch} (model restored to its state before that epoch): {e}")));
            }
            Err(e) => return Err(e),
        }
    }
    model.refresh(&ds.modalities)?;
    if let Some(last) = history.records.last() {
        info!("trained {} epochs on {n} samples: final L_cls {:.4}, train acc {:.3}", cfg.epochs, last.losses.classification, last.train_accuracy);
    }
    Ok(history)
}

fn run_epoch(model: &mut Model, adams: &mut [Adam], ds: &MultimodalDataset, cfg: &TrainConfig, epoch: usize, shuffle_seed: u64) -> Result<EpochRecord> {
    model.refresh(&ds.modalities)?;
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(shuffle_seed, epoch as u64)));
    for a in adams.iter_mut() {
        a.set_epoch(epoch);
    }
    let mut losses = LossBreakdown::default();
    let mut correct = 0;
    for batch in batches(&order, cfg.batch_size) {
        let xs: Vec<_> = ds.modalities.iter().map(|x| x.select_rows(batch)).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| ds.labels[i]).collect();
        let out = model.batch_gradients(&xs, &labels, CrossWeighting::Confidence, None)?;
        if !out.losses.is_finite() || !out.grads.is_finite() {
            return Err(Error::NonFinite(format!("loss {:?}", out.losses)));
        }
        losses.add_scaled(&out.losses, batch.len() as f64 / n as f64);
        correct += out.correct;
        for ((net, adam), g) in model.nets_mut().into_iter().zip(adams.iter_mut()).zip(&out.grads.nets) {
            adam.step(net, g)?;
        }
    }
    Ok(EpochRecord {
        epoch,
        losses,
        train_accuracy: correct as f64 / n as f64,
    })
}
