//! Mini-batch training with greedy-BLEU early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::search::greedy_decode;
use super::{EncodedSample, Model};
use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::metrics::bleu;
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            max_epochs: 100,
            patience: 15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean token NLL over the epoch.
    pub train_loss: f64,
    /// Corpus BLEU of greedy decodes on the validation split.
    pub val_bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_bleu: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_bleu\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_loss, e.val_bleu));
        }
        out
    }
}

fn dropout_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Greedy-decode corpus BLEU over `samples` (references are the encoded
/// summaries, so truncation and OOV mapping match the model's view).
pub fn validation_bleu(model: &Model, samples: &[EncodedSample]) -> Result<f64> {
    let max_len = model.config.max_summary_len;
    let hyps: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|s| greedy_decode(model, s, max_len))
        .collect::<Result<_>>()?;
    let hyps: Vec<Vec<String>> = hyps.into_iter().map(|h| h.iter().map(usize::to_string).collect()).collect();
    let refs: Vec<Vec<String>> = samples
        .iter()
        .map(|s| s.summary_ids.iter().map(usize::to_string).collect())
        .collect();
    let refs_nonempty: Vec<usize> = (0..refs.len()).filter(|&i| !refs[i].is_empty()).collect();
    let hyps: Vec<Vec<String>> = refs_nonempty.iter().map(|&i| hyps[i].clone()).collect();
    let refs: Vec<Vec<String>> = refs_nonempty.iter().map(|&i| refs[i].clone()).collect();
    if refs.is_empty() {
        return Ok(0.0);
    }
    Ok(bleu(&hyps, &refs)?.0)
}

/// Fraction of target positions (EOS included) where the teacher-forced
/// argmax equals the target.
pub fn teacher_forced_accuracy(model: &Model, samples: &[EncodedSample]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|s| {
            let logits = model.teacher_forced_logits(s)?;
            let target = s.decoder_target();
            let mut hit = 0;
            for (r, &t) in target.iter().enumerate() {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                hit += usize::from(best == t);
            }
            Ok((hit, target.len()))
        })
        .collect::<Result<_>>()?;
    let (hit, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::Empty("accuracy samples"));
    }
    Ok(hit as f64 / total as f64)
}

/// Train in place. The parameters with the best validation BLEU are restored
/// before returning.
pub fn train_model(model: &mut Model, train: &[EncodedSample], val: &[EncodedSample], cfg: &TrainConfig) -> Result<TrainLog> {
    train_model_with(model, train, val, cfg, |_| {})
}

/// As [`train_model`], calling `on_epoch` after every epoch.
pub fn train_model_with(
    model: &mut Model,
    train: &[EncodedSample],
    val: &[EncodedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        best_val_bleu: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best_params = model.params.clone();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Gradients, f64, usize)> = {
                let m = &*model;
                batch
                    .par_iter()
                    .map(|&i| m.sample_gradients(&train[i], Some(dropout_seed(cfg.seed, epoch, i))))
                    .collect::<Result<_>>()?
            };
            let tokens: usize = results.iter().map(|r| r.2).sum();
            let batch_loss: f64 = results.iter().map(|r| r.1).sum();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss {batch_loss}"),
                });
            }
            model.params.zero_grad();
            for (g, _, _) in &results {
                model.params.accumulate(g, 1.0 / tokens as f64)?;
            }
            adam.step(&mut model.params)?;
            loss_sum += batch_loss;
            token_sum += tokens;
        }
        let val_bleu = validation_bleu(model, val)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / token_sum as f64,
            val_bleu,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
        if val_bleu > log.best_val_bleu {
            log.best_val_bleu = val_bleu;
            log.best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.params = best_params;
    model.trained_steps += adam.step_count();
    Ok(log)
}
