//! Optimization loop shared by the CTC-only encoder, the non-autoregressive
//! model and the autoregressive baseline.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment_map::{collapse, trigger_masks};
use crate::ctc_lattice::{best_path_align, mix_seed};
use crate::decoder_eval::edit_ops;
use crate::error::{Error, Result};
use crate::model::{
    argmax, at_loss, ctc_only_loss, features_tensor, joint_loss, AtModel, AtSession, BatchLoss, CassNat, CtcModel,
    ModelConfig, NatSession,
};
use crate::numerics::{Grads, ParamStore, Tape};
use crate::synth_data::Utterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: usize,
    pub hold_steps: usize,
    /// Per-step exponent of the decay segment.
    pub decay_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub average_last_k: usize,
    pub eval_every: usize,
    /// Evaluations without dev-loss improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between Viterbi alignment refreshes; 1 refreshes every batch.
    pub align_refresh_every: usize,
    /// Dev utterances decoded for the dev WER column; 0 means all.
    pub dev_wer_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 200,
            hold_steps: 1000,
            decay_rate: 1e-3,
            batch_size: 16,
            max_steps: 3000,
            seed: 1,
            average_last_k: 5,
            eval_every: 100,
            patience: 10,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            align_refresh_every: 1,
            dev_wer_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.floor_lr < self.peak_lr) || self.floor_lr < 0.0 {
            return bad("floor_lr must be non-negative and below peak_lr");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.align_refresh_every == 0 {
            return bad("batch_size, eval_every and align_refresh_every must be positive");
        }
        if !(self.decay_rate >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("decay_rate must be non-negative and grad_clip positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    /// Linear ramp to `peak_lr`, a hold, then exponential decay clipped at
    /// `floor_lr`.
    pub fn lr_at(&self, step: f64) -> f64 {
        let warm = self.warmup_steps as f64;
        let hold_end = warm + self.hold_steps as f64;
        if step < warm {
            self.peak_lr * step.max(0.0) / warm
        } else if step < hold_end {
            self.peak_lr
        } else {
            (self.peak_lr * (-self.decay_rate * (step - hold_end)).exp()).max(self.floor_lr)
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A model the loop can optimize.
pub trait Trainable {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &[&Utterance],
        fixed: Option<&[Option<Vec<usize>>]>,
    ) -> Result<BatchLoss>;
    /// Cheapest decode of the model, used for the dev WER column.
    fn transcribe(&self, utt: &Utterance) -> Result<Vec<usize>>;
}

impl Trainable for CtcModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn batch_loss<'a>(&'a self, tape: &mut Tape<'a>, batch: &[&Utterance], _: Option<&[Option<Vec<usize>>]>) -> Result<BatchLoss> {
        ctc_only_loss(self, tape, batch)
    }
    fn transcribe(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let mut tape = Tape::inference(&self.params);
        let feats = features_tensor(utt)?;
        let enc = self.encoder.forward(&mut tape, &feats, feats.rows())?;
        Ok(collapse(&best_path_align(&enc.grid(&tape)?).labels))
    }
}

impl Trainable for CassNat {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn batch_loss<'a>(&'a self, tape: &mut Tape<'a>, batch: &[&Utterance], fixed: Option<&[Option<Vec<usize>>]>) -> Result<BatchLoss> {
        joint_loss(self, tape, batch, fixed)
    }
    fn transcribe(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let mut s = NatSession::new(self, &features_tensor(utt)?)?;
        let labels = best_path_align(s.grid()).labels;
        let masks = match trigger_masks(&labels, self.config.extend_last) {
            Ok(m) => m,
            Err(Error::NoTokens) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let lp = s.decode(&masks)?;
        Ok((0..lp.rows()).map(|u| 1 + argmax(&lp.row(u)[1..])).collect())
    }
}

impl Trainable for AtModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn batch_loss<'a>(&'a self, tape: &mut Tape<'a>, batch: &[&Utterance], _: Option<&[Option<Vec<usize>>]>) -> Result<BatchLoss> {
        at_loss(self, tape, batch)
    }
    fn transcribe(&self, utt: &Utterance) -> Result<Vec<usize>> {
        let feats = features_tensor(utt)?;
        let max_len = self.config.encoder_frames(feats.rows());
        AtSession::new(self, &feats)?.greedy(max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_wer: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub best_dev_loss: f64,
    pub stopped_early: bool,
    /// Utterance-steps skipped because the reference did not fit the frames.
    pub skipped: usize,
    pub averaged: usize,
}

/// Indices grouped into batches of similar length.
pub fn bucket_batches(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].n_frames(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean dev loss and WER (percent) under the inference tape.
pub fn evaluate_dev<M: Trainable>(model: &M, dev: &[Utterance], wer_limit: usize) -> Result<(f64, f64)> {
    let (mut loss, mut used) = (0.0, 0);
    for utt in dev {
        let mut tape = Tape::inference(model.params()).with_mask_mode(model.config().mask_mode);
        let l = model.batch_loss(&mut tape, &[utt], None)?;
        if l.used > 0 {
            loss += tape.value(l.total).item();
            used += 1;
        }
    }
    let n = if wer_limit == 0 { dev.len() } else { wer_limit.min(dev.len()) };
    let (mut errors, mut words) = (0, 0);
    for utt in &dev[..n] {
        let hyp = model.transcribe(utt)?;
        errors += edit_ops(&hyp, &utt.tokens).errors();
        words += utt.tokens.len();
    }
    Ok((loss / used.max(1) as f64, 100.0 * errors as f64 / words.max(1) as f64))
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,lr,train_loss,dev_loss,dev_wer")?;
    for r in rows {
        writeln!(w, "{},{:e},{:.6},{:.6},{:.4}", r.step, r.lr, r.train_loss, r.dev_loss, r.dev_wer)?;
    }
    w.flush()?;
    Ok(())
}

/// Optimize `model` in place and finish with the average of the last
/// `average_last_k` evaluation checkpoints. With `out_dir`, checkpoints,
/// the averaged model (`final.bin`) and `train_log.csv` are written there.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
    }
    let batches = bucket_batches(train_set, cfg.batch_size);
    let mut adam = Adam::new(model.params(), cfg);
    let mut aligned: HashMap<usize, (usize, Vec<usize>)> = HashMap::new();
    let mut recent: VecDeque<ParamStore> = VecDeque::new();
    let mut log = Vec::new();
    let (mut best, mut since_best, mut stopped_early) = (f64::INFINITY, 0, false);
    let (mut interval_loss, mut interval_n, mut skipped) = (0.0, 0usize, 0usize);
    let mut order: Vec<usize> = Vec::new();
    let mut step = 0;
    let dropout = model.config().dropout;
    let mask_mode = model.config().mask_mode;

    while step < cfg.max_steps {
        if order.is_empty() {
            let epoch = step / batches.len().max(1);
            order = (0..batches.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
            order.reverse();
        }
        let batch_idx = &batches[order.pop().unwrap()];
        let batch: Vec<&Utterance> = batch_idx.iter().map(|&i| &train_set[i]).collect();
        let fixed: Option<Vec<Option<Vec<usize>>>> = (cfg.align_refresh_every > 1).then(|| {
            batch_idx
                .iter()
                .map(|i| {
                    aligned
                        .get(i)
                        .filter(|(at, _)| step - at < cfg.align_refresh_every)
                        .map(|(_, l)| l.clone())
                })
                .collect()
        });

        let (grads, loss) = {
            let mut tape = Tape::new(model.params())
                .with_dropout(dropout, mix_seed(cfg.seed ^ 0x5eed, step as u64))
                .with_mask_mode(mask_mode);
            let loss = model.batch_loss(&mut tape, &batch, fixed.as_deref())?;
            skipped += loss.skipped;
            if loss.used == 0 {
                step += 1;
                continue;
            }
            let value = tape.value(loss.total).item();
            (tape.backward(loss.total)?, (value, loss.alignments))
        };
        let (value, alignments) = loss;
        if let Some(f) = &fixed {
            for ((&i, a), was) in batch_idx.iter().zip(alignments).zip(f) {
                if let (Some(a), None) = (a, was) {
                    aligned.insert(i, (step, a));
                }
            }
        }
        let mut grads = grads;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {value}")));
        }
        if let Some(id) = grads.first_non_finite() {
            log::error!("non-finite gradient at step {step}, loss {value}");
            return Err(Error::NonFinite(model.params().name(id).to_string()));
        }
        let norm = grads.global_norm();
        if norm > cfg.grad_clip {
            grads.scale(cfg.grad_clip / norm);
        }
        step += 1;
        let lr = cfg.lr_at(step as f64);
        adam.step(model.params_mut(), &grads, lr);
        interval_loss += value;
        interval_n += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (dev_loss, dev_wer) = evaluate_dev(model, dev, cfg.dev_wer_limit)?;
            let row = LogRow {
                step,
                lr,
                train_loss: interval_loss / interval_n.max(1) as f64,
                dev_loss,
                dev_wer,
            };
            log::info!(
                "step {step} lr {lr:.2e} train {:.4} dev {dev_loss:.4} wer {dev_wer:.2}",
                row.train_loss
            );
            log.push(row);
            (interval_loss, interval_n) = (0.0, 0);
            if let Some(d) = out_dir {
                model.params().save(&checkpoint_path(d, step))?;
            }
            recent.push_back(model.params().clone());
            if recent.len() > cfg.average_last_k.max(1) {
                recent.pop_front();
            }
            if dev_loss < best {
                best = dev_loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    log::info!("early stop at step {step}: no dev improvement in {} evaluations", cfg.patience);
                    break;
                }
            }
        }
    }

    let averaged = if cfg.average_last_k > 0 && !recent.is_empty() {
        let stores: Vec<ParamStore> = recent.into_iter().collect();
        let avg = ParamStore::average(&stores)?;
        model.params_mut().load_all(&avg)?;
        stores.len()
    } else {
        0
    };
    if let Some(d) = out_dir {
        model.params().save(&d.join("final.bin"))?;
        write_log_csv(&log, &d.join("train_log.csv"))?;
    }
    Ok(TrainOutcome {
        log,
        steps: step,
        best_dev_loss: best,
        stopped_early,
        skipped,
        averaged,
    })
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt-{step:06}.bin"))
}

/// Train the encoder and CTC head alone.
pub fn pretrain_encoder(
    config: &ModelConfig,
    seed: u64,
    train_set: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CtcModel, TrainOutcome)> {
    let mut model = CtcModel::new(config.clone(), seed)?;
    let outcome = train(&mut model, train_set, dev, cfg, out_dir)?;
    Ok((model, outcome))
}

/// Parameter-wise mean of checkpoint files.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<ParamStore> {
    let stores = paths.iter().map(|p| ParamStore::load(p)).collect::<Result<Vec<_>>>()?;
    ParamStore::average(&stores)
}
