//! Training loops: pretraining, task training, frozen-backbone finetuning,
//! evaluation, efficiency scoring and finite-difference gradient checking.
//!
//! Losses: binary heads use per-cell binary cross-entropy on the logits at
//! the final sequence position; token heads use softmax cross-entropy over
//! next-token targets, excluding padding.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    encode_frame, ChessSequence, PretrainDataset, ReasoningDataset, PAD_ID,
};
use crate::rng::{mix, rng_from_seed};

use super::net::{backward, forward, BatchInput, HeadSpec, Model, Params};
use super::optim::{clip_global_norm, AdamW, LrSchedule};
use super::{ModelError, TrainConfig};

/// A full supervised dataset in model-ready form.
#[derive(Debug, Clone)]
pub enum TaskData {
    /// `rows` is `(n * seq) x width` input features; `targets` is `n x width`
    /// desired output at the final position of each sample.
    Binary {
        rows: Array2<f64>,
        targets: Array2<f64>,
        seq: usize,
    },
    /// next-token prediction over fixed-length padded sequences
    Tokens {
        ids: Vec<u32>,
        seq: usize,
        vocab_size: usize,
        pad_id: u32,
    },
}

impl TaskData {
    pub fn n_samples(&self) -> usize {
        match self {
            TaskData::Binary { targets, .. } => targets.nrows(),
            TaskData::Tokens { ids, seq, .. } => ids.len() / seq,
        }
    }

    pub fn seq(&self) -> usize {
        match self {
            TaskData::Binary { seq, .. } | TaskData::Tokens { seq, .. } => *seq,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            TaskData::Binary { rows, .. } => rows.ncols(),
            TaskData::Tokens { vocab_size, .. } => *vocab_size,
        }
    }

    /// Window states in, final-horizon state out.
    pub fn from_pretrain(ds: &PretrainDataset) -> TaskData {
        let seq = ds.config.t_len;
        let width = ds.config.x_len;
        let n = ds.samples.len();
        let mut rows = Array2::zeros((n * seq, width));
        let mut targets = Array2::zeros((n, width));
        for (i, sample) in ds.samples.iter().enumerate() {
            for (t, state) in sample.window.iter().enumerate() {
                for x in 0..width {
                    rows[[i * seq + t, x]] = state.get(x) as u8 as f64;
                }
            }
            for x in 0..width {
                targets[[i, x]] = sample.target.get(x) as u8 as f64;
            }
        }
        TaskData::Binary { rows, targets, seq }
    }

    /// One-hot encoded frames in, next frame out: the first `F - 1` frames
    /// of each sequence are the context and the final frame is the target.
    pub fn from_reasoning(ds: &ReasoningDataset) -> TaskData {
        let width = ds.frame_bits();
        let seq = ds.seq_len - 1;
        let n = ds.sequences.len();
        let mut rows = Array2::zeros((n * seq, width));
        let mut targets = Array2::zeros((n, width));
        for (i, s) in ds.sequences.iter().enumerate() {
            for t in 0..seq {
                let bits = encode_frame(&s.frames[t], ds.n_colors);
                for (x, &b) in bits.iter().enumerate() {
                    rows[[i * seq + t, x]] = b as f64;
                }
            }
            let bits = encode_frame(&s.frames[seq], ds.n_colors);
            for (x, &b) in bits.iter().enumerate() {
                targets[[i, x]] = b as f64;
            }
        }
        TaskData::Binary { rows, targets, seq }
    }

    pub fn from_chess(seqs: &[ChessSequence], seq_len: usize, vocab_size: usize) -> TaskData {
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            assert_eq!(s.tokens.len(), seq_len, "chess sequences are fixed-length");
            ids.extend_from_slice(&s.tokens);
        }
        TaskData::Tokens {
            ids,
            seq: seq_len,
            vocab_size,
            pad_id: PAD_ID,
        }
    }

    /// Gather the samples at `indices` into one forward batch.
    fn batch(&self, indices: &[usize]) -> (BatchInput, BatchTargets) {
        match self {
            TaskData::Binary { rows, targets, seq } => {
                let width = rows.ncols();
                let mut brows = Array2::zeros((indices.len() * seq, width));
                let mut btargets = Array2::zeros((indices.len(), width));
                for (bi, &i) in indices.iter().enumerate() {
                    brows
                        .slice_mut(ndarray::s![bi * seq..(bi + 1) * seq, ..])
                        .assign(&rows.slice(ndarray::s![i * seq..(i + 1) * seq, ..]));
                    btargets.row_mut(bi).assign(&targets.row(i));
                }
                (
                    BatchInput::Binary {
                        rows: brows,
                        batch: indices.len(),
                        seq: *seq,
                    },
                    BatchTargets::Binary(btargets),
                )
            }
            TaskData::Tokens {
                ids, seq, pad_id, ..
            } => {
                let mut bids = Vec::with_capacity(indices.len() * seq);
                for &i in indices {
                    bids.extend_from_slice(&ids[i * seq..(i + 1) * seq]);
                }
                (
                    BatchInput::Tokens {
                        ids: bids.clone(),
                        batch: indices.len(),
                        seq: *seq,
                    },
                    BatchTargets::Tokens {
                        ids: bids,
                        pad_id: *pad_id,
                    },
                )
            }
        }
    }
}

enum BatchTargets {
    Binary(Array2<f64>),
    Tokens { ids: Vec<u32>, pad_id: u32 },
}

/// Mean loss and its gradient with respect to the logits.
fn loss_and_grad(
    logits: &Array2<f64>,
    targets: &BatchTargets,
    batch: usize,
    seq: usize,
) -> (f64, Array2<f64>) {
    let mut dlogits = Array2::zeros(logits.raw_dim());
    match targets {
        BatchTargets::Binary(y) => {
            let width = y.ncols();
            let denom = (batch * width) as f64;
            let mut loss = 0.0;
            for b in 0..batch {
                let row = b * seq + seq - 1;
                for x in 0..width {
                    let z = logits[[row, x]];
                    let t = y[[b, x]];
                    loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                    let sig = 1.0 / (1.0 + (-z).exp());
                    dlogits[[row, x]] = (sig - t) / denom;
                }
            }
            (loss / denom, dlogits)
        }
        BatchTargets::Tokens { ids, pad_id } => {
            let mut count = 0usize;
            let mut loss = 0.0;
            let mut rows_used: Vec<(usize, usize)> = Vec::new();
            for b in 0..batch {
                for t in 0..seq - 1 {
                    let target = ids[b * seq + t + 1];
                    if target == *pad_id {
                        continue;
                    }
                    rows_used.push((b * seq + t, target as usize));
                }
            }
            count += rows_used.len();
            let denom = count.max(1) as f64;
            for &(row, target) in &rows_used {
                let lrow = logits.row(row);
                let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsum = lrow.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                loss += logsum - lrow[target];
                for (j, &v) in lrow.iter().enumerate() {
                    let p = (v - logsum).exp();
                    dlogits[[row, j]] = (p - if j == target { 1.0 } else { 0.0 }) / denom;
                }
            }
            (loss / denom, dlogits)
        }
    }
}

/// Which accuracy drives threshold stopping and efficiency scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyKind {
    /// fraction of output cells predicted correctly
    PerCell,
    /// fraction of samples whose entire output state is correct
    ExactState,
    /// fraction of non-padding next tokens predicted correctly
    Token,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    /// per-cell accuracy for binary heads; per-token accuracy for token heads
    pub per_cell: f64,
    /// whole-sample accuracy (all cells / all non-pad tokens correct)
    pub exact: f64,
    pub n_samples: usize,
}

impl EvalMetrics {
    pub fn pick(&self, kind: AccuracyKind) -> f64 {
        match kind {
            AccuracyKind::PerCell | AccuracyKind::Token => self.per_cell,
            AccuracyKind::ExactState => self.exact,
        }
    }
}

/// Loss and accuracy of `model` on the samples of `data` at `indices`
/// (all samples if None), in deterministic evaluation mode.
pub fn evaluate(
    model: &Model,
    data: &TaskData,
    indices: Option<&[usize]>,
    batch_size: usize,
) -> Result<EvalMetrics, ModelError> {
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..data.n_samples()).collect();
            &all
        }
    };
    let seq = data.seq();
    let mut loss_sum = 0.0;
    let mut loss_weight = 0.0;
    let mut unit_correct = 0usize;
    let mut unit_total = 0usize;
    let mut exact_correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (input, targets) = data.batch(chunk);
        let out = forward(model, &input, false, None)?;
        let (loss, _) = loss_and_grad(&out.logits, &targets, chunk.len(), seq);
        loss_sum += loss * chunk.len() as f64;
        loss_weight += chunk.len() as f64;
        match &targets {
            BatchTargets::Binary(y) => {
                for b in 0..chunk.len() {
                    let row = b * seq + seq - 1;
                    let mut all_ok = true;
                    for x in 0..y.ncols() {
                        let pred = logits_to_bit(out.logits[[row, x]]);
                        let ok = pred == (y[[b, x]] > 0.5);
                        unit_correct += ok as usize;
                        all_ok &= ok;
                    }
                    unit_total += y.ncols();
                    exact_correct += all_ok as usize;
                }
            }
            BatchTargets::Tokens { ids, pad_id } => {
                for b in 0..chunk.len() {
                    let mut all_ok = true;
                    for t in 0..seq - 1 {
                        let target = ids[b * seq + t + 1];
                        if target == *pad_id {
                            continue;
                        }
                        let lrow = out.logits.row(b * seq + t);
                        let pred = lrow
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(j, _)| j)
                            .unwrap();
                        let ok = pred == target as usize;
                        unit_correct += ok as usize;
                        unit_total += 1;
                        all_ok &= ok;
                    }
                    exact_correct += all_ok as usize;
                }
            }
        }
    }
    Ok(EvalMetrics {
        loss: loss_sum / loss_weight.max(1.0),
        per_cell: unit_correct as f64 / unit_total.max(1) as f64,
        exact: exact_correct as f64 / indices.len().max(1) as f64,
        n_samples: indices.len(),
    })
}

fn logits_to_bit(z: f64) -> bool {
    z > 0.0
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// learning rate at the last optimizer step of each epoch
    pub lr: Vec<f64>,
    /// epoch (1-based) with the best validation loss
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// first epoch (1-based) whose monitored accuracy reached
    /// `stop_at_accuracy`, if any
    pub threshold_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Efficiency score: reciprocal of the first epoch whose monitored
/// validation accuracy reached `threshold`; 0 when it never did.
pub fn efficiency(history: &TrainHistory, threshold: f64) -> f64 {
    for (i, &acc) in history.val_accuracy.iter().enumerate() {
        if acc >= threshold {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

/// Pretraining: full model trains, early stopping on validation loss.
pub fn train_pretrain(
    model: &mut Model,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    train_inner(model, data, cfg, false)
}

/// Task training from scratch or warm start: full model trains.
pub fn train_task(
    model: &mut Model,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    train_inner(model, data, cfg, false)
}

/// Frozen-backbone finetuning: a fresh head is attached for `head_spec`,
/// only head tensors receive updates, and the backbone hash is verified
/// unchanged afterwards.
pub fn finetune_frozen(
    model: &mut Model,
    head_spec: HeadSpec,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    model.params.head = Model::fresh_head(&head_spec, model.config.d_model, cfg.seed);
    model.head_spec = head_spec;
    let backbone_before = model.params.backbone_hash();
    let history = train_inner(model, data, cfg, true)?;
    if model.params.backbone_hash() != backbone_before {
        return Err(ModelError::FrozenDrift);
    }
    Ok(history)
}

fn train_inner(
    model: &mut Model,
    data: &TaskData,
    cfg: &TrainConfig,
    freeze_backbone: bool,
) -> Result<TrainHistory, ModelError> {
    cfg.validate()?;
    let n = data.n_samples();
    if n == 0 {
        return Err(ModelError::Config("empty dataset".into()));
    }
    if data.input_width() != model.config.input_width
        && matches!(data, TaskData::Binary { .. })
        && !matches!(model.head_spec, HeadSpec::Binary { width } if width == data.input_width())
    {
        return Err(ModelError::Shape(format!(
            "data width {} does not match model head",
            data.input_width()
        )));
    }

    // deterministic split: shuffle once, hold out the tail for validation
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(mix(cfg.seed, 0x5b117)));
    let n_val = ((n as f64) * cfg.val_frac).floor() as usize;
    let n_val = n_val.min(n - 1);
    let (train_ix, val_ix) = order.split_at(n - n_val);
    let mut train_ix = train_ix.to_vec();
    let val_ix = val_ix.to_vec();

    let micro = cfg.batch_size;
    let micro_per_epoch = train_ix.len().div_ceil(micro);
    let steps_per_epoch = micro_per_epoch.div_ceil(cfg.grad_accum_steps);
    let schedule = LrSchedule::from_config(cfg, steps_per_epoch * cfg.max_epochs);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let frozen = |name: &str| freeze_backbone && !name.starts_with("head.");

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_accuracy: Vec::new(),
        lr: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        threshold_epoch: None,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Params> = None;
    let mut since_best = 0usize;
    let mut opt_step = 0usize;
    let seq = data.seq();

    for epoch in 0..cfg.max_epochs {
        train_ix.shuffle(&mut rng_from_seed(mix(cfg.seed, 0xe90c + epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        let mut accum: Option<Params> = None;
        let mut accum_count = 0usize;
        let mut last_lr = schedule.lr_at(opt_step.min(schedule.total_steps - 1));
        for (mb, chunk) in train_ix.chunks(micro).enumerate() {
            let (input, targets) = data.batch(chunk);
            let dropout_seed = if model.config.dropout > 0.0 {
                Some(mix(cfg.seed, 0xd0_0000 + epoch as u64 * 1_000_000 + mb as u64))
            } else {
                None
            };
            let out = forward(model, &input, false, dropout_seed)?;
            let (loss, dlogits) = loss_and_grad(&out.logits, &targets, chunk.len(), seq);
            if !loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch: epoch + 1,
                    step: opt_step,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            epoch_weight += chunk.len() as f64;
            let grads = backward(model, &input, &out.cache, &dlogits);
            match accum.as_mut() {
                None => accum = Some(grads),
                Some(acc) => {
                    for ((_, a), (_, g)) in
                        acc.tensors_mut().into_iter().zip(grads.tensors())
                    {
                        *a += g;
                    }
                }
            }
            accum_count += 1;
            let last_micro = mb + 1 == micro_per_epoch;
            if accum_count == cfg.grad_accum_steps || last_micro {
                let mut g = accum.take().unwrap();
                if accum_count > 1 {
                    let inv = 1.0 / accum_count as f64;
                    for (_, t) in g.tensors_mut() {
                        t.mapv_inplace(|v| v * inv);
                    }
                }
                clip_global_norm(&mut g, cfg.clip_norm);
                let lr = schedule.lr_at(opt_step);
                opt.step(&mut model.params, &g, lr, frozen);
                last_lr = lr;
                opt_step += 1;
                accum_count = 0;
            }
        }

        let eval_ix = if val_ix.is_empty() { &train_ix } else { &val_ix };
        let metrics = evaluate(model, data, Some(eval_ix), micro)?;
        history.train_loss.push(epoch_loss / epoch_weight);
        history.val_loss.push(metrics.loss);
        history
            .val_accuracy
            .push(metrics.pick(cfg.accuracy_kind));
        history.lr.push(last_lr);

        if metrics.loss < best_val - cfg.min_delta {
            best_val = metrics.loss;
            history.best_epoch = epoch + 1;
            best_params = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }

        if let Some(threshold) = cfg.stop_at_accuracy {
            if metrics.pick(cfg.accuracy_kind) >= threshold {
                history.threshold_epoch = Some(epoch + 1);
                return Ok(history);
            }
        }
        if since_best >= cfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(history)
}

/// Maximum relative error between analytic gradients and central finite
/// differences. Probes `n_checks` randomly chosen parameter coordinates,
/// or every coordinate when `n_checks` is at least the parameter count.
pub fn grad_check(
    model: &mut Model,
    data: &TaskData,
    n_checks: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    let n = data.n_samples();
    let indices: Vec<usize> = (0..n).collect();
    let seq = data.seq();
    let (input, targets) = data.batch(&indices);
    let out = forward(model, &input, false, None)?;
    let (_, dlogits) = loss_and_grad(&out.logits, &targets, n, seq);
    let analytic = backward(model, &input, &out.cache, &dlogits);

    let loss_of = |model: &Model| -> Result<f64, ModelError> {
        let out = forward(model, &input, false, None)?;
        Ok(loss_and_grad(&out.logits, &targets, n, seq).0)
    };

    let shapes: Vec<(String, usize, usize)> = model
        .params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, t.nrows(), t.ncols()))
        .collect();
    let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
    let mut coords: Vec<(usize, usize, usize)> = Vec::new();
    if n_checks >= total {
        for (ti, (_, rows, cols)) in shapes.iter().enumerate() {
            for r in 0..*rows {
                for c in 0..*cols {
                    coords.push((ti, r, c));
                }
            }
        }
    } else {
        let mut rng = rng_from_seed(mix(seed, 0x9cad));
        for _ in 0..n_checks {
            let ti = rng.gen_range(0..shapes.len());
            let (_, rows, cols) = shapes[ti];
            coords.push((ti, rng.gen_range(0..rows), rng.gen_range(0..cols)));
        }
    }
    let eps = 1e-4;
    let mut max_rel = 0.0_f64;
    for (ti, r, c) in coords {
        let a = analytic.tensors()[ti].1[[r, c]];
        let orig = model.params.tensors()[ti].1[[r, c]];
        model.params.tensors_mut()[ti].1[[r, c]] = orig + eps;
        let lp = loss_of(model)?;
        model.params.tensors_mut()[ti].1[[r, c]] = orig - eps;
        let lm = loss_of(model)?;
        model.params.tensors_mut()[ti].1[[r, c]] = orig;
        let num = (lp - lm) / (2.0 * eps);
        let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Final-layer hidden states (after the last block, before the final norm)
/// at the last position of each sample: the representation used for
/// similarity analysis.
pub fn final_hidden(model: &Model, data: &TaskData, batch_size: usize) -> Result<Array2<f64>, ModelError> {
    let n = data.n_samples();
    let seq = data.seq();
    let d = model.config.d_model;
    let mut out = Array2::zeros((n, d));
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (input, _) = data.batch(chunk);
        let fwd = forward(model, &input, false, None)?;
        for (bi, &i) in chunk.iter().enumerate() {
            out.row_mut(i)
                .assign(&fwd.cache.h_last().index_axis(Axis(0), bi * seq + seq - 1));
        }
    }
    Ok(out)
}

/// Mean final-position attention per layer/head over a probe batch.
pub fn attention_probe(
    model: &Model,
    data: &TaskData,
    indices: &[usize],
) -> Result<super::net::AttentionTrace, ModelError> {
    let (input, _) = data.batch(indices);
    let out = forward(model, &input, true, None)?;
    Ok(out.attention.expect("attention capture requested"))
}
