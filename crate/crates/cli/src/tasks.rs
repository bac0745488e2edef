//! The three desk-scale tasks: sine-mixture next-step forecasting (tiny
//! transformer, MSE), char-level language modeling on an embedded
//! public-domain corpus (perplexity), and two-spirals classification
//! (MLP, accuracy). All data generation is seed-deterministic.

use anyhow::{bail, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use meta_adamw::model::{
    build_mlp_classifier, build_tiny_transformer, Batch, Model, SequenceHead,
};
use meta_adamw::no_grad;
use meta_adamw::rng::{stream_rng, Stream};
use meta_adamw::tensor::Tensor;

use crate::config::TaskId;

/// Raw corpus assembled from classic public-domain passages; tiled below to
/// roughly 100 KB so window sampling has a realistic index space.
const CORPUS_RAW: &str = include_str!("../data/corpus.txt");
const CORPUS_TARGET_CHARS: usize = 100_000;

const SINE_SEQ_LEN: usize = 16;
const SINE_VAL_WINDOWS: usize = 128;
const LM_SEQ_LEN: usize = 32;
const LM_VAL_WINDOWS: usize = 48;
const SPIRAL_TRAIN_POINTS: usize = 512;
const SPIRAL_VAL_POINTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mse,
    Perplexity,
    Accuracy,
}

impl MetricKind {
    pub fn higher_is_better(&self) -> bool {
        matches!(self, MetricKind::Accuracy)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::Perplexity => "perplexity",
            MetricKind::Accuracy => "accuracy",
        }
    }
}

enum TaskData {
    Sine {
        val_inputs: Vec<Vec<f64>>,
        val_targets: Vec<f64>,
    },
    CharLm {
        ids: Vec<usize>,
        vocab_size: usize,
        train_end: usize,
        val_starts: Vec<usize>,
    },
    Spirals {
        train_points: Vec<[f64; 2]>,
        train_labels: Vec<usize>,
        val_points: Vec<[f64; 2]>,
        val_labels: Vec<usize>,
    },
}

pub struct Task {
    pub id: TaskId,
    data: TaskData,
}

// ── generators ──────────────────────────────────────────────────────

/// One sine-mixture window: three random components summed, sampled at unit
/// steps; the target is the value one step past the window.
fn sine_window(rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.1..0.8),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let sample = |i: usize| -> f64 {
        comps
            .iter()
            .map(|(a, w, p)| a * (w * i as f64 + p).sin())
            .sum()
    };
    ((0..SINE_SEQ_LEN).map(sample).collect(), sample(SINE_SEQ_LEN))
}

fn spiral_points(
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<[f64; 2]>, Vec<usize>) {
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let frac = (i / 2) as f64 / (n / 2).max(1) as f64;
        let r = 0.25 + 0.75 * frac;
        let angle = 2.5 * std::f64::consts::PI * frac + class as f64 * std::f64::consts::PI;
        points.push([
            r * angle.sin() + noise * rng.gen_range(-1.0..1.0),
            r * angle.cos() + noise * rng.gen_range(-1.0..1.0),
        ]);
        labels.push(class);
    }
    (points, labels)
}

fn corpus_ids() -> (Vec<usize>, usize) {
    let mut text = String::with_capacity(CORPUS_TARGET_CHARS + CORPUS_RAW.len());
    while text.len() < CORPUS_TARGET_CHARS {
        text.push_str(CORPUS_RAW);
    }
    let mut vocab: Vec<char> = {
        let mut set: Vec<char> = text.chars().collect();
        set.sort_unstable();
        set.dedup();
        set
    };
    vocab.sort_unstable();
    let index = |c: char| vocab.binary_search(&c).expect("vocab covers corpus");
    (text.chars().map(index).collect(), vocab.len())
}

impl Task {
    /// Builds the task's fixed data (validation sets, corpora) from the
    /// run seed's data stream.
    pub fn new(id: TaskId, seed: u64) -> Task {
        let mut rng = stream_rng(seed, Stream::Data);
        let data = match id {
            TaskId::Sine => {
                let mut val_inputs = Vec::with_capacity(SINE_VAL_WINDOWS);
                let mut val_targets = Vec::with_capacity(SINE_VAL_WINDOWS);
                for _ in 0..SINE_VAL_WINDOWS {
                    let (xs, y) = sine_window(&mut rng);
                    val_inputs.push(xs);
                    val_targets.push(y);
                }
                TaskData::Sine {
                    val_inputs,
                    val_targets,
                }
            }
            TaskId::Charlm => {
                let (ids, vocab_size) = corpus_ids();
                let train_end = ids.len() * 9 / 10;
                let last_start = ids.len() - LM_SEQ_LEN - 1;
                let mut val_starts: Vec<usize> = (train_end..last_start)
                    .step_by(LM_SEQ_LEN)
                    .take(LM_VAL_WINDOWS)
                    .collect();
                val_starts.dedup();
                TaskData::CharLm {
                    ids,
                    vocab_size,
                    train_end,
                    val_starts,
                }
            }
            TaskId::Spirals => {
                let (train_points, train_labels) =
                    spiral_points(SPIRAL_TRAIN_POINTS, 0.03, &mut rng);
                let (val_points, val_labels) = spiral_points(SPIRAL_VAL_POINTS, 0.03, &mut rng);
                TaskData::Spirals {
                    train_points,
                    train_labels,
                    val_points,
                    val_labels,
                }
            }
        };
        Task { id, data }
    }

    pub fn metric_kind(&self) -> MetricKind {
        match self.id {
            TaskId::Sine => MetricKind::Mse,
            TaskId::Charlm => MetricKind::Perplexity,
            TaskId::Spirals => MetricKind::Accuracy,
        }
    }

    pub fn build_model(&self, seed: u64) -> Result<Model> {
        let model = match &self.data {
            TaskData::Sine { .. } => {
                build_tiny_transformer(16, 1, 2, 1, SequenceHead::NextValue, seed)
            }
            TaskData::CharLm { vocab_size, .. } => {
                build_tiny_transformer(16, 1, 2, *vocab_size, SequenceHead::TokenLm, seed)
            }
            TaskData::Spirals { .. } => build_mlp_classifier(&[2, 32, 32, 2], seed),
        };
        model.map_err(|e| anyhow::anyhow!("{e}"))
    }

    /// A fresh training batch from the given stream.
    pub fn train_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Batch {
        match &self.data {
            TaskData::Sine { .. } => {
                let mut flat = Vec::with_capacity(batch_size * SINE_SEQ_LEN);
                let mut targets = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let (xs, y) = sine_window(rng);
                    flat.extend(xs);
                    targets.push(y);
                }
                Batch::Regression {
                    inputs: Tensor::constant(flat, &[batch_size, SINE_SEQ_LEN]),
                    targets: Tensor::constant(targets, &[batch_size]),
                }
            }
            TaskData::CharLm { ids, train_end, .. } => {
                let last = train_end - LM_SEQ_LEN - 1;
                let mut inputs = Vec::with_capacity(batch_size);
                let mut targets = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let s = rng.gen_range(0..last);
                    inputs.push(ids[s..s + LM_SEQ_LEN].to_vec());
                    targets.push(ids[s + 1..s + LM_SEQ_LEN + 1].to_vec());
                }
                Batch::Tokens { inputs, targets }
            }
            TaskData::Spirals {
                train_points,
                train_labels,
                ..
            } => {
                let mut flat = Vec::with_capacity(batch_size * 2);
                let mut labels = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let i = rng.gen_range(0..train_points.len());
                    flat.extend(train_points[i]);
                    labels.push(train_labels[i]);
                }
                Batch::Labeled {
                    inputs: Tensor::constant(flat, &[batch_size, 2]),
                    labels,
                }
            }
        }
    }

    /// A batch drawn from the held-out validation data (the meta-update's
    /// B_val; resampled once per epoch by the training loop).
    pub fn val_batch(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Batch {
        match &self.data {
            TaskData::Sine {
                val_inputs,
                val_targets,
            } => {
                let mut flat = Vec::with_capacity(batch_size * SINE_SEQ_LEN);
                let mut targets = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let i = rng.gen_range(0..val_inputs.len());
                    flat.extend(val_inputs[i].iter().copied());
                    targets.push(val_targets[i]);
                }
                Batch::Regression {
                    inputs: Tensor::constant(flat, &[batch_size, SINE_SEQ_LEN]),
                    targets: Tensor::constant(targets, &[batch_size]),
                }
            }
            TaskData::CharLm {
                ids, val_starts, ..
            } => {
                let mut inputs = Vec::with_capacity(batch_size);
                let mut targets = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let s = val_starts[rng.gen_range(0..val_starts.len())];
                    inputs.push(ids[s..s + LM_SEQ_LEN].to_vec());
                    targets.push(ids[s + 1..s + LM_SEQ_LEN + 1].to_vec());
                }
                Batch::Tokens { inputs, targets }
            }
            TaskData::Spirals {
                val_points,
                val_labels,
                ..
            } => {
                let mut flat = Vec::with_capacity(batch_size * 2);
                let mut labels = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    let i = rng.gen_range(0..val_points.len());
                    flat.extend(val_points[i]);
                    labels.push(val_labels[i]);
                }
                Batch::Labeled {
                    inputs: Tensor::constant(flat, &[batch_size, 2]),
                    labels,
                }
            }
        }
    }

    /// Full pass over the fixed validation set: (mean loss, task metric).
    pub fn evaluate(&self, model: &Model, batch_size: usize) -> Result<(f64, f64)> {
        match &self.data {
            TaskData::Sine {
                val_inputs,
                val_targets,
            } => {
                let mut se_sum = 0.0;
                let mut count = 0usize;
                for chunk in val_inputs.chunks(batch_size).zip(val_targets.chunks(batch_size)) {
                    let (xs, ys) = chunk;
                    let b = xs.len();
                    let batch = Batch::Regression {
                        inputs: Tensor::constant(
                            xs.iter().flatten().copied().collect(),
                            &[b, SINE_SEQ_LEN],
                        ),
                        targets: Tensor::constant(ys.to_vec(), &[b]),
                    };
                    let loss = no_grad(|| model.loss(&batch))
                        .map_err(|e| anyhow::anyhow!("{e}"))?
                        .item();
                    se_sum += loss * b as f64;
                    count += b;
                }
                let mse = se_sum / count as f64;
                Ok((mse, mse))
            }
            TaskData::CharLm {
                ids, val_starts, ..
            } => {
                let mut ce_sum = 0.0;
                let mut count = 0usize;
                for starts in val_starts.chunks(batch_size) {
                    let inputs: Vec<Vec<usize>> = starts
                        .iter()
                        .map(|&s| ids[s..s + LM_SEQ_LEN].to_vec())
                        .collect();
                    let targets: Vec<Vec<usize>> = starts
                        .iter()
                        .map(|&s| ids[s + 1..s + LM_SEQ_LEN + 1].to_vec())
                        .collect();
                    let b = inputs.len();
                    let batch = Batch::Tokens { inputs, targets };
                    let loss = no_grad(|| model.loss(&batch))
                        .map_err(|e| anyhow::anyhow!("{e}"))?
                        .item();
                    ce_sum += loss * b as f64;
                    count += b;
                }
                let ce = ce_sum / count as f64;
                Ok((ce, ce.exp()))
            }
            TaskData::Spirals {
                val_points,
                val_labels,
                ..
            } => classification_eval(model, val_points, val_labels, batch_size),
        }
    }

    /// Metric on one training batch, for the per-epoch train row.
    pub fn train_metric(&self, model: &Model, mean_train_loss: f64, batch: &Batch) -> Result<f64> {
        match self.metric_kind() {
            MetricKind::Mse => Ok(mean_train_loss),
            MetricKind::Perplexity => Ok(mean_train_loss.exp()),
            MetricKind::Accuracy => match batch {
                Batch::Labeled { inputs, labels } => {
                    let (_, acc) = classification_eval_tensor(model, inputs, labels)?;
                    Ok(acc)
                }
                _ => bail!("accuracy metric needs a labeled batch"),
            },
        }
    }
}

fn classification_eval(
    model: &Model,
    points: &[[f64; 2]],
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (xs, ys) in points.chunks(batch_size).zip(labels.chunks(batch_size)) {
        let b = xs.len();
        let inputs = Tensor::constant(xs.iter().flatten().copied().collect(), &[b, 2]);
        let (loss, acc) = classification_eval_tensor(model, &inputs, ys)?;
        loss_sum += loss * b as f64;
        correct += (acc * b as f64).round() as usize;
    }
    Ok((
        loss_sum / points.len() as f64,
        correct as f64 / points.len() as f64,
    ))
}

/// (mean cross-entropy, accuracy) of an MLP classifier on one batch.
fn classification_eval_tensor(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let Model::Mlp(mlp) = model else {
        bail!("classification evaluation expects an MLP model");
    };
    no_grad(|| -> Result<(f64, f64)> {
        let logits = mlp
            .forward_logits(&model.param_values(), inputs)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        let loss = meta_adamw::tensor::cross_entropy(&logits, labels)
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .item();
        let classes = logits.shape()[1];
        let mut correct = 0usize;
        for (row, &label) in labels.iter().enumerate() {
            let r = &logits.data()[row * classes..(row + 1) * classes];
            let pred = (0..classes)
                .max_by(|&a, &b| r[a].total_cmp(&r[b]))
                .unwrap();
            if pred == label {
                correct += 1;
            }
        }
        Ok((loss, correct as f64 / labels.len() as f64))
    })
}
