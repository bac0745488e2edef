//! Desk-scale trainable models. Every parameter carries the metadata
//! (layer type, depth, bias flag) that the grouping stage keys on.


use crate::nn::{
    encoder_forward, init_weight, linear, sinusoidal_positions, EncoderConfig,
    EncoderLayerWeights, EncoderWeights,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{concat, cross_entropy, mse, Tensor, TensorError, TensorResult};

/// Structural role of a parameter, fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerType {
    Embedding,
    Attention,
    FeedForward,
    LayerNorm,
    Other,
}

impl LayerType {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerType::Embedding => "embedding",
            LayerType::Attention => "attention",
            LayerType::FeedForward => "feed_forward",
            LayerType::LayerNorm => "layer_norm",
            LayerType::Other => "other",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub layer_type: LayerType,
    pub depth_index: usize,
    pub is_bias: bool,
}

/// A trainable tensor plus its grouping metadata.
#[derive(Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub meta: ParamMeta,
}

impl Parameter {
    fn new(
        value: Tensor,
        name: impl Into<String>,
        layer_type: LayerType,
        depth_index: usize,
        is_bias: bool,
    ) -> Parameter {
        Parameter {
            value,
            meta: ParamMeta {
                name: name.into(),
                layer_type,
                depth_index,
                is_bias,
            },
        }
    }
}

/// Task batches accepted by [`Model::loss`].
#[derive(Clone)]
pub enum Batch {
    /// Sequence inputs `[B, T]` with one target value per sequence `[B]`.
    Regression { inputs: Tensor, targets: Tensor },
    /// Token id sequences with next-token targets, both `B x T`.
    Tokens {
        inputs: Vec<Vec<usize>>,
        targets: Vec<Vec<usize>>,
    },
    /// Feature vectors `[B, n]` with integer class labels.
    Labeled { inputs: Tensor, labels: Vec<usize> },
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        match self {
            Batch::Regression { inputs, .. } => inputs.is_empty(),
            Batch::Tokens { inputs, .. } => inputs.is_empty(),
            Batch::Labeled { inputs, .. } => inputs.is_empty(),
        }
    }
}

fn batch_mismatch(model: &'static str) -> TensorError {
    TensorError::InvalidArgument {
        op: "model_loss",
        msg: format!("batch kind does not match {model} input contract"),
    }
}

// ── MLP ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Clone)]
pub struct Mlp {
    params: Vec<Parameter>,
    layer_sizes: Vec<usize>,
    loss_kind: LossKind,
}

impl Mlp {
    /// Fully-connected network with tanh hidden activations and a linear
    /// output layer. Parameter order per layer: weight then bias.
    pub fn new(layer_sizes: &[usize], loss_kind: LossKind, seed: u64) -> TensorResult<Mlp> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "build_mlp",
                msg: format!("need >= 2 positive layer sizes, got {layer_sizes:?}"),
            });
        }
        let mut rng = stream_rng(seed, Stream::ModelInit);
        let mut params = Vec::new();
        for (depth, w) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            params.push(Parameter::new(
                Tensor::leaf(init_weight(&mut rng, fan_in, fan_out), &[fan_in, fan_out]),
                format!("layer{depth}.weight"),
                LayerType::FeedForward,
                depth,
                false,
            ));
            params.push(Parameter::new(
                Tensor::leaf(vec![0.0; fan_out], &[fan_out]),
                format!("layer{depth}.bias"),
                LayerType::FeedForward,
                depth,
                true,
            ));
        }
        Ok(Mlp {
            params,
            layer_sizes: layer_sizes.to_vec(),
            loss_kind,
        })
    }

    pub fn depth_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Network output `[B, out]` for inputs `[B, in]`, evaluated at `values`.
    pub fn forward_logits(&self, values: &[Tensor], inputs: &Tensor) -> TensorResult<Tensor> {
        let n_layers = self.depth_count();
        let mut x = inputs.clone();
        for l in 0..n_layers {
            x = linear(&x, &values[2 * l], &values[2 * l + 1])?;
            if l + 1 < n_layers {
                x = x.tanh()?;
            }
        }
        Ok(x)
    }

    fn loss_with(&self, values: &[Tensor], batch: &Batch) -> TensorResult<Tensor> {
        match (self.loss_kind, batch) {
            (LossKind::Mse, Batch::Regression { inputs, targets }) => {
                mse(&self.forward_logits(values, inputs)?, targets)
            }
            (LossKind::CrossEntropy, Batch::Labeled { inputs, labels }) => {
                cross_entropy(&self.forward_logits(values, inputs)?, labels)
            }
            _ => Err(batch_mismatch("mlp")),
        }
    }
}

// ── tiny transformer ────────────────────────────────────────────────

/// What the encoder output feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceHead {
    /// Causal next-token prediction over a vocabulary.
    TokenLm,
    /// Next-value regression from the final position of a scalar sequence.
    NextValue,
}

#[derive(Clone)]
pub struct TinyTransformer {
    params: Vec<Parameter>,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    d_ff: usize,
    pub vocab_size: usize,
    head: SequenceHead,
    encoder_start: usize,
}

impl TinyTransformer {
    pub fn new(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_or_features: usize,
        head: SequenceHead,
        seed: u64,
    ) -> TensorResult<TinyTransformer> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::InvalidArgument {
                op: "build_tiny_transformer",
                msg: format!("d_model {d_model} not divisible by n_heads {n_heads}"),
            });
        }
        let d_ff = 2 * d_model;
        let mut rng = stream_rng(seed, Stream::ModelInit);
        let mut params = Vec::new();
        match head {
            SequenceHead::TokenLm => {
                params.push(Parameter::new(
                    Tensor::leaf(
                        init_weight(&mut rng, d_model, vocab_or_features),
                        &[vocab_or_features, d_model],
                    ),
                    "embed.table",
                    LayerType::Embedding,
                    0,
                    false,
                ));
            }
            SequenceHead::NextValue => {
                params.push(Parameter::new(
                    Tensor::leaf(init_weight(&mut rng, vocab_or_features, d_model), &[
                        vocab_or_features,
                        d_model,
                    ]),
                    "embed.proj",
                    LayerType::Embedding,
                    0,
                    false,
                ));
                params.push(Parameter::new(
                    Tensor::leaf(vec![0.0; d_model], &[d_model]),
                    "embed.bias",
                    LayerType::Embedding,
                    0,
                    true,
                ));
            }
        }
        let encoder_start = params.len();
        for layer in 0..n_layers {
            let depth = layer + 1;
            let push = |name: &str,
                            lt: LayerType,
                            bias: bool,
                            value: Tensor,
                            params: &mut Vec<Parameter>| {
                params.push(Parameter::new(
                    value,
                    format!("encoder{layer}.{name}"),
                    lt,
                    depth,
                    bias,
                ));
            };
            push(
                "ln1_gamma",
                LayerType::LayerNorm,
                false,
                Tensor::leaf(vec![1.0; d_model], &[d_model]),
                &mut params,
            );
            push(
                "ln1_beta",
                LayerType::LayerNorm,
                true,
                Tensor::leaf(vec![0.0; d_model], &[d_model]),
                &mut params,
            );
            for name in ["wq", "wk", "wv", "wo"] {
                push(
                    name,
                    LayerType::Attention,
                    false,
                    Tensor::leaf(init_weight(&mut rng, d_model, d_model), &[d_model, d_model]),
                    &mut params,
                );
                let bias_name = format!("b{}", &name[1..]);
                push(
                    &bias_name,
                    LayerType::Attention,
                    true,
                    Tensor::leaf(vec![0.0; d_model], &[d_model]),
                    &mut params,
                );
            }
            push(
                "ln2_gamma",
                LayerType::LayerNorm,
                false,
                Tensor::leaf(vec![1.0; d_model], &[d_model]),
                &mut params,
            );
            push(
                "ln2_beta",
                LayerType::LayerNorm,
                true,
                Tensor::leaf(vec![0.0; d_model], &[d_model]),
                &mut params,
            );
            push(
                "w1",
                LayerType::FeedForward,
                false,
                Tensor::leaf(init_weight(&mut rng, d_model, d_ff), &[d_model, d_ff]),
                &mut params,
            );
            push(
                "b1",
                LayerType::FeedForward,
                true,
                Tensor::leaf(vec![0.0; d_ff], &[d_ff]),
                &mut params,
            );
            push(
                "w2",
                LayerType::FeedForward,
                false,
                Tensor::leaf(init_weight(&mut rng, d_ff, d_model), &[d_ff, d_model]),
                &mut params,
            );
            push(
                "b2",
                LayerType::FeedForward,
                true,
                Tensor::leaf(vec![0.0; d_model], &[d_model]),
                &mut params,
            );
        }
        params.push(Parameter::new(
            Tensor::leaf(vec![1.0; d_model], &[d_model]),
            "final_gamma",
            LayerType::LayerNorm,
            n_layers,
            false,
        ));
        params.push(Parameter::new(
            Tensor::leaf(vec![0.0; d_model], &[d_model]),
            "final_beta",
            LayerType::LayerNorm,
            n_layers,
            true,
        ));
        let head_out = match head {
            SequenceHead::TokenLm => vocab_or_features,
            SequenceHead::NextValue => 1,
        };
        params.push(Parameter::new(
            Tensor::leaf(init_weight(&mut rng, d_model, head_out), &[d_model, head_out]),
            "head.weight",
            LayerType::Other,
            n_layers,
            false,
        ));
        params.push(Parameter::new(
            Tensor::leaf(vec![0.0; head_out], &[head_out]),
            "head.bias",
            LayerType::Other,
            n_layers,
            true,
        ));
        Ok(TinyTransformer {
            params,
            d_model,
            n_layers,
            n_heads,
            d_ff,
            vocab_size: vocab_or_features,
            head,
            encoder_start,
        })
    }

    pub fn depth_count(&self) -> usize {
        self.n_layers + 1
    }

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            causal: self.head == SequenceHead::TokenLm,
            canonical_token_sum: false,
        }
    }

    /// Re-binds a slice of parameter values to encoder weight handles.
    fn encoder_weights(&self, values: &[Tensor]) -> EncoderWeights {
        let mut at = self.encoder_start;
        let mut layers = Vec::with_capacity(self.n_layers);
        for _ in 0..self.n_layers {
            let v = &values[at..at + 16];
            layers.push(EncoderLayerWeights {
                ln1_gamma: v[0].clone(),
                ln1_beta: v[1].clone(),
                wq: v[2].clone(),
                bq: v[3].clone(),
                wk: v[4].clone(),
                bk: v[5].clone(),
                wv: v[6].clone(),
                bv: v[7].clone(),
                wo: v[8].clone(),
                bo: v[9].clone(),
                ln2_gamma: v[10].clone(),
                ln2_beta: v[11].clone(),
                w1: v[12].clone(),
                b1: v[13].clone(),
                w2: v[14].clone(),
                b2: v[15].clone(),
            });
            at += 16;
        }
        EncoderWeights {
            layers,
            final_gamma: values[at].clone(),
            final_beta: values[at + 1].clone(),
        }
    }

    /// Encoded sequence `[T, d]` for one item, at the given values.
    fn encode_item(&self, values: &[Tensor], embedded: &Tensor) -> TensorResult<Tensor> {
        let pos = sinusoidal_positions(embedded.shape()[0], self.d_model);
        encoder_forward(
            &self.encoder_config(),
            &self.encoder_weights(values),
            &embedded.add(&pos)?,
        )
    }

    fn head_weights<'v>(&self, values: &'v [Tensor]) -> (&'v Tensor, &'v Tensor) {
        let n = values.len();
        (&values[n - 2], &values[n - 1])
    }

    /// Per-position vocabulary logits `[T, V]` for one token sequence.
    pub fn lm_logits(&self, values: &[Tensor], ids: &[usize]) -> TensorResult<Tensor> {
        if self.head != SequenceHead::TokenLm {
            return Err(batch_mismatch("transformer"));
        }
        let embedded = values[0].lookup_rows(ids)?;
        let encoded = self.encode_item(values, &embedded)?;
        let (w, b) = self.head_weights(values);
        linear(&encoded, w, b)
    }

    /// Mean cross-entropy over the first `prefix` positions of every
    /// sequence (used to check that future tokens cannot leak backward).
    pub fn lm_loss_prefix(
        &self,
        values: &[Tensor],
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        prefix: usize,
    ) -> TensorResult<Tensor> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        for (ids, tgt) in inputs.iter().zip(targets) {
            let logits = self.lm_logits(values, ids)?;
            parts.push(logits.slice(0, 0, prefix.min(ids.len()))?);
            labels.extend_from_slice(&tgt[..prefix.min(tgt.len())]);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        cross_entropy(&concat(&refs, 0)?, &labels)
    }

    fn loss_with(&self, values: &[Tensor], batch: &Batch) -> TensorResult<Tensor> {
        match (self.head, batch) {
            (SequenceHead::TokenLm, Batch::Tokens { inputs, targets }) => {
                if inputs.is_empty() {
                    return Err(batch_mismatch("transformer"));
                }
                let mut parts = Vec::new();
                let mut labels = Vec::new();
                for (ids, tgt) in inputs.iter().zip(targets) {
                    parts.push(self.lm_logits(values, ids)?);
                    labels.extend_from_slice(tgt);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                cross_entropy(&concat(&refs, 0)?, &labels)
            }
            (SequenceHead::NextValue, Batch::Regression { inputs, targets }) => {
                if inputs.ndim() != 2 || inputs.shape()[1] == 0 {
                    return Err(batch_mismatch("transformer"));
                }
                let (b, t) = (inputs.shape()[0], inputs.shape()[1]);
                let (w, bias) = self.head_weights(values);
                let mut preds = Vec::with_capacity(b);
                for i in 0..b {
                    let seq = inputs.slice(0, i, i + 1)?.reshape(&[t, 1])?;
                    let embedded = linear(&seq, &values[0], &values[1])?;
                    let encoded = self.encode_item(values, &embedded)?;
                    let last = encoded.slice(0, t - 1, t)?;
                    preds.push(linear(&last, w, bias)?.reshape(&[1])?);
                }
                let refs: Vec<&Tensor> = preds.iter().collect();
                mse(&concat(&refs, 0)?, targets)
            }
            _ => Err(batch_mismatch("transformer")),
        }
    }
}

// ── unified model ───────────────────────────────────────────────────

/// A trainable model: an ordered parameter list plus a differentiable
/// scalar loss. Cloning yields an independent model.
#[derive(Clone)]
pub enum Model {
    Mlp(Mlp),
    Transformer(TinyTransformer),
}

impl Model {
    pub fn params(&self) -> &[Parameter] {
        match self {
            Model::Mlp(m) => &m.params,
            Model::Transformer(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        match self {
            Model::Mlp(m) => &mut m.params,
            Model::Transformer(m) => &mut m.params,
        }
    }

    /// Current parameter value handles, in parameter order.
    pub fn param_values(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn depth_count(&self) -> usize {
        match self {
            Model::Mlp(m) => m.depth_count(),
            Model::Transformer(m) => m.depth_count(),
        }
    }

    /// Scalar task loss at the model's own parameters.
    pub fn loss(&self, batch: &Batch) -> TensorResult<Tensor> {
        self.loss_with(&self.param_values(), batch)
    }

    /// Scalar task loss at substituted parameter values (used for the
    /// hypothetical step inside the meta-update).
    pub fn loss_with(&self, values: &[Tensor], batch: &Batch) -> TensorResult<Tensor> {
        assert_eq!(values.len(), self.params().len(), "value slice mismatch");
        match self {
            Model::Mlp(m) => m.loss_with(values, batch),
            Model::Transformer(m) => m.loss_with(values, batch),
        }
    }
}

/// Fully-connected regression network (tanh hidden layers, MSE loss).
pub fn build_mlp(layer_sizes: &[usize], seed: u64) -> TensorResult<Model> {
    Ok(Model::Mlp(Mlp::new(layer_sizes, LossKind::Mse, seed)?))
}

/// MLP classifier: logits output, mean cross-entropy loss.
pub fn build_mlp_classifier(layer_sizes: &[usize], seed: u64) -> TensorResult<Model> {
    Ok(Model::Mlp(Mlp::new(layer_sizes, LossKind::CrossEntropy, seed)?))
}

/// Tiny transformer; `vocab_or_features` is the vocabulary size for
/// [`SequenceHead::TokenLm`] and the per-step feature count for
/// [`SequenceHead::NextValue`].
pub fn build_tiny_transformer(
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    vocab_or_features: usize,
    head: SequenceHead,
    seed: u64,
) -> TensorResult<Model> {
    Ok(Model::Transformer(TinyTransformer::new(
        d_model,
        n_layers,
        n_heads,
        vocab_or_features,
        head,
        seed,
    )?))
}
