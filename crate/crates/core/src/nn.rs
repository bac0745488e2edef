//! Shared neural building blocks on top of the tensor engine: linear and
//! layer-norm application, sinusoidal positions, and a pre-norm transformer
//! encoder reused by both the task models and the modulation network.

use rand_chacha::ChaCha8Rng;

use crate::rng::uniform_symmetric;
use crate::tensor::{concat, Tensor, TensorError, TensorResult};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x @ w + b` with the bias broadcast over rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    x.matmul(w)?.add(b)
}

/// Last-axis layer norm followed by elementwise scale and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> TensorResult<Tensor> {
    x.layer_norm_last(LAYER_NORM_EPS)?.mul(gamma)?.add(beta)
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix `[fan_in, fan_out]`.
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| uniform_symmetric(rng, bound))
        .collect()
}

/// Fixed sinusoidal positional encoding `[len, d]` (non-trainable).
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::constant(data, &[len, d])
}

/// Additive causal mask `[len, len]`: 0 at or below the diagonal, a large
/// negative constant above it.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::constant(data, &[len, len])
}

// ── transformer encoder ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub causal: bool,
    /// Token-axis reductions accumulate in canonical (sorted) order, which
    /// makes the forward pass exactly equivariant under token permutation.
    pub canonical_token_sum: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TensorError::InvalidArgument {
                op: "encoder",
                msg: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        Ok(())
    }
}

/// Weights of one pre-norm encoder layer.
pub struct EncoderLayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Full encoder stack plus the final norm.
pub struct EncoderWeights {
    pub layers: Vec<EncoderLayerWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl EncoderWeights {
    /// Standard-initialized stack: uniform weights, zero biases, unit norms.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> EncoderWeights {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayerWeights {
                ln1_gamma: Tensor::leaf(vec![1.0; d], &[d]),
                ln1_beta: Tensor::leaf(vec![0.0; d], &[d]),
                wq: Tensor::leaf(init_weight(rng, d, d), &[d, d]),
                bq: Tensor::leaf(vec![0.0; d], &[d]),
                wk: Tensor::leaf(init_weight(rng, d, d), &[d, d]),
                bk: Tensor::leaf(vec![0.0; d], &[d]),
                wv: Tensor::leaf(init_weight(rng, d, d), &[d, d]),
                bv: Tensor::leaf(vec![0.0; d], &[d]),
                wo: Tensor::leaf(init_weight(rng, d, d), &[d, d]),
                bo: Tensor::leaf(vec![0.0; d], &[d]),
                ln2_gamma: Tensor::leaf(vec![1.0; d], &[d]),
                ln2_beta: Tensor::leaf(vec![0.0; d], &[d]),
                w1: Tensor::leaf(init_weight(rng, d, cfg.d_ff), &[d, cfg.d_ff]),
                b1: Tensor::leaf(vec![0.0; cfg.d_ff], &[cfg.d_ff]),
                w2: Tensor::leaf(init_weight(rng, cfg.d_ff, d), &[cfg.d_ff, d]),
                b2: Tensor::leaf(vec![0.0; d], &[d]),
            })
            .collect();
        EncoderWeights {
            layers,
            final_gamma: Tensor::leaf(vec![1.0; d], &[d]),
            final_beta: Tensor::leaf(vec![0.0; d], &[d]),
        }
    }

    /// All weights with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gamma", &l.ln1_gamma),
                ("ln1_beta", &l.ln1_beta),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gamma", &l.ln2_gamma),
                ("ln2_beta", &l.ln2_beta),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_gamma".into(), &self.final_gamma));
        out.push(("final_beta".into(), &self.final_beta));
        out
    }

    /// Mutable view in the same order as [`named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1_gamma", &mut l.ln1_gamma),
                ("ln1_beta", &mut l.ln1_beta),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_gamma", &mut l.ln2_gamma),
                ("ln2_beta", &mut l.ln2_beta),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_gamma".into(), &mut self.final_gamma));
        out.push(("final_beta".into(), &mut self.final_beta));
        out
    }
}

/// Multi-head self-attention over one sequence `[len, d]`.
fn self_attention(
    cfg: &EncoderConfig,
    l: &EncoderLayerWeights,
    x: &Tensor,
    mask: Option<&Tensor>,
) -> TensorResult<Tensor> {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, &l.wq, &l.bq)?;
    let k = linear(x, &l.wk, &l.bk)?;
    let v = linear(x, &l.wv, &l.bv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice(1, lo, hi)?;
        let kh = k.slice(1, lo, hi)?;
        let vh = v.slice(1, lo, hi)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.mul_scalar(scale)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let attn = if cfg.canonical_token_sum {
            scores.softmax_last_canonical()?
        } else {
            scores.softmax_last()?
        };
        heads.push(if cfg.canonical_token_sum {
            attn.matmul_canonical(&vh)?
        } else {
            attn.matmul(&vh)?
        });
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    linear(&concat(&refs, 1)?, &l.wo, &l.bo)
}

/// Pre-norm encoder forward over one sequence `[len, d_model]`.
pub fn encoder_forward(
    cfg: &EncoderConfig,
    w: &EncoderWeights,
    x: &Tensor,
) -> TensorResult<Tensor> {
    cfg.validate()?;
    if x.ndim() != 2 || x.shape()[1] != cfg.d_model {
        return Err(TensorError::ShapeMismatch {
            op: "encoder",
            lhs: x.shape().to_vec(),
            rhs: vec![0, cfg.d_model],
        });
    }
    let mask = if cfg.causal {
        Some(causal_mask(x.shape()[0]))
    } else {
        None
    };
    let mut h = x.clone();
    for l in &w.layers {
        let attn = self_attention(cfg, l, &layer_norm(&h, &l.ln1_gamma, &l.ln1_beta)?, mask.as_ref())?;
        h = h.add(&attn)?;
        let xn = layer_norm(&h, &l.ln2_gamma, &l.ln2_beta)?;
        let ffn = linear(&linear(&xn, &l.w1, &l.b1)?.relu()?, &l.w2, &l.b2)?;
        h = h.add(&ffn)?;
    }
    layer_norm(&h, &w.final_gamma, &w.final_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn encoder_shapes_and_finiteness() {
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 2,
            causal: false,
            canonical_token_sum: false,
        };
        let mut rng = stream_rng(1, Stream::Test);
        let w = EncoderWeights::init(&cfg, &mut rng);
        let x = Tensor::constant((0..40).map(|i| (i as f64 * 0.17).sin()).collect(), &[5, 8]);
        let y = encoder_forward(&cfg, &w, &x).unwrap();
        assert_eq!(y.shape(), &[5, 8]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_dim_one_is_permitted() {
        let cfg = EncoderConfig {
            d_model: 6,
            n_heads: 6,
            d_ff: 4,
            n_layers: 1,
            causal: false,
            canonical_token_sum: true,
        };
        let mut rng = stream_rng(2, Stream::Test);
        let w = EncoderWeights::init(&cfg, &mut rng);
        let x = Tensor::constant(vec![0.1; 18], &[3, 6]);
        assert!(encoder_forward(&cfg, &w, &x).is_ok());
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 3,
            d_ff: 4,
            n_layers: 1,
            causal: false,
            canonical_token_sum: false,
        };
        assert!(cfg.validate().is_err());
    }
}
