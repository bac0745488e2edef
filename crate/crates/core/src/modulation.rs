//! The modulation network: a small transformer encoder over group-feature
//! tokens plus a linear head whose four raw outputs are squashed into the
//! per-group factors (alpha, beta, lambda1, lambda2).
//!
//! The output head is zero-initialized, so a fresh network emits exactly
//! alpha = beta = 1 and lambda = 0.5 for every group regardless of the
//! encoder state: one MetaAdamW step then coincides with one AdamW step.

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointError};
use crate::features::{FeatureMatrix, GateParams};
use crate::nn::{encoder_forward, EncoderConfig, EncoderWeights};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Architecture and squash ranges. `feature_dim` doubles as the encoder
/// model width (one token per group, one column per feature).
#[derive(Debug, Clone, Copy)]
pub struct ModulationConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub feature_dim: usize,
    pub range_alpha: f64,
    pub range_beta: f64,
    /// Width of the learnable per-group embedding appended to enhanced
    /// features; 0 disables the table.
    pub group_embed_width: usize,
    /// L1 weight of the feature gate; `None` disables gating.
    pub gate_l1_weight: Option<f64>,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig {
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            feature_dim: 6,
            range_alpha: 1.0,
            range_beta: 1.0,
            group_embed_width: 0,
            gate_l1_weight: None,
        }
    }
}

pub struct ModulationNetwork {
    pub cfg: ModulationConfig,
    pub encoder: EncoderWeights,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub group_embeddings: Option<Tensor>,
    pub gate: Option<GateParams>,
}

/// Per-group factors. Alpha and beta live in the open interval
/// (1 - range/2, 1 + range/2); both lambdas live in (0, 1).
pub struct ModulationFactors {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub lambda1: Tensor,
    pub lambda2: Tensor,
}

impl ModulationFactors {
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha.data().to_vec()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.beta.data().to_vec()
    }
}

impl ModulationNetwork {
    fn encoder_config(cfg: &ModulationConfig) -> EncoderConfig {
        EncoderConfig {
            d_model: cfg.feature_dim,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            n_layers: cfg.n_layers,
            causal: false,
            // groups carry no order; canonical sums keep the forward pass
            // exactly permutation-equivariant
            canonical_token_sum: true,
        }
    }

    /// Standard-initialized encoder, zero-initialized head. `n_groups` sizes
    /// the embedding table when `group_embed_width > 0`.
    pub fn new(cfg: ModulationConfig, n_groups: usize, seed: u64) -> TensorResult<ModulationNetwork> {
        Self::encoder_config(&cfg).validate()?;
        let mut rng = stream_rng(seed, Stream::ModulationInit);
        let encoder = EncoderWeights::init(&Self::encoder_config(&cfg), &mut rng);
        let d = cfg.feature_dim;
        let group_embeddings = (cfg.group_embed_width > 0).then(|| {
            embed_table(&mut rng, n_groups, cfg.group_embed_width)
        });
        let gate = cfg.gate_l1_weight.map(|w| GateParams::new(d, w));
        Ok(ModulationNetwork {
            cfg,
            encoder,
            w_out: Tensor::leaf(vec![0.0; d * 4], &[d, 4]),
            b_out: Tensor::leaf(vec![0.0; 4], &[4]),
            group_embeddings,
            gate,
        })
    }

    /// Every learnable tensor of the network, named, in a fixed order.
    pub fn phi_named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .named()
            .into_iter()
            .map(|(n, t)| (format!("enc.{n}"), t))
            .collect();
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        if let Some(e) = &self.group_embeddings {
            out.push(("group_embeddings".into(), e));
        }
        if let Some(g) = &self.gate {
            out.push(("gate_logits".into(), &g.logits));
        }
        out
    }

    pub fn phi_named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .encoder
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("enc.{n}"), t))
            .collect();
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        if let Some(e) = &mut self.group_embeddings {
            out.push(("group_embeddings".into(), e));
        }
        if let Some(g) = &mut self.gate {
            out.push(("gate_logits".into(), &mut g.logits));
        }
        out
    }

    pub fn phi_tensors(&self) -> Vec<Tensor> {
        self.phi_named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.phi_named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn embed_table(rng: &mut ChaCha8Rng, n_groups: usize, width: usize) -> Tensor {
    Tensor::leaf(crate::nn::init_weight(rng, width, n_groups), &[n_groups, width])
}

/// Runs the encoder over the G feature tokens (no positions, no mask) and
/// squashes the head outputs:
/// alpha = 1 + range_a (sigmoid(raw1) - 0.5), beta likewise with range_b,
/// lambda1 = sigmoid(raw3), lambda2 = sigmoid(raw4).
pub fn modulate(net: &ModulationNetwork, f: &FeatureMatrix) -> TensorResult<ModulationFactors> {
    let g = f.group_count();
    if g == 0 {
        return Err(TensorError::InvalidArgument {
            op: "modulate",
            msg: "zero groups".into(),
        });
    }
    if f.dim() != net.cfg.feature_dim {
        return Err(TensorError::ShapeMismatch {
            op: "modulate",
            lhs: vec![g, f.dim()],
            rhs: vec![g, net.cfg.feature_dim],
        });
    }
    let z = encoder_forward(
        &ModulationNetwork::encoder_config(&net.cfg),
        &net.encoder,
        &f.values,
    )?;
    let raw = z.matmul(&net.w_out)?.add(&net.b_out)?;
    let col = |j: usize| -> TensorResult<Tensor> { raw.slice(1, j, j + 1)?.reshape(&[g]) };
    let squash_unit = |j: usize, range: f64| -> TensorResult<Tensor> {
        col(j)?
            .sigmoid()?
            .add_scalar(-0.5)?
            .mul_scalar(range)?
            .add_scalar(1.0)
    };
    Ok(ModulationFactors {
        alpha: squash_unit(0, net.cfg.range_alpha)?,
        beta: squash_unit(1, net.cfg.range_beta)?,
        lambda1: col(2)?.sigmoid()?,
        lambda2: col(3)?.sigmoid()?,
    })
}

// ── checkpoint format ───────────────────────────────────────────────

const CFG_ENTRY_LEN: usize = 9;

/// Serializes the network into the binary tensor-table envelope. The layout
/// is deterministic, so equal networks produce identical bytes.
pub fn serialize(net: &ModulationNetwork) -> Vec<u8> {
    let cfg = &net.cfg;
    let cfg_entry = Tensor::constant(
        vec![
            cfg.n_layers as f64,
            cfg.n_heads as f64,
            cfg.d_ff as f64,
            cfg.feature_dim as f64,
            cfg.range_alpha,
            cfg.range_beta,
            cfg.group_embed_width as f64,
            if cfg.gate_l1_weight.is_some() { 1.0 } else { 0.0 },
            cfg.gate_l1_weight.unwrap_or(0.0),
        ],
        &[CFG_ENTRY_LEN],
    );
    let mut entries: Vec<(String, Tensor)> = vec![("cfg".into(), cfg_entry)];
    for (name, t) in net.phi_named() {
        entries.push((name, t.clone()));
    }
    checkpoint::write_table(&entries)
}

/// Rebuilds a network from [`serialize`] output; weights round-trip
/// bit-exactly.
pub fn deserialize(bytes: &[u8]) -> Result<ModulationNetwork, CheckpointError> {
    let entries = checkpoint::read_table(bytes)?;
    let mut map: std::collections::BTreeMap<String, Tensor> = entries.into_iter().collect();
    let cfg_t = map
        .remove("cfg")
        .ok_or_else(|| CheckpointError::Malformed("missing cfg entry".into()))?;
    if cfg_t.len() != CFG_ENTRY_LEN {
        return Err(CheckpointError::Malformed("bad cfg entry length".into()));
    }
    let c = cfg_t.data();
    let cfg = ModulationConfig {
        n_layers: c[0] as usize,
        n_heads: c[1] as usize,
        d_ff: c[2] as usize,
        feature_dim: c[3] as usize,
        range_alpha: c[4],
        range_beta: c[5],
        group_embed_width: c[6] as usize,
        gate_l1_weight: (c[7] != 0.0).then_some(c[8]),
    };
    let n_groups = map
        .get("group_embeddings")
        .map(|t| t.shape()[0])
        .unwrap_or(1);
    let mut net = ModulationNetwork::new(cfg, n_groups, 0)
        .map_err(|e| CheckpointError::Malformed(format!("invalid config: {e}")))?;
    for (name, slot) in net.phi_named_mut() {
        let loaded = map
            .remove(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing entry {name}")))?;
        if loaded.shape() != slot.shape() {
            return Err(CheckpointError::Malformed(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded.to_leaf();
    }
    if let Some(extra) = map.keys().next() {
        return Err(CheckpointError::Malformed(format!("unknown entry {extra}")));
    }
    Ok(net)
}
