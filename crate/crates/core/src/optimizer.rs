//! AdamW and the modulated MetaAdamW step.
//!
//! Moment recursions never see the modulation factors; alpha and beta scale
//! only the displacement, so the m/v trajectories of AdamW and MetaAdamW are
//! identical on the same gradient stream, and a unit-factor MetaAdamW step
//! reproduces AdamW bit for bit.

use crate::features::{feature_pipeline, FeatureOptions};
use crate::grouping::ParamGroup;
use crate::model::Parameter;
use crate::modulation::{modulate, ModulationFactors, ModulationNetwork};
use crate::no_grad;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Wall-clock cost of the extra MetaAdamW stages inside one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepBreakdown {
    /// Feature extraction (including normalization and gating).
    pub feature_secs: f64,
    /// Modulation-network forward pass.
    pub attention_secs: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OptConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 5e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> TensorResult<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op: "opt_config",
                msg: format!("{self:?} violates hyperparameter bounds"),
            })
        }
    }
}

/// First/second moment buffers plus the shared step counter. `t` starts at
/// 0 and is incremented at the start of every step, so bias correction on
/// the first step uses t = 1 and m_hat equals the raw gradient.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Parameter]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    pub fn clone_buffers(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, u64) {
        (self.m.clone(), self.v.clone(), self.t)
    }
}

fn check_step_inputs(
    params: &[Parameter],
    grads: &[Tensor],
    state: &AdamState,
) -> TensorResult<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument {
            op: "adamw_step",
            msg: format!(
                "{} params vs {} grads vs {} state slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        // refuse the whole step before touching any state
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "adamw_step" });
        }
    }
    Ok(())
}

/// The shared update kernel. `factor_of` yields (alpha, beta) per parameter;
/// plain AdamW passes (1, 1). Grouping of the float expressions matches
/// [`hypothetical_step`] exactly.
fn step_kernel(
    params: &mut [Parameter],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &OptConfig,
    factor_of: impl Fn(usize) -> (f64, f64),
) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, param) in params.iter_mut().enumerate() {
        let (alpha, beta) = factor_of(i);
        let g = grads[i].data();
        let old = param.value.data();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut new = vec![0.0; old.len()];
        for j in 0..old.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * (g[j] * g[j]);
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let denom = v_hat.sqrt() + cfg.eps;
            let update = alpha * (m_hat / denom + beta * (cfg.weight_decay * old[j]));
            new[j] = old[j] - cfg.lr * update;
        }
        param.value = Tensor::leaf(new, param.value.shape());
    }
}

/// One decoupled-weight-decay AdamW step:
/// m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; bias-corrected with the
/// incremented t; p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p).
pub fn adamw_step(
    params: &mut [Parameter],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &OptConfig,
) -> TensorResult<()> {
    cfg.validate()?;
    check_step_inputs(params, grads, state)?;
    step_kernel(params, grads, state, cfg, |_| (1.0, 1.0));
    Ok(())
}

fn group_of_params(groups: &[ParamGroup], n_params: usize) -> TensorResult<Vec<usize>> {
    let mut map = vec![usize::MAX; n_params];
    for group in groups {
        for &i in &group.members {
            if i >= n_params || map[i] != usize::MAX {
                return Err(TensorError::InvalidArgument {
                    op: "meta_adamw_step",
                    msg: format!("groups do not partition the parameters (index {i})"),
                });
            }
            map[i] = group.index;
        }
    }
    if map.contains(&usize::MAX) {
        return Err(TensorError::InvalidArgument {
            op: "meta_adamw_step",
            msg: "groups do not cover every parameter".into(),
        });
    }
    Ok(map)
}

/// One MetaAdamW step: extract features, run the modulation network, then
/// apply the AdamW displacement scaled per group by alpha (whole step) and
/// beta (weight-decay term). Returns the factors used, for logging, plus
/// the wall-clock breakdown of the extra stages.
pub fn meta_adamw_step(
    params: &mut [Parameter],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &OptConfig,
    net: &ModulationNetwork,
    groups: &[ParamGroup],
    opts: &FeatureOptions,
) -> TensorResult<(ModulationFactors, StepBreakdown)> {
    cfg.validate()?;
    check_step_inputs(params, grads, state)?;
    let group_of = group_of_params(groups, params.len())?;
    let mut breakdown = StepBreakdown::default();
    let factors = no_grad(|| -> TensorResult<ModulationFactors> {
        let mark = std::time::Instant::now();
        let (f, _) = feature_pipeline(
            params,
            groups,
            grads,
            state,
            state.t,
            opts,
            net.group_embeddings.as_ref(),
            net.gate.as_ref(),
        )?;
        breakdown.feature_secs = mark.elapsed().as_secs_f64();
        let mark = std::time::Instant::now();
        let factors = modulate(net, &f)?;
        breakdown.attention_secs = mark.elapsed().as_secs_f64();
        Ok(factors)
    })?;
    let alpha = factors.alpha.data().to_vec();
    let beta = factors.beta.data().to_vec();
    step_kernel(params, grads, state, cfg, |i| {
        (alpha[group_of[i]], beta[group_of[i]])
    });
    Ok((factors, breakdown))
}

/// Hypothetical parameters after one MetaAdamW step, built functionally:
/// neither `params` nor `state` is touched, and the returned tensors stay
/// graph-connected to the factors so the meta-loss can reach the network.
pub fn hypothetical_step(
    params: &[Parameter],
    grads: &[Tensor],
    state: &AdamState,
    cfg: &OptConfig,
    factors: &ModulationFactors,
    groups: &[ParamGroup],
) -> TensorResult<Vec<Tensor>> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument {
            op: "hypothetical_step",
            msg: "params, grads, and state are misaligned".into(),
        });
    }
    let group_of = group_of_params(groups, params.len())?;
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut out = Vec::with_capacity(params.len());
    for (i, param) in params.iter().enumerate() {
        let g_idx = group_of[i];
        let alpha_g = factors.alpha.slice(0, g_idx, g_idx + 1)?;
        let beta_g = factors.beta.slice(0, g_idx, g_idx + 1)?;
        let shape = param.value.shape();
        let g = &grads[i];
        let m = Tensor::constant(state.m[i].clone(), shape);
        let v = Tensor::constant(state.v[i].clone(), shape);
        let m_new = m
            .mul_scalar(cfg.beta1)?
            .add(&g.mul_scalar(1.0 - cfg.beta1)?)?;
        let v_new = v
            .mul_scalar(cfg.beta2)?
            .add(&g.mul(g)?.mul_scalar(1.0 - cfg.beta2)?)?;
        let m_hat = m_new.div_scalar(bc1)?;
        let v_hat = v_new.div_scalar(bc2)?;
        let denom = v_hat.sqrt()?.add_scalar(cfg.eps)?;
        let decay = param.value.mul_scalar(cfg.weight_decay)?.mul(&beta_g)?;
        let update = m_hat.div(&denom)?.add(&decay)?.mul(&alpha_g)?;
        out.push(param.value.sub(&update.mul_scalar(cfg.lr)?)?);
    }
    Ok(out)
}
