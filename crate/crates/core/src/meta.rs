//! The periodic meta-update of the modulation network: build hypothetical
//! parameters with the current factors, evaluate the meta-objective on
//! fresh batches, backpropagate to the network (second-order through the
//! post-step gradients unless `first_order`), and take one gradient-descent
//! step on its weights. Model parameters and optimizer state are borrowed
//! immutably, so the restoration guarantee holds by construction; the
//! snapshot comparison below re-checks it at runtime anyway.

use std::time::Instant;

use crate::features::{feature_pipeline, FeatureOptions};
use crate::grouping::{group_gradient, ParamGroup};
use crate::model::{Batch, Model};
use crate::modulation::{modulate, ModulationNetwork};
use crate::optimizer::{hypothetical_step, AdamState, OptConfig};
use crate::tensor::{cosine_similarity, grad, no_grad, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaObjective {
    /// Gradient alignment only.
    Gradient,
    /// Validation-loss decrease only.
    Loss,
    /// Generalization gap only.
    Gap,
    /// All three, balanced by uncertainty weighting (or summed when
    /// `huw_enabled` is off).
    Combined,
}

impl MetaObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetaObjective::Gradient => "gradient",
            MetaObjective::Loss => "loss",
            MetaObjective::Gap => "gap",
            MetaObjective::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MetaConfig {
    pub objective: MetaObjective,
    /// Steps between meta-updates.
    pub k_meta: u64,
    /// Epochs before the first meta-update; the training loop converts this
    /// to steps.
    pub warmup_epochs: usize,
    pub eta_meta: f64,
    /// Detach the post-step gradients, dropping the second-order path.
    pub first_order: bool,
    /// Bound on |s_i|; keeps the log-variances finite when a meta-loss term
    /// goes negative.
    pub s_clamp: f64,
    /// Uncertainty weighting for the combined objective; when off the three
    /// terms are summed with fixed unit weights.
    pub huw_enabled: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            objective: MetaObjective::Combined,
            k_meta: 100,
            warmup_epochs: 1,
            eta_meta: 1e-3,
            first_order: false,
            s_clamp: 6.0,
            huw_enabled: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.k_meta == 0 || self.eta_meta <= 0.0 || self.s_clamp <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "meta_config",
                msg: format!("{self:?} violates bounds"),
            });
        }
        Ok(())
    }
}

/// Learnable log-variances s_i = log sigma_i^2 plus fixed priorities for
/// the three meta-loss terms (gradient alignment, loss decrease, gap).
pub struct HuwState {
    pub s: Tensor,
    pub priorities: [f64; 3],
}

impl HuwState {
    pub fn new(priorities: [f64; 3]) -> TensorResult<HuwState> {
        if priorities.iter().any(|&p| p <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "huw",
                msg: format!("priorities must be positive, got {priorities:?}"),
            });
        }
        Ok(HuwState {
            s: Tensor::leaf(vec![0.0; 3], &[3]),
            priorities,
        })
    }

    pub fn s_values(&self) -> [f64; 3] {
        let d = self.s.data();
        [d[0], d[1], d[2]]
    }

    pub fn sigma_sq(&self) -> [f64; 3] {
        self.s_values().map(f64::exp)
    }
}

/// One executed (or skipped) meta-update.
#[derive(Debug, Clone)]
pub struct MetaReportEntry {
    pub t: u64,
    pub l_grad: Option<f64>,
    pub l_loss: Option<f64>,
    pub l_gap: Option<f64>,
    pub l_meta: f64,
    pub s: [f64; 3],
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub wall_secs: f64,
    /// True when a non-finite meta-loss made the update a no-op.
    pub skipped: bool,
}

// ── the three meta-loss terms ───────────────────────────────────────

/// Gradient alignment over groups:
/// (1/G) sum_g (lambda1_g ||g'_g||^2 - lambda2_g cos(g_g, g'_g)).
pub fn grad_alignment_loss(
    g_groups: &[Tensor],
    gp_groups: &[Tensor],
    lambda1: &Tensor,
    lambda2: &Tensor,
) -> TensorResult<Tensor> {
    let g_count = g_groups.len();
    if g_count == 0 || gp_groups.len() != g_count || lambda1.len() != g_count || lambda2.len() != g_count
    {
        return Err(TensorError::InvalidArgument {
            op: "grad_alignment_loss",
            msg: format!(
                "group count mismatch: {} vs {} vs {} lambdas",
                g_count,
                gp_groups.len(),
                lambda1.len()
            ),
        });
    }
    let mut total = Tensor::scalar(0.0);
    for g in 0..g_count {
        let l1 = lambda1.slice(0, g, g + 1)?.reshape(&[])?;
        let l2 = lambda2.slice(0, g, g + 1)?.reshape(&[])?;
        let norm_term = l1.mul(&gp_groups[g].l2_norm_sq()?)?;
        let cos_term = l2.mul(&cosine_similarity(&g_groups[g], &gp_groups[g])?)?;
        total = total.add(&norm_term.sub(&cos_term)?)?;
    }
    total.div_scalar(g_count as f64)
}

/// Validation-loss change of the hypothetical step:
/// L_val(theta') - L_val(theta). Negative means the step helped. Only the
/// first term stays in the graph; the reference loss is a constant.
pub fn loss_decrease(model: &Model, theta_prime: &[Tensor], b_val: &Batch) -> TensorResult<Tensor> {
    let reference = no_grad(|| model.loss(b_val))?.item();
    if !reference.is_finite() {
        return Err(TensorError::NonFinite { op: "loss_decrease" });
    }
    model.loss_with(theta_prime, b_val)?.add_scalar(-reference)
}

/// |L_train(theta, B1) - L_val(theta)| at the current parameters. Does not
/// depend on the hypothetical step, hence carries no gradient to the
/// modulation network.
pub fn generalization_gap(model: &Model, b_train: &Batch, b_val: &Batch) -> TensorResult<Tensor> {
    let (a, b) = no_grad(|| -> TensorResult<(f64, f64)> {
        Ok((model.loss(b_train)?.item(), model.loss(b_val)?.item()))
    })?;
    if !a.is_finite() || !b.is_finite() {
        return Err(TensorError::NonFinite {
            op: "generalization_gap",
        });
    }
    Ok(Tensor::scalar((a - b).abs()))
}

/// Priority-injected uncertainty weighting:
/// sum_i (1/2 e^{-s_i} L_i + p_i 1/2 s_i). Gradient flows to both the
/// losses' upstream graphs and to s.
pub fn huw_combine(losses: &[Tensor; 3], huw: &HuwState) -> TensorResult<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (i, loss) in losses.iter().enumerate() {
        let s_i = huw.s.slice(0, i, i + 1)?.reshape(&[])?;
        let data_term = loss.mul(&s_i.neg()?.exp()?)?.mul_scalar(0.5)?;
        let reg_term = s_i.mul_scalar(0.5 * huw.priorities[i])?;
        total = total.add(&data_term.add(&reg_term)?)?;
    }
    Ok(total)
}

// ── meta-loss assembly ──────────────────────────────────────────────

struct MetaLossParts {
    l_meta: Tensor,
    l_grad: Option<f64>,
    l_loss: Option<f64>,
    l_gap: Option<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn compute_meta_loss(
    model: &Model,
    net: &ModulationNetwork,
    state: &AdamState,
    opt_cfg: &OptConfig,
    meta_cfg: &MetaConfig,
    b1: &Batch,
    b2: &Batch,
    b_val: &Batch,
    huw: &HuwState,
    groups: &[ParamGroup],
    opts: &FeatureOptions,
) -> TensorResult<MetaLossParts> {
    let params = model.params();
    let values = model.param_values();

    // original gradients on B1; constants with respect to the network
    let l1_tensor = model.loss(b1)?;
    let l1_value = l1_tensor.item();
    let g_list = grad(&l1_tensor, &values, false)?;

    // factors from the current state (gate and embeddings stay in-graph)
    let (f, gate_penalty) = feature_pipeline(
        params,
        groups,
        &g_list,
        state,
        state.t,
        opts,
        net.group_embeddings.as_ref(),
        net.gate.as_ref(),
    )?;
    let factors = modulate(net, &f)?;

    // hypothetical parameters after one modulated step
    let theta_prime = hypothetical_step(params, &g_list, state, opt_cfg, &factors, groups)?;

    let objective = meta_cfg.objective;
    let want = |o: MetaObjective| objective == o || objective == MetaObjective::Combined;

    let mut grad_term: Option<Tensor> = None;
    if want(MetaObjective::Gradient) {
        let l2_tensor = model.loss_with(&theta_prime, b2)?;
        let gp_list = grad(&l2_tensor, &theta_prime, !meta_cfg.first_order)?;
        let g_agg: Vec<Tensor> = groups
            .iter()
            .map(|gr| group_gradient(gr, &g_list))
            .collect::<TensorResult<_>>()?;
        let gp_agg: Vec<Tensor> = groups
            .iter()
            .map(|gr| group_gradient(gr, &gp_list))
            .collect::<TensorResult<_>>()?;
        grad_term = Some(grad_alignment_loss(
            &g_agg,
            &gp_agg,
            &factors.lambda1,
            &factors.lambda2,
        )?);
    }

    let reference_val = if want(MetaObjective::Loss) || want(MetaObjective::Gap) {
        let v = no_grad(|| model.loss(b_val))?.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "meta_update" });
        }
        Some(v)
    } else {
        None
    };

    let mut loss_term: Option<Tensor> = None;
    if want(MetaObjective::Loss) {
        loss_term = Some(
            model
                .loss_with(&theta_prime, b_val)?
                .add_scalar(-reference_val.unwrap())?,
        );
    }

    let mut gap_term: Option<Tensor> = None;
    if want(MetaObjective::Gap) {
        gap_term = Some(Tensor::scalar((l1_value - reference_val.unwrap()).abs()));
    }

    let mut l_meta = match objective {
        MetaObjective::Gradient => grad_term.clone().unwrap(),
        MetaObjective::Loss => loss_term.clone().unwrap(),
        MetaObjective::Gap => gap_term.clone().unwrap(),
        MetaObjective::Combined => {
            let terms = [
                grad_term.clone().unwrap(),
                loss_term.clone().unwrap(),
                gap_term.clone().unwrap(),
            ];
            if meta_cfg.huw_enabled {
                huw_combine(&terms, huw)?
            } else {
                terms[0].add(&terms[1])?.add(&terms[2])?
            }
        }
    };
    if let Some(p) = gate_penalty {
        l_meta = l_meta.add(&p)?;
    }
    if !l_meta.item().is_finite() {
        return Err(TensorError::NonFinite { op: "meta_update" });
    }
    Ok(MetaLossParts {
        l_meta,
        l_grad: grad_term.map(|t| t.item()),
        l_loss: loss_term.map(|t| t.item()),
        l_gap: gap_term.map(|t| t.item()),
        alpha: factors.alphas(),
        beta: factors.betas(),
    })
}

/// Scalar meta-loss value for the current state; the finite-difference
/// oracle of the meta-gradient suite perturbs network weights around this.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_value(
    model: &Model,
    net: &ModulationNetwork,
    state: &AdamState,
    opt_cfg: &OptConfig,
    meta_cfg: &MetaConfig,
    b1: &Batch,
    b2: &Batch,
    b_val: &Batch,
    huw: &HuwState,
    groups: &[ParamGroup],
    opts: &FeatureOptions,
) -> TensorResult<f64> {
    compute_meta_loss(
        model, net, state, opt_cfg, meta_cfg, b1, b2, b_val, huw, groups, opts,
    )
    .map(|parts| parts.l_meta.item())
}

/// Meta-loss value plus its gradients with respect to every network weight
/// (and, when `include_s`, the HUW log-variances appended last). No state
/// is modified; this is the autodiff side of the meta-gradient check.
#[allow(clippy::too_many_arguments)]
pub fn meta_gradients(
    model: &Model,
    net: &ModulationNetwork,
    state: &AdamState,
    opt_cfg: &OptConfig,
    meta_cfg: &MetaConfig,
    b1: &Batch,
    b2: &Batch,
    b_val: &Batch,
    huw: &HuwState,
    groups: &[ParamGroup],
    opts: &FeatureOptions,
    include_s: bool,
) -> TensorResult<(f64, Vec<Tensor>)> {
    let parts = compute_meta_loss(
        model, net, state, opt_cfg, meta_cfg, b1, b2, b_val, huw, groups, opts,
    )?;
    let mut wrt = net.phi_tensors();
    if include_s {
        wrt.push(huw.s.clone());
    }
    let grads = grad(&parts.l_meta, &wrt, false)?;
    Ok((parts.l_meta.item(), grads))
}

/// One full meta-update: evaluate the selected objective through the
/// hypothetical step, backpropagate to the network weights, group
/// embeddings, gate logits, and (for combined + HUW) the log-variances,
/// then apply one plain gradient-descent step with `eta_meta` and clamp s.
///
/// A non-finite meta-loss skips the update and reports it; model parameters
/// and optimizer state are never touched either way.
#[allow(clippy::too_many_arguments)]
pub fn meta_update(
    model: &Model,
    net: &mut ModulationNetwork,
    state: &AdamState,
    opt_cfg: &OptConfig,
    meta_cfg: &MetaConfig,
    b1: &Batch,
    b2: &Batch,
    b_val: &Batch,
    huw: &mut HuwState,
    groups: &[ParamGroup],
    opts: &FeatureOptions,
) -> TensorResult<MetaReportEntry> {
    meta_cfg.validate()?;
    if b1.is_empty() || b2.is_empty() || b_val.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "meta_update",
            msg: "empty meta batch".into(),
        });
    }
    let started = Instant::now();
    let snapshot = model.param_values();
    let (m_snapshot, v_snapshot, t_snapshot) = state.clone_buffers();

    let parts = match compute_meta_loss(
        model, net, state, opt_cfg, meta_cfg, b1, b2, b_val, huw, groups, opts,
    ) {
        Ok(parts) => parts,
        Err(TensorError::NonFinite { .. }) => {
            return Ok(MetaReportEntry {
                t: state.t,
                l_grad: None,
                l_loss: None,
                l_gap: None,
                l_meta: f64::NAN,
                s: huw.s_values(),
                alpha: Vec::new(),
                beta: Vec::new(),
                wall_secs: started.elapsed().as_secs_f64(),
                skipped: true,
            });
        }
        Err(e) => return Err(e),
    };

    let with_s = meta_cfg.objective == MetaObjective::Combined && meta_cfg.huw_enabled;
    let mut wrt = net.phi_tensors();
    if with_s {
        wrt.push(huw.s.clone());
    }
    let grads = grad(&parts.l_meta, &wrt, false)?;

    let phi_count = wrt.len() - usize::from(with_s);
    for ((_, slot), g) in net.phi_named_mut().into_iter().zip(&grads[..phi_count]) {
        let updated: Vec<f64> = slot
            .data()
            .iter()
            .zip(g.data())
            .map(|(w, gw)| w - meta_cfg.eta_meta * gw)
            .collect();
        *slot = Tensor::leaf(updated, slot.shape());
    }
    if with_s {
        let sg = &grads[phi_count];
        let updated: Vec<f64> = huw
            .s
            .data()
            .iter()
            .zip(sg.data())
            .map(|(w, gw)| (w - meta_cfg.eta_meta * gw).clamp(-meta_cfg.s_clamp, meta_cfg.s_clamp))
            .collect();
        huw.s = Tensor::leaf(updated, &[3]);
    }

    // restoration guarantee: theta' was functional, nothing may have moved
    for (now, before) in model.param_values().iter().zip(&snapshot) {
        debug_assert!(now.bits_eq(before));
        if !now.bits_eq(before) {
            return Err(TensorError::InvalidArgument {
                op: "meta_update",
                msg: "model parameters changed during meta-update".into(),
            });
        }
    }
    debug_assert_eq!(t_snapshot, state.t);
    debug_assert!(m_snapshot
        .iter()
        .zip(&state.m)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())));
    debug_assert!(v_snapshot
        .iter()
        .zip(&state.v)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())));

    Ok(MetaReportEntry {
        t: state.t,
        l_grad: parts.l_grad,
        l_loss: parts.l_loss,
        l_gap: parts.l_gap,
        l_meta: parts.l_meta.item(),
        s: huw.s_values(),
        alpha: parts.alpha,
        beta: parts.beta,
        wall_secs: started.elapsed().as_secs_f64(),
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureOptions;
    use crate::grouping::{build_groups, GroupingStrategy};
    use crate::model::build_mlp;
    use crate::modulation::{ModulationConfig, ModulationNetwork};
    use rand::Rng;

    #[test]
    fn alignment_loss_with_identical_gradients() {
        // g' = g, lambda1 = lambda2 = 0.5 -> (1/G) sum (0.5 ||g||^2 - 0.5)
        let g1 = Tensor::constant(vec![1.0, 2.0], &[2]);
        let g2 = Tensor::constant(vec![0.5, -0.5, 1.5], &[3]);
        let groups = [g1.clone(), g2.clone()];
        let lambda = Tensor::constant(vec![0.5, 0.5], &[2]);
        let loss = grad_alignment_loss(&groups, &groups, &lambda, &lambda)
            .unwrap()
            .item();
        let expect = 0.5 * ((0.5 * 5.0 - 0.5) + (0.5 * 2.75 - 0.5));
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_of_zero_post_gradients_is_zero() {
        let g = [Tensor::constant(vec![1.0, -2.0], &[2])];
        let gp = [Tensor::constant(vec![0.0, 0.0], &[2])];
        let lambda = Tensor::constant(vec![0.9], &[1]);
        let loss = grad_alignment_loss(&g, &gp, &lambda, &lambda).unwrap().item();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn alignment_loss_reduces_to_mean_lambda1_on_unit_norms() {
        let g = [
            Tensor::constant(vec![1.0, 0.0], &[2]),
            Tensor::constant(vec![0.0, 1.0], &[2]),
        ];
        let gp = [
            Tensor::constant(vec![0.0, 1.0], &[2]),
            Tensor::constant(vec![1.0, 0.0], &[2]),
        ];
        let lambda1 = Tensor::constant(vec![0.3, 0.7], &[2]);
        let lambda2 = Tensor::constant(vec![0.0, 0.0], &[2]);
        let loss = grad_alignment_loss(&g, &gp, &lambda1, &lambda2).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_decrease_is_zero_for_identical_parameters() {
        let model = build_mlp(&[2, 3, 1], 4).unwrap();
        let batch = Batch::Regression {
            inputs: Tensor::constant(vec![0.2, -0.4, 0.9, 0.1], &[2, 2]),
            targets: Tensor::constant(vec![0.5, -0.5], &[2, 1]),
        };
        let d = loss_decrease(&model, &model.param_values(), &batch).unwrap();
        assert_eq!(d.item(), 0.0);
    }

    #[test]
    fn loss_decrease_sign_tracks_improvement() {
        // moving the output layer toward the targets must come out negative
        let mut model = build_mlp(&[1, 1], 4).unwrap();
        for p in model.params_mut() {
            p.value = Tensor::leaf(vec![0.0; p.value.len()], p.value.shape());
        }
        let batch = Batch::Regression {
            inputs: Tensor::constant(vec![1.0], &[1, 1]),
            targets: Tensor::constant(vec![1.0], &[1, 1]),
        };
        // theta: w = 0 -> loss 1; theta': w = 0.5 -> loss 0.25; decrease -0.75
        let theta_prime = vec![
            Tensor::constant(vec![0.5], &[1, 1]),
            Tensor::constant(vec![0.0], &[1]),
        ];
        let d = loss_decrease(&model, &theta_prime, &batch).unwrap();
        assert!((d.item() + 0.75).abs() < 1e-12);
    }

    #[test]
    fn loss_decrease_zero_under_sign_symmetry() {
        // tanh MLP with zero biases: negating every weight preserves the loss
        let model = build_mlp(&[2, 4, 1], 8).unwrap();
        let batch = Batch::Regression {
            inputs: Tensor::constant(vec![0.3, -0.2, 0.7, 0.4], &[2, 2]),
            targets: Tensor::constant(vec![0.1, -0.6], &[2, 1]),
        };
        let negated: Vec<Tensor> = model
            .param_values()
            .iter()
            .map(|t| Tensor::constant(t.data().iter().map(|v| -v).collect(), t.shape()))
            .collect();
        let d = loss_decrease(&model, &negated, &batch).unwrap();
        assert!(d.item().abs() < 1e-12);
    }

    #[test]
    fn generalization_gap_examples() {
        let model = build_mlp(&[2, 3, 1], 4).unwrap();
        let a = Batch::Regression {
            inputs: Tensor::constant(vec![0.2, -0.4, 0.9, 0.1], &[2, 2]),
            targets: Tensor::constant(vec![0.5, -0.5], &[2, 1]),
        };
        let b = Batch::Regression {
            inputs: Tensor::constant(vec![0.7, 0.3, -0.8, 0.6], &[2, 2]),
            targets: Tensor::constant(vec![-0.2, 0.4], &[2, 1]),
        };
        // identical batches -> 0
        assert_eq!(generalization_gap(&model, &a, &a).unwrap().item(), 0.0);
        // symmetric in its two batches
        let ab = generalization_gap(&model, &a, &b).unwrap().item();
        let ba = generalization_gap(&model, &b, &a).unwrap().item();
        assert_eq!(ab, ba);
        assert!(ab >= 0.0);
    }

    #[test]
    fn gap_is_absolute_difference() {
        // |0.8 - 1.1| = 0.3, checked through the raw formula the op applies
        assert!(((0.8f64 - 1.1).abs() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn huw_at_zero_s_is_half_the_sum() {
        let huw = HuwState::new([1.0, 1.0, 1.0]).unwrap();
        let losses = [Tensor::scalar(0.4), Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let combined = huw_combine(&losses, &huw).unwrap().item();
        assert!((combined - 0.5 * 3.4).abs() < 1e-12);
    }

    #[test]
    fn huw_regularizer_vanishes_at_zero_s_with_any_priorities() {
        let huw = HuwState::new([2.0, 5.0, 1.0]).unwrap();
        let losses = [Tensor::scalar(0.1), Tensor::scalar(0.2), Tensor::scalar(0.3)];
        let combined = huw_combine(&losses, &huw).unwrap().item();
        assert!((combined - 0.5 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn huw_s_iteration_reaches_stationary_point() {
        // stationary point: sigma_i^2 = L_i / p_i
        let losses = [0.5, 2.0, 1.0];
        let priorities = [2.0, 5.0, 1.0];
        let mut huw = HuwState::new(priorities).unwrap();
        let loss_tensors = losses.map(Tensor::scalar);
        for _ in 0..2000 {
            let combined = huw_combine(&loss_tensors, &huw).unwrap();
            let g = grad(&combined, &[huw.s.clone()], false).unwrap().remove(0);
            let updated: Vec<f64> = huw
                .s
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, gw)| (w - 0.05 * gw).clamp(-6.0, 6.0))
                .collect();
            huw.s = Tensor::leaf(updated, &[3]);
        }
        for i in 0..3 {
            let expect = losses[i] / priorities[i];
            assert!(
                (huw.sigma_sq()[i] - expect).abs() < 1e-3,
                "sigma^2[{i}] = {} vs {expect}",
                huw.sigma_sq()[i]
            );
        }
    }

    fn small_setup() -> (
        Model,
        ModulationNetwork,
        AdamState,
        Vec<ParamGroup>,
        Batch,
        Batch,
        Batch,
    ) {
        let model = build_mlp(&[3, 5, 2], 21).unwrap();
        let groups = build_groups(&model, &GroupingStrategy::FineGrained).unwrap();
        let net = ModulationNetwork::new(
            ModulationConfig {
                d_ff: 8,
                ..ModulationConfig::default()
            },
            groups.len(),
            3,
        )
        .unwrap();
        let state = AdamState::new(model.params());
        let mut rng = crate::rng::stream_rng(5, crate::rng::Stream::Test);
        let mut batch = |n: usize| Batch::Regression {
            inputs: Tensor::constant((0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[n, 3]),
            targets: Tensor::constant((0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[n, 2]),
        };
        let (b1, b2, bv) = (batch(4), batch(4), batch(4));
        (model, net, state, groups, b1, b2, bv)
    }

    #[test]
    fn meta_update_preserves_model_and_state_bits() {
        let (model, mut net, state, groups, b1, b2, bv) = small_setup();
        let mut huw = HuwState::new([1.0, 1.0, 1.0]).unwrap();
        let before: Vec<Tensor> = model.param_values();
        let (m0, v0, t0) = state.clone_buffers();
        let entry = meta_update(
            &model,
            &mut net,
            &state,
            &OptConfig::default(),
            &MetaConfig::default(),
            &b1,
            &b2,
            &bv,
            &mut huw,
            &groups,
            &FeatureOptions::default(),
        )
        .unwrap();
        assert!(!entry.skipped);
        assert!(entry.l_meta.is_finite());
        for (now, then) in model.param_values().iter().zip(&before) {
            assert!(now.bits_eq(then));
        }
        assert_eq!(state.t, t0);
        assert_eq!(state.m, m0);
        assert_eq!(state.v, v0);
    }

    #[test]
    fn gap_objective_gives_exactly_zero_network_gradients() {
        let (model, net, state, groups, b1, b2, bv) = small_setup();
        let huw = HuwState::new([1.0, 1.0, 1.0]).unwrap();
        let meta_cfg = MetaConfig {
            objective: MetaObjective::Gap,
            ..MetaConfig::default()
        };
        let parts = compute_meta_loss(
            &model,
            &net,
            &state,
            &OptConfig::default(),
            &meta_cfg,
            &b1,
            &b2,
            &bv,
            &huw,
            &groups,
            &FeatureOptions::default(),
        )
        .unwrap();
        let wrt = net.phi_tensors();
        let grads = grad(&parts.l_meta, &wrt, false).unwrap();
        for g in &grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn meta_update_moves_the_head_under_loss_objective() {
        let (model, mut net, mut state, groups, b1, b2, bv) = small_setup();
        // one real step so moments are non-trivial
        state.t = 3;
        let mut huw = HuwState::new([1.0, 1.0, 1.0]).unwrap();
        let meta_cfg = MetaConfig {
            objective: MetaObjective::Loss,
            eta_meta: 0.05,
            ..MetaConfig::default()
        };
        let before = net.w_out.data().to_vec();
        let entry = meta_update(
            &model,
            &mut net,
            &state,
            &OptConfig::default(),
            &meta_cfg,
            &b1,
            &b2,
            &bv,
            &mut huw,
            &groups,
            &FeatureOptions::default(),
        )
        .unwrap();
        assert!(!entry.skipped);
        assert!(entry.l_loss.is_some() && entry.l_grad.is_none());
        assert_ne!(before, net.w_out.data(), "head should receive gradient");
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (model, mut net, state, groups, b1, b2, _) = small_setup();
        let mut huw = HuwState::new([1.0, 1.0, 1.0]).unwrap();
        let empty = Batch::Regression {
            inputs: Tensor::zeros(&[0, 3]),
            targets: Tensor::zeros(&[0, 2]),
        };
        assert!(meta_update(
            &model,
            &mut net,
            &state,
            &OptConfig::default(),
            &MetaConfig::default(),
            &b1,
            &b2,
            &empty,
            &mut huw,
            &groups,
            &FeatureOptions::default(),
        )
        .is_err());
    }
}
