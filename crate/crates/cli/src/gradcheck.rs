//! Finite-difference verification suites: first-order coverage of every
//! tensor primitive, the second-order (gradient-of-gradient) path, and the
//! full meta-gradient through the hypothetical step. Surfaced by the
//! `gradcheck` subcommand and frozen into the acceptance tests.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use meta_adamw::features::FeatureOptions;
use meta_adamw::grouping::{build_groups, GroupingStrategy, ParamGroup};
use meta_adamw::meta::{meta_gradients, meta_loss_value, HuwState, MetaConfig};
use meta_adamw::model::{build_mlp, Batch, Model};
use meta_adamw::modulation::{ModulationConfig, ModulationNetwork};
use meta_adamw::optimizer::{adamw_step, AdamState, OptConfig};
use meta_adamw::rng::{stream_rng, Stream};
use meta_adamw::tensor::{
    concat, cosine_similarity, cross_entropy, finite_difference_gradient, grad, Tensor,
    TensorResult,
};

pub const FIRST_ORDER_TOL: f64 = 1e-5;

type ScalarFn = Box<dyn Fn(&Tensor) -> TensorResult<Tensor>>;
pub const SECOND_ORDER_TOL: f64 = 1e-4;
pub const META_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub label: String,
    pub max_rel_err: f64,
}

#[derive(Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub threshold: f64,
    pub cases: Vec<CaseResult>,
    pub secs: f64,
}

impl SuiteReport {
    pub fn max_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_err() < self.threshold
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| c.max_rel_err >= self.threshold)
            .collect()
    }

    pub fn render(&self, verbose: bool) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "[{}] suite {}: {} cases, max rel err {:.3e} vs tol {:.0e} ({:.2}s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases.len(),
            self.max_err(),
            self.threshold,
            self.secs,
        )
        .unwrap();
        for c in self.failures() {
            writeln!(out, "  FAIL {} rel err {:.3e}", c.label, c.max_rel_err).unwrap();
        }
        if verbose {
            for c in &self.cases {
                writeln!(out, "  {} {:.3e}", c.label, c.max_rel_err).unwrap();
            }
        }
        out
    }
}

/// Relative error with an absolute floor so near-zero gradients do not
/// blow the ratio up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences at `x`.
pub fn check_scalar_fn(
    label: &str,
    f: impl Fn(&Tensor) -> TensorResult<Tensor>,
    x: &Tensor,
    eps: f64,
) -> CaseResult {
    let run = || -> TensorResult<f64> {
        let leaf = x.to_leaf();
        let y = f(&leaf)?;
        let auto = grad(&y, &[leaf], false)?.remove(0);
        let fd = finite_difference_gradient(&f, &x.detach(), eps)?;
        Ok(auto
            .data()
            .iter()
            .zip(fd.data())
            .map(|(&a, &b)| relative_error(a, b))
            .fold(0.0, f64::max))
    };
    CaseResult {
        label: label.to_string(),
        max_rel_err: run().unwrap_or(f64::INFINITY),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::constant((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
}

/// Random values bounded away from zero (for abs/relu smoothness).
fn rand_tensor_nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::constant(
        (0..n)
            .map(|_| {
                let mag = rng.gen_range(0.2..1.8);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        shape,
    )
}

// ── first order ─────────────────────────────────────────────────────

pub fn first_order_suite(n_random: usize, seed: u64) -> SuiteReport {
    let started = Instant::now();
    let mut rng = stream_rng(seed, Stream::Test);
    let mut cases = Vec::new();
    let eps = 1e-5;

    // focused per-primitive cases; inputs keep non-smooth points at bay
    let x23 = rand_tensor(&mut rng, &[2, 3], -1.5, 1.5);
    let w34 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w3 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let xnz = rand_tensor_nonzero(&mut rng, &[6]);
    let yvec = rand_tensor_nonzero(&mut rng, &[6]);

    cases.push(check_scalar_fn("add", |x| x.add(&w3)?.mul(x)?.mean(), &x23, eps));
    cases.push(check_scalar_fn("sub", |x| x.sub(&w3)?.powi(2)?.mean(), &x23, eps));
    cases.push(check_scalar_fn("mul", |x| x.mul(&w3)?.mean(), &x23, eps));
    cases.push(check_scalar_fn(
        "div",
        |x| x.div(&x.mul(x)?.add_scalar(1.5)?)?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn("neg", |x| x.neg()?.mul(x)?.mean(), &x23, eps));
    cases.push(check_scalar_fn("abs", |x| x.abs()?.mean(), &xnz, eps));
    cases.push(check_scalar_fn("relu", |x| x.relu()?.mean(), &xnz, eps));
    cases.push(check_scalar_fn("exp", |x| x.mul_scalar(0.4)?.exp()?.mean(), &x23, eps));
    cases.push(check_scalar_fn(
        "log",
        |x| x.mul(x)?.add_scalar(0.7)?.log()?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn("pow_int", |x| x.powi(3)?.mean(), &x23, eps));
    cases.push(check_scalar_fn(
        "pow_half",
        |x| x.mul(x)?.add_scalar(0.5)?.sqrt()?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn("sigmoid", |x| x.sigmoid()?.mean(), &x23, eps));
    cases.push(check_scalar_fn("tanh", |x| x.tanh()?.mean(), &x23, eps));
    cases.push(check_scalar_fn(
        "scalar_ops",
        |x| x.mul_scalar(1.7)?.add_scalar(0.3)?.div_scalar(2.2)?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn("matmul_lhs", |x| x.matmul(&w34)?.mean(), &x23, eps));
    cases.push(check_scalar_fn(
        "matmul_rhs",
        |x| w3.transpose()?.matmul(x)?.mean(),
        &x23,
        eps,
    ));
    let x223 = rand_tensor(&mut rng, &[2, 2, 3], -1.2, 1.2);
    cases.push(check_scalar_fn(
        "matmul_batched",
        |x| x.matmul(&w34)?.powi(2)?.mean(),
        &x223,
        eps,
    ));
    cases.push(check_scalar_fn(
        "transpose",
        |x| x.transpose()?.matmul(x)?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "reshape",
        |x| x.reshape(&[3, 2])?.matmul(&w3)?.mean(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "concat_slice",
        |x| {
            let doubled = x.mul_scalar(2.0)?;
            let c = concat(&[x, &doubled], 0)?;
            c.slice(0, 1, 3)?.powi(2)?.mean()
        },
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn("sum", |x| x.sum(), &x23, eps));
    cases.push(check_scalar_fn("mean", |x| x.mean(), &x23, eps));
    cases.push(check_scalar_fn("variance", |x| x.variance(), &x23, eps));
    cases.push(check_scalar_fn(
        "l2_norm",
        |x| x.add_scalar(0.1)?.l2_norm(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "cosine_similarity",
        |x| cosine_similarity(x, &yvec),
        &xnz,
        eps,
    ));
    let w23 = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    cases.push(check_scalar_fn(
        "softmax",
        |x| x.softmax_last()?.mul(&w23)?.sum(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "log_softmax",
        |x| x.log_softmax_last()?.mul(&w23)?.sum(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "layer_norm",
        |x| x.layer_norm_last(1e-5)?.mul(&w23)?.sum(),
        &x23,
        eps,
    ));
    let table = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let wrows = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    cases.push(check_scalar_fn(
        "embedding_lookup",
        |x| x.lookup_rows(&[0, 2, 3, 1, 2])?.mul(&wrows)?.sum(),
        &table,
        eps,
    ));
    cases.push(check_scalar_fn(
        "scatter_add_rows",
        |x| x.scatter_add_rows(&[1, 0], 3)?.powi(2)?.sum(),
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "take_per_row",
        |x| x.take_per_row(&[2, 0])?.powi(2)?.mean(),
        &x23,
        eps,
    ));
    let logits = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
    cases.push(check_scalar_fn(
        "cross_entropy",
        |x| cross_entropy(x, &[1, 4, 0]),
        &logits,
        eps,
    ));
    cases.push(check_scalar_fn(
        "broadcast_to",
        |x| {
            let w = Tensor::constant(vec![0.3, -0.7, 1.1], &[3]);
            x.mul(&w)?.sum()
        },
        &x23,
        eps,
    ));
    cases.push(check_scalar_fn(
        "sum_to_shape",
        |x| x.sum_to_shape(&[3])?.powi(2)?.sum(),
        &x23,
        eps,
    ));

    // random mixed graphs; relu/abs excluded by construction (non-smooth)
    for i in 0..n_random {
        let rows = rng.gen_range(2..4usize);
        let cols = rng.gen_range(2..5usize);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.3, 1.3);
        let n_ops = rng.gen_range(3..7usize);
        let op_ids: Vec<u8> = (0..n_ops).map(|_| rng.gen_range(0..10u8)).collect();
        let consts: Vec<Tensor> = (0..n_ops)
            .map(|_| rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0))
            .collect();
        let names: Vec<&str> = op_ids
            .iter()
            .map(|id| match id {
                0 => "sigmoid",
                1 => "tanh",
                2 => "mul",
                3 => "add",
                4 => "sqrt",
                5 => "scale",
                6 => "log",
                7 => "exp",
                8 => "softmax",
                _ => "layer_norm",
            })
            .collect();
        let label = format!("random_graph_{i}[{}]", names.join(">"));
        let ops = op_ids.clone();
        let cs = consts.clone();
        cases.push(check_scalar_fn(
            &label,
            move |x| {
                let mut t = x.clone();
                for (id, c) in ops.iter().zip(&cs) {
                    t = match id {
                        0 => t.sigmoid()?,
                        1 => t.tanh()?,
                        2 => t.mul(c)?,
                        3 => t.add(c)?,
                        4 => t.mul(&t)?.add_scalar(0.5)?.sqrt()?,
                        5 => t.mul_scalar(0.8)?,
                        6 => t.mul(&t)?.add_scalar(0.7)?.log()?,
                        7 => t.mul_scalar(0.3)?.exp()?,
                        8 => t.softmax_last()?,
                        _ => t.layer_norm_last(1e-5)?,
                    };
                }
                t.mul(&cs[0])?.mean()
            },
            &x,
            eps,
        ));
    }

    SuiteReport {
        name: "first_order",
        threshold: FIRST_ORDER_TOL,
        cases,
        secs: started.elapsed().as_secs_f64(),
    }
}

// ── second order ────────────────────────────────────────────────────

pub fn second_order_suite(seed: u64) -> SuiteReport {
    let started = Instant::now();
    let mut rng = stream_rng(seed ^ 0x5ec0, Stream::Test);
    let mut cases = Vec::new();

    // gradient-norm objective: f(x) = ||d g(x)/dx||^2, with polynomial g.
    // FD runs over f itself, which evaluates the (already verified)
    // first-order gradient at perturbed points. When the caller hands in a
    // leaf, the inner reverse pass must differentiate with respect to that
    // same leaf or the second-order chain is cut.
    let norm_of_grad = |g: ScalarFn| {
        move |x: &Tensor| -> TensorResult<Tensor> {
            let leaf = if x.requires_grad() { x.clone() } else { x.to_leaf() };
            let y = g(&leaf)?;
            let gx = grad(&y, &[leaf], true)?.remove(0);
            gx.l2_norm_sq()
        }
    };

    // hand case: g = x^3 at x = 1 -> d/dx (3x^2)^2 = 36
    {
        let f = norm_of_grad(Box::new(|x: &Tensor| x.powi(3)?.sum()));
        let x = Tensor::constant(vec![1.0], &[1]);
        let leaf = x.to_leaf();
        let y = f(&leaf).unwrap();
        let d = grad(&y, &[leaf], false).unwrap().remove(0).item();
        cases.push(CaseResult {
            label: "cubic_hand_value".into(),
            max_rel_err: relative_error(d, 36.0),
        });
    }

    for i in 0..6 {
        let x = rand_tensor(&mut rng, &[4], -1.2, 1.2);
        let c3 = rng.gen_range(-1.0..1.0);
        let c2 = rng.gen_range(-1.0..1.0);
        let w = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        let g = move |x: &Tensor| -> TensorResult<Tensor> {
            let cubic = x.powi(3)?.mul_scalar(c3)?;
            let quad = x.powi(2)?.mul_scalar(c2)?;
            let cross = x.mul(&w)?.sum()?.powi(2)?;
            cubic.add(&quad)?.sum()?.add(&cross)
        };
        let f = norm_of_grad(Box::new(g));
        cases.push(check_scalar_fn(&format!("poly_grad_norm_{i}"), f, &x, 1e-5));
    }

    // the same construction through a matmul chain
    {
        let w = rand_tensor(&mut rng, &[3, 3], -0.8, 0.8);
        let g = move |x: &Tensor| -> TensorResult<Tensor> { x.matmul(&w)?.powi(2)?.sum() };
        let f = norm_of_grad(Box::new(g));
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        cases.push(check_scalar_fn("matmul_grad_norm", f, &x, 1e-5));
    }

    SuiteReport {
        name: "second_order",
        threshold: SECOND_ORDER_TOL,
        cases,
        secs: started.elapsed().as_secs_f64(),
    }
}

// ── meta gradient ───────────────────────────────────────────────────

pub struct MetaCheckSetup {
    pub model: Model,
    pub net: ModulationNetwork,
    pub state: AdamState,
    pub groups: Vec<ParamGroup>,
    pub huw: HuwState,
    pub opt_cfg: OptConfig,
    pub meta_cfg: MetaConfig,
    pub opts: FeatureOptions,
    pub b1: Batch,
    pub b2: Batch,
    pub b_val: Batch,
}

/// Small regression model (well under 500 parameters, <= 6 groups) with a
/// few real steps of optimizer history, ready for meta-gradient checks.
pub fn meta_check_setup(seed: u64, gated: bool) -> MetaCheckSetup {
    let mut model = build_mlp(&[3, 6, 2], seed).unwrap();
    let groups = build_groups(&model, &GroupingStrategy::FineGrained).unwrap();
    assert!(groups.len() <= 6);
    assert!(model.param_count() <= 500);
    let mut rng = stream_rng(seed, Stream::Test);
    let batch = |n: usize, rng: &mut ChaCha8Rng| Batch::Regression {
        inputs: rand_tensor(rng, &[n, 3], -1.0, 1.0),
        targets: rand_tensor(rng, &[n, 2], -1.0, 1.0),
    };
    // a few real steps so moments are non-trivial
    let mut state = AdamState::new(model.params());
    let opt_cfg = OptConfig::default();
    for _ in 0..3 {
        let b = batch(4, &mut rng);
        let loss = model.loss(&b).unwrap();
        let grads = grad(&loss, &model.param_values(), false).unwrap();
        adamw_step(model.params_mut(), &grads, &mut state, &opt_cfg).unwrap();
    }
    let (version, embed, heads, dim) = if gated {
        (
            meta_adamw::features::FeatureVersion::Enhanced,
            4usize,
            3usize,
            15usize,
        )
    } else {
        (meta_adamw::features::FeatureVersion::Basic, 0, 2, 6)
    };
    let net = ModulationNetwork::new(
        ModulationConfig {
            n_layers: 1,
            n_heads: heads,
            d_ff: 8,
            feature_dim: dim,
            range_alpha: 1.0,
            range_beta: 1.0,
            group_embed_width: embed,
            gate_l1_weight: gated.then_some(1e-3),
        },
        groups.len(),
        seed ^ 7,
    )
    .unwrap();
    let opts = FeatureOptions {
        version,
        use_v_norms: true,
        include_time: true,
        normalized: false,
    };
    let b1 = batch(4, &mut rng);
    let b2 = batch(4, &mut rng);
    let b_val = batch(4, &mut rng);
    MetaCheckSetup {
        model,
        net,
        state,
        groups,
        huw: HuwState::new([1.0, 1.0, 1.0]).unwrap(),
        opt_cfg,
        meta_cfg: MetaConfig::default(),
        opts,
        b1,
        b2,
        b_val,
    }
}

/// Finite differences of the meta-loss over every network weight (plus the
/// HUW log-variances) against the autodiff meta-gradient.
pub fn meta_gradient_suite(seed: u64) -> SuiteReport {
    let started = Instant::now();
    let mut cases = Vec::new();
    for gated in [false, true] {
        let mut setup = meta_check_setup(seed, gated);
        let label_prefix = if gated { "gated_enhanced" } else { "basic" };
        let (_, auto) = meta_gradients(
            &setup.model,
            &setup.net,
            &setup.state,
            &setup.opt_cfg,
            &setup.meta_cfg,
            &setup.b1,
            &setup.b2,
            &setup.b_val,
            &setup.huw,
            &setup.groups,
            &setup.opts,
            true,
        )
        .unwrap();
        let names: Vec<String> = setup
            .net
            .phi_named()
            .iter()
            .map(|(n, _)| n.clone())
            .chain(std::iter::once("huw.s".to_string()))
            .collect();
        let eps = 1e-4;
        let n_phi = names.len() - 1;
        for (ti, name) in names.iter().enumerate() {
            let len = if ti < n_phi {
                setup.net.phi_named()[ti].1.len()
            } else {
                3
            };
            let mut max_err = 0.0f64;
            for coord in 0..len {
                let fd = {
                    let eval = |setup: &mut MetaCheckSetup, delta: f64| -> f64 {
                        perturb(setup, ti, n_phi, coord, delta);
                        let v = meta_loss_value(
                            &setup.model,
                            &setup.net,
                            &setup.state,
                            &setup.opt_cfg,
                            &setup.meta_cfg,
                            &setup.b1,
                            &setup.b2,
                            &setup.b_val,
                            &setup.huw,
                            &setup.groups,
                            &setup.opts,
                        )
                        .unwrap();
                        perturb(setup, ti, n_phi, coord, -delta);
                        v
                    };
                    let fp = eval(&mut setup, eps);
                    let fm = eval(&mut setup, -eps);
                    (fp - fm) / (2.0 * eps)
                };
                let a = auto[ti].data()[coord];
                max_err = max_err.max(relative_error(a, fd));
            }
            cases.push(CaseResult {
                label: format!("{label_prefix}/{name}"),
                max_rel_err: max_err,
            });
        }
    }
    SuiteReport {
        name: "meta_gradient",
        threshold: META_TOL,
        cases,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn perturb(setup: &mut MetaCheckSetup, tensor_idx: usize, n_phi: usize, coord: usize, delta: f64) {
    if tensor_idx < n_phi {
        let mut named = setup.net.phi_named_mut();
        let slot = &mut named[tensor_idx].1;
        let mut data = slot.data().to_vec();
        data[coord] += delta;
        **slot = Tensor::leaf(data, slot.shape());
    } else {
        let mut data = setup.huw.s.data().to_vec();
        data[coord] += delta;
        setup.huw.s = Tensor::leaf(data, &[3]);
    }
}

pub fn all_suites(seed: u64) -> Vec<SuiteReport> {
    vec![
        first_order_suite(50, seed),
        second_order_suite(seed),
        meta_gradient_suite(seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_flipped_backward_is_reported_by_label() {
        // forward equals sigmoid, backward carries the wrong sign:
        // 2 sigmoid(detach(x)) - sigmoid(x)
        let x = Tensor::constant(vec![0.3, -0.8, 1.1], &[3]);
        let case = check_scalar_fn(
            "sigmoid(sign-flipped backward)",
            |x| {
                let frozen = x.detach().sigmoid()?.mul_scalar(2.0)?;
                frozen.sub(&x.sigmoid()?)?.mean()
            },
            &x,
            1e-5,
        );
        assert!(case.max_rel_err > FIRST_ORDER_TOL);
        assert!(case.label.contains("sigmoid"));
    }

    #[test]
    fn second_order_path_carries_signal() {
        // dropping to first order must change the meta-gradient: the
        // curvature path through the post-step gradients is real signal
        let setup = meta_check_setup(99, false);
        let full = MetaConfig {
            first_order: false,
            ..MetaConfig::default()
        };
        let first = MetaConfig {
            first_order: true,
            ..MetaConfig::default()
        };
        let run = |cfg: &MetaConfig| {
            meta_gradients(
                &setup.model,
                &setup.net,
                &setup.state,
                &setup.opt_cfg,
                cfg,
                &setup.b1,
                &setup.b2,
                &setup.b_val,
                &setup.huw,
                &setup.groups,
                &setup.opts,
                false,
            )
            .unwrap()
        };
        let (_, g_full) = run(&full);
        let (_, g_first) = run(&first);
        let differs = g_full
            .iter()
            .zip(&g_first)
            .any(|(a, b)| a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-12));
        assert!(differs, "first-order and full meta-gradients coincide");
    }

    #[test]
    fn loss_objective_head_gradient_matches_fd() {
        // zero-initialized head, loss-decrease objective: the head gradient
        // must agree with central differences
        let mut setup = meta_check_setup(77, false);
        setup.meta_cfg.objective = meta_adamw::meta::MetaObjective::Loss;
        let (_, auto) = meta_gradients(
            &setup.model,
            &setup.net,
            &setup.state,
            &setup.opt_cfg,
            &setup.meta_cfg,
            &setup.b1,
            &setup.b2,
            &setup.b_val,
            &setup.huw,
            &setup.groups,
            &setup.opts,
            false,
        )
        .unwrap();
        let w_out_idx = setup
            .net
            .phi_named()
            .iter()
            .position(|(n, _)| n == "w_out")
            .unwrap();
        let n_phi = setup.net.phi_named().len();
        let eps = 1e-4;
        let mut worst = 0.0f64;
        for coord in 0..setup.net.w_out.len() {
            let mut eval = |delta: f64| -> f64 {
                perturb(&mut setup, w_out_idx, n_phi, coord, delta);
                let v = meta_loss_value(
                    &setup.model,
                    &setup.net,
                    &setup.state,
                    &setup.opt_cfg,
                    &setup.meta_cfg,
                    &setup.b1,
                    &setup.b2,
                    &setup.b_val,
                    &setup.huw,
                    &setup.groups,
                    &setup.opts,
                )
                .unwrap();
                perturb(&mut setup, w_out_idx, n_phi, coord, -delta);
                v
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            worst = worst.max(relative_error(auto[w_out_idx].data()[coord], fd));
        }
        assert!(worst < META_TOL, "max rel err {worst:.3e}");
    }

    #[test]
    fn relative_error_floors_small_denominators() {
        assert!(relative_error(1e-9, -1e-9) < 1e-5);
        assert!(relative_error(1.0, 2.0) > 0.4);
    }
}
