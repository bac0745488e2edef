//! Per-group feature extraction: the statistics matrix fed to the
//! modulation network, with cross-group normalization and an optional
//! learnable sigmoid gate per column.

use crate::grouping::ParamGroup;
use crate::model::Parameter;
use crate::optimizer::AdamState;
use crate::tensor::{concat, Tensor, TensorError, TensorResult};

/// How far the time feature saturates: min(1, log(1+t)/log(1+1e6)).
const TIME_CAP_STEPS: f64 = 1e6;
/// Entries with magnitude below this count as zero for sparsity statistics.
const SPARSITY_THRESHOLD: f64 = 1e-8;
const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureVersion {
    Basic,
    BasicPlus,
    Enhanced,
}

impl FeatureVersion {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureVersion::Basic => "basic",
            FeatureVersion::BasicPlus => "basic_plus",
            FeatureVersion::Enhanced => "enhanced",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureOptions {
    pub version: FeatureVersion,
    pub use_v_norms: bool,
    pub include_time: bool,
    pub normalized: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            version: FeatureVersion::Basic,
            use_v_norms: true,
            include_time: true,
            normalized: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    /// Standardized by [`normalize_features`].
    Statistic,
    Time,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// G x D matrix of per-group statistics plus its column schema.
pub struct FeatureMatrix {
    pub values: Tensor,
    pub version: FeatureVersion,
    pub schema: Vec<Column>,
    pub time_step: u64,
}

impl FeatureMatrix {
    pub fn group_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.schema.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Learnable per-column gate. Values are sigmoid(logits), so every gate
/// stays in (0, 1); the L1 penalty on gate activations is added to the
/// meta-loss by the meta-update.
pub struct GateParams {
    pub logits: Tensor,
    pub l1_weight: f64,
}

impl GateParams {
    /// Gates start mostly open (sigmoid(2) ~ 0.88) so early training sees
    /// nearly unscaled features while the L1 term can still close columns.
    pub fn new(dim: usize, l1_weight: f64) -> GateParams {
        GateParams {
            logits: Tensor::leaf(vec![2.0; dim], &[dim]),
            l1_weight,
        }
    }
}

// ── raw statistics helpers ──────────────────────────────────────────

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine of two flat vectors; 0 when either is exactly zero.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn sparsity(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count() as f64 / xs.len() as f64
}

/// Population mean and variance.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn time_feature(t: u64) -> f64 {
    ((1.0 + t as f64).ln() / (1.0 + TIME_CAP_STEPS).ln()).min(1.0)
}

// ── extraction ──────────────────────────────────────────────────────

/// Extracts the per-group feature matrix from the current optimization
/// state at step `t`. `group_embeddings` (a learnable `[G, width]` table)
/// is appended column-wise for the enhanced version; pass `None` otherwise.
///
/// Statistic and time columns are constants; only embedding columns carry
/// gradient back to the modulation network.
pub fn extract_features(
    params: &[Parameter],
    groups: &[ParamGroup],
    grads: &[Tensor],
    state: &AdamState,
    t: u64,
    opts: &FeatureOptions,
    group_embeddings: Option<&Tensor>,
) -> TensorResult<FeatureMatrix> {
    if groups.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "extract_features",
            msg: "no groups".into(),
        });
    }
    for group in groups {
        for &i in &group.members {
            if i >= params.len() || i >= grads.len() || i >= state.m.len() {
                return Err(TensorError::InvalidArgument {
                    op: "extract_features",
                    msg: format!("missing state or gradient for parameter {i}"),
                });
            }
        }
    }
    let depth_count = params.iter().map(|p| p.meta.depth_index).max().unwrap_or(0) + 1;

    let mut schema: Vec<Column> = Vec::new();
    let stat = |name: &str| Column {
        name: name.into(),
        kind: ColumnKind::Statistic,
    };
    match opts.version {
        FeatureVersion::Basic | FeatureVersion::BasicPlus => {
            schema.push(stat("grad_norm_mean"));
            schema.push(stat("mom_norm_mean"));
            schema.push(stat("param_norm_mean"));
            schema.push(stat("grad_mom_cos_mean"));
            if opts.use_v_norms {
                schema.push(stat("v_norm_mean"));
            }
            if opts.version == FeatureVersion::BasicPlus {
                schema.push(stat("grad_norm_std"));
                schema.push(stat("mom_norm_std"));
                schema.push(stat("param_norm_std"));
                schema.push(stat("grad_mom_cos_std"));
                if opts.use_v_norms {
                    schema.push(stat("v_norm_std"));
                }
            }
        }
        FeatureVersion::Enhanced => {
            for name in [
                "grad_norm_mean",
                "grad_norm_var",
                "mom_norm_mean",
                "mom_norm_var",
                "grad_sparsity",
                "mom_sparsity",
                "log_elem_count",
                "bias_ratio",
                "depth_norm",
                "param_norm_mean",
            ] {
                schema.push(stat(name));
            }
        }
    }
    if opts.include_time {
        schema.push(Column {
            name: "time".into(),
            kind: ColumnKind::Time,
        });
    }
    let stat_dim = schema.len();

    let mut data = vec![0.0; groups.len() * stat_dim];
    for (gi, group) in groups.iter().enumerate() {
        let grad_norms: Vec<f64> = group.members.iter().map(|&i| l2(grads[i].data())).collect();
        let mom_norms: Vec<f64> = group.members.iter().map(|&i| l2(&state.m[i])).collect();
        let param_norms: Vec<f64> = group
            .members
            .iter()
            .map(|&i| l2(params[i].value.data()))
            .collect();
        let cosines: Vec<f64> = group
            .members
            .iter()
            .map(|&i| cosine(grads[i].data(), &state.m[i]))
            .collect();
        let row = &mut data[gi * stat_dim..(gi + 1) * stat_dim];
        let mut at = 0;
        let put = |row: &mut [f64], at: &mut usize, v: f64| {
            row[*at] = v;
            *at += 1;
        };
        match opts.version {
            FeatureVersion::Basic | FeatureVersion::BasicPlus => {
                let v_norms: Vec<f64> = group.members.iter().map(|&i| l2(&state.v[i])).collect();
                let stats: Vec<&[f64]> = if opts.use_v_norms {
                    vec![&grad_norms, &mom_norms, &param_norms, &cosines, &v_norms]
                } else {
                    vec![&grad_norms, &mom_norms, &param_norms, &cosines]
                };
                for s in &stats {
                    put(row, &mut at, mean_var(s).0);
                }
                if opts.version == FeatureVersion::BasicPlus {
                    for s in &stats {
                        put(row, &mut at, mean_var(s).1.sqrt());
                    }
                }
            }
            FeatureVersion::Enhanced => {
                let (gm, gv) = mean_var(&grad_norms);
                let (mm, mv) = mean_var(&mom_norms);
                put(row, &mut at, gm);
                put(row, &mut at, gv);
                put(row, &mut at, mm);
                put(row, &mut at, mv);
                let grad_sp: f64 = group
                    .members
                    .iter()
                    .map(|&i| sparsity(grads[i].data()))
                    .sum::<f64>()
                    / group.members.len() as f64;
                let mom_sp: f64 = group
                    .members
                    .iter()
                    .map(|&i| sparsity(&state.m[i]))
                    .sum::<f64>()
                    / group.members.len() as f64;
                put(row, &mut at, grad_sp);
                put(row, &mut at, mom_sp);
                let elems: usize = group.members.iter().map(|&i| params[i].value.len()).sum();
                put(row, &mut at, (elems as f64).ln());
                let bias_ratio = group
                    .members
                    .iter()
                    .filter(|&&i| params[i].meta.is_bias)
                    .count() as f64
                    / group.members.len() as f64;
                put(row, &mut at, bias_ratio);
                let depth: f64 = group
                    .members
                    .iter()
                    .map(|&i| {
                        params[i].meta.depth_index as f64
                            / (depth_count.saturating_sub(1)).max(1) as f64
                    })
                    .sum::<f64>()
                    / group.members.len() as f64;
                put(row, &mut at, depth);
                put(row, &mut at, mean_var(&param_norms).0);
            }
        }
        if opts.include_time {
            put(row, &mut at, time_feature(t));
        }
        debug_assert_eq!(at, stat_dim);
    }

    let stats = Tensor::constant(data, &[groups.len(), stat_dim]);
    let (values, schema) = match group_embeddings {
        None => (stats, schema),
        Some(table) => {
            if table.ndim() != 2 || table.shape()[0] != groups.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "extract_features",
                    lhs: table.shape().to_vec(),
                    rhs: vec![groups.len(), 0],
                });
            }
            let mut schema = schema;
            for j in 0..table.shape()[1] {
                schema.push(Column {
                    name: format!("emb{j}"),
                    kind: ColumnKind::Embedding,
                });
            }
            (concat(&[&stats, table], 1)?, schema)
        }
    };
    Ok(FeatureMatrix {
        values,
        version: opts.version,
        schema,
        time_step: t,
    })
}

/// Cross-group standardization of every statistic column:
/// x -> (x - mean) / (std + eps), population std. Time and embedding
/// columns pass through unchanged.
pub fn normalize_features(f: &FeatureMatrix) -> TensorResult<FeatureMatrix> {
    let (g, d) = (f.group_count(), f.dim());
    // Embedding columns are a trailing block by construction; everything
    // before it is constant data we can standardize directly.
    let embed_start = f
        .schema
        .iter()
        .position(|c| c.kind == ColumnKind::Embedding)
        .unwrap_or(d);
    let left = f.values.slice(1, 0, embed_start)?;
    if left.requires_grad() {
        return Err(TensorError::InvalidArgument {
            op: "normalize_features",
            msg: "normalization must run before gating".into(),
        });
    }
    let mut data = left.data().to_vec();
    for (j, col) in f.schema.iter().take(embed_start).enumerate() {
        if col.kind != ColumnKind::Statistic {
            continue;
        }
        let column: Vec<f64> = (0..g).map(|r| data[r * embed_start + j]).collect();
        let (mean, var) = mean_var(&column);
        let denom = var.sqrt() + NORMALIZE_EPS;
        for r in 0..g {
            data[r * embed_start + j] = (column[r] - mean) / denom;
        }
    }
    let normalized = Tensor::constant(data, &[g, embed_start]);
    let values = if embed_start == d {
        normalized
    } else {
        concat(&[&normalized, &f.values.slice(1, embed_start, d)?], 1)?
    };
    Ok(FeatureMatrix {
        values,
        version: f.version,
        schema: f.schema.clone(),
        time_step: f.time_step,
    })
}

/// Scales every column by its sigmoid gate and returns the L1 penalty
/// `l1_weight * sum(sigmoid(logits))`, which the meta-update adds to the
/// meta-loss. Gradient reaches the logits only through graph-recorded
/// calls (the meta-update); regular steps run this under `no_grad`.
pub fn apply_gate(f: &FeatureMatrix, gate: &GateParams) -> TensorResult<(FeatureMatrix, Tensor)> {
    if gate.logits.len() != f.dim() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_gate",
            lhs: gate.logits.shape().to_vec(),
            rhs: vec![f.dim()],
        });
    }
    let gates = gate.logits.sigmoid()?;
    let values = f.values.mul(&gates)?;
    let penalty = gates.sum()?.mul_scalar(gate.l1_weight)?;
    Ok((
        FeatureMatrix {
            values,
            version: f.version,
            schema: f.schema.clone(),
            time_step: f.time_step,
        },
        penalty,
    ))
}

/// Extraction, optional normalization, then optional gating, in that order.
#[allow(clippy::too_many_arguments)]
pub fn feature_pipeline(
    params: &[Parameter],
    groups: &[ParamGroup],
    grads: &[Tensor],
    state: &AdamState,
    t: u64,
    opts: &FeatureOptions,
    group_embeddings: Option<&Tensor>,
    gate: Option<&GateParams>,
) -> TensorResult<(FeatureMatrix, Option<Tensor>)> {
    let mut f = extract_features(params, groups, grads, state, t, opts, group_embeddings)?;
    if opts.normalized {
        f = normalize_features(&f)?;
    }
    match gate {
        None => Ok((f, None)),
        Some(g) => {
            let (f, penalty) = apply_gate(&f, g)?;
            Ok((f, Some(penalty)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{build_groups, GroupingStrategy};
    use crate::model::build_mlp;
    use crate::optimizer::AdamState;

    fn setup() -> (crate::model::Model, Vec<ParamGroup>, Vec<Tensor>, AdamState) {
        let model = build_mlp(&[3, 4, 2], 7).unwrap();
        let groups = build_groups(&model, &GroupingStrategy::FineGrained).unwrap();
        let grads: Vec<Tensor> = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Tensor::constant(
                    (0..p.value.len()).map(|j| 0.1 * (i + j + 1) as f64).collect(),
                    p.value.shape(),
                )
            })
            .collect();
        let state = AdamState::new(model.params());
        (model, groups, grads, state)
    }

    #[test]
    fn basic_has_six_columns() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions::default();
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        assert_eq!(f.dim(), 6);
        assert_eq!(f.group_count(), groups.len());
    }

    #[test]
    fn basic_plus_has_eleven_columns() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions {
            version: FeatureVersion::BasicPlus,
            ..FeatureOptions::default()
        };
        let f = extract_features(model.params(), &groups, &grads, &state, 5, &opts, None).unwrap();
        assert_eq!(f.dim(), 11);
    }

    #[test]
    fn disabling_v_norms_shrinks_the_schema() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions {
            use_v_norms: false,
            ..FeatureOptions::default()
        };
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        assert_eq!(f.dim(), 5);
        let opts = FeatureOptions {
            version: FeatureVersion::BasicPlus,
            use_v_norms: false,
            ..FeatureOptions::default()
        };
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        assert_eq!(f.dim(), 9);
    }

    #[test]
    fn enhanced_with_embedding_width_four_is_fifteen() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions {
            version: FeatureVersion::Enhanced,
            ..FeatureOptions::default()
        };
        let table = Tensor::leaf(vec![0.1; groups.len() * 4], &[groups.len(), 4]);
        let f = extract_features(model.params(), &groups, &grads, &state, 5, &opts, Some(&table))
            .unwrap();
        assert_eq!(f.dim(), 15);
        assert!(f.values.requires_grad());
    }

    #[test]
    fn fresh_state_zeroes_momentum_and_cosine_columns() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions::default();
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        for g in 0..f.group_count() {
            let row = &f.values.data()[g * f.dim()..(g + 1) * f.dim()];
            assert_eq!(row[1], 0.0, "momentum norm of fresh state");
            assert_eq!(row[3], 0.0, "cosine against zero momentum");
        }
    }

    #[test]
    fn parallel_momentum_gives_cosine_one() {
        let (model, groups, grads, mut state) = setup();
        for (i, g) in grads.iter().enumerate() {
            state.m[i] = g.data().to_vec();
        }
        let opts = FeatureOptions::default();
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        for g in 0..f.group_count() {
            let cos = f.values.data()[g * f.dim() + 3];
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_member_groups_have_zero_stds() {
        let model = build_mlp(&[2, 2], 1).unwrap();
        // one group per parameter
        let groups: Vec<ParamGroup> = (0..model.params().len())
            .map(|i| ParamGroup {
                index: i,
                key: crate::grouping::GroupKey {
                    layer_type: crate::model::LayerType::Other,
                    depth_bucket: crate::grouping::DepthBucket::Shallow,
                    is_bias: false,
                },
                members: vec![i],
            })
            .collect();
        let grads: Vec<Tensor> = model.params().iter().map(|p| p.value.zeros_like()).collect();
        let state = AdamState::new(model.params());
        let opts = FeatureOptions {
            version: FeatureVersion::BasicPlus,
            ..FeatureOptions::default()
        };
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        for g in 0..f.group_count() {
            let row = &f.values.data()[g * f.dim()..(g + 1) * f.dim()];
            assert!(row[5..10].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn normalize_standardizes_statistic_columns() {
        let f = FeatureMatrix {
            values: Tensor::constant(vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0], &[3, 2]),
            version: FeatureVersion::Basic,
            schema: vec![
                Column {
                    name: "a".into(),
                    kind: ColumnKind::Statistic,
                },
                Column {
                    name: "b".into(),
                    kind: ColumnKind::Statistic,
                },
            ],
            time_step: 0,
        };
        let n = normalize_features(&f).unwrap();
        let d = n.values.data();
        // column [1, 2, 3]: mean 2, population std sqrt(2/3) -> +-1.2247
        assert!((d[0] + 1.224744).abs() < 1e-4);
        assert!(d[2].abs() < 1e-12);
        assert!((d[4] - 1.224744).abs() < 1e-4);
        // constant column collapses to zeros under the eps guard
        assert!(d[1] == 0.0 && d[3] == 0.0 && d[5] == 0.0);
    }

    #[test]
    fn normalize_single_group_zeroes_statistics() {
        let f = FeatureMatrix {
            values: Tensor::constant(vec![3.0, 9.0], &[1, 2]),
            version: FeatureVersion::Basic,
            schema: vec![
                Column {
                    name: "a".into(),
                    kind: ColumnKind::Statistic,
                },
                Column {
                    name: "time".into(),
                    kind: ColumnKind::Time,
                },
            ],
            time_step: 0,
        };
        let n = normalize_features(&f).unwrap();
        assert_eq!(n.values.data()[0], 0.0);
        assert_eq!(n.values.data()[1], 9.0, "time passes through");
    }

    #[test]
    fn gate_at_zero_halves_every_column() {
        let f = FeatureMatrix {
            values: Tensor::constant(vec![2.0, 4.0, 6.0, 8.0], &[2, 2]),
            version: FeatureVersion::Basic,
            schema: vec![
                Column {
                    name: "a".into(),
                    kind: ColumnKind::Statistic,
                },
                Column {
                    name: "b".into(),
                    kind: ColumnKind::Statistic,
                },
            ],
            time_step: 0,
        };
        let gate = GateParams {
            logits: Tensor::leaf(vec![0.0, 0.0], &[2]),
            l1_weight: 0.0,
        };
        let (gated, _) = apply_gate(&f, &gate).unwrap();
        assert_eq!(gated.values.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn saturated_gate_passes_features_and_full_penalty() {
        let f = FeatureMatrix {
            values: Tensor::constant(vec![1.0, -2.0, 0.5, 3.0, 1.5, -0.25], &[1, 6]),
            version: FeatureVersion::Basic,
            schema: (0..6)
                .map(|i| Column {
                    name: format!("c{i}"),
                    kind: ColumnKind::Statistic,
                })
                .collect(),
            time_step: 0,
        };
        let gate = GateParams {
            logits: Tensor::leaf(vec![40.0; 6], &[6]),
            l1_weight: 1e-3,
        };
        let (gated, penalty) = apply_gate(&f, &gate).unwrap();
        for (a, b) in gated.values.data().iter().zip(f.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((penalty.item() - 6.0 * 1e-3).abs() < 1e-9);
    }

    #[test]
    fn gate_penalty_matches_hand_value() {
        // l1 = 1e-3, six logits at 2 -> penalty = 6 * 1e-3 * sigmoid(2)
        let f = FeatureMatrix {
            values: Tensor::constant(vec![0.0; 6], &[1, 6]),
            version: FeatureVersion::Basic,
            schema: (0..6)
                .map(|i| Column {
                    name: format!("c{i}"),
                    kind: ColumnKind::Statistic,
                })
                .collect(),
            time_step: 0,
        };
        let gate = GateParams {
            logits: Tensor::leaf(vec![2.0; 6], &[6]),
            l1_weight: 1e-3,
        };
        let (_, penalty) = apply_gate(&f, &gate).unwrap();
        assert!((penalty.item() - 0.005284705).abs() < 1e-7);
    }

    #[test]
    fn extraction_is_pure() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions {
            version: FeatureVersion::Enhanced,
            normalized: true,
            ..FeatureOptions::default()
        };
        let a = feature_pipeline(model.params(), &groups, &grads, &state, 9, &opts, None, None)
            .unwrap()
            .0;
        let b = feature_pipeline(model.params(), &groups, &grads, &state, 9, &opts, None, None)
            .unwrap()
            .0;
        assert!(a.values.bits_eq(&b.values));
    }

    #[test]
    fn gate_dimension_mismatch_is_an_error() {
        let (model, groups, grads, state) = setup();
        let opts = FeatureOptions::default();
        let f = extract_features(model.params(), &groups, &grads, &state, 0, &opts, None).unwrap();
        let gate = GateParams::new(f.dim() + 1, 0.0);
        assert!(apply_gate(&f, &gate).is_err());
    }
}
