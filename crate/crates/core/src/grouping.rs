//! Partition of model parameters into the groups that modulation factors
//! are computed over. Groups are immutable once built; their order is the
//! lexicographic order of the grouping key, so it is stable across runs.

use crate::model::{LayerType, Model};
use crate::tensor::{concat, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DepthBucket {
    Shallow,
    Middle,
    Deep,
}

impl DepthBucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            DepthBucket::Shallow => "shallow",
            DepthBucket::Middle => "middle",
            DepthBucket::Deep => "deep",
        }
    }

    /// Bucket of a normalized depth d = depth_index / max(1, depth_count-1):
    /// shallow below 1/3, middle below 2/3, deep otherwise.
    pub fn from_depth(depth_index: usize, depth_count: usize) -> DepthBucket {
        let d = depth_index as f64 / (depth_count.saturating_sub(1)).max(1) as f64;
        if d < 1.0 / 3.0 {
            DepthBucket::Shallow
        } else if d < 2.0 / 3.0 {
            DepthBucket::Middle
        } else {
            DepthBucket::Deep
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub layer_type: LayerType,
    pub depth_bucket: DepthBucket,
    pub is_bias: bool,
}

impl GroupKey {
    pub fn label(&self) -> String {
        format!(
            "{}.{}.{}",
            self.layer_type.as_str(),
            self.depth_bucket.as_str(),
            if self.is_bias { "bias" } else { "weight" }
        )
    }
}

/// One modulation group: a stable index, its key, and the member parameter
/// indices in model order.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub index: usize,
    pub key: GroupKey,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupingStrategy {
    /// Key on (layer type, depth bucket, bias flag); only non-empty keys
    /// emit groups.
    FineGrained,
    /// Externally supplied partition; `None` means a single all-parameter
    /// group (the fallback when model structure is unavailable).
    Native(Option<Vec<Vec<usize>>>),
}

/// Partitions the model's parameters. Groups are disjoint, cover every
/// parameter, and are sorted by key.
pub fn build_groups(model: &Model, strategy: &GroupingStrategy) -> TensorResult<Vec<ParamGroup>> {
    let params = model.params();
    if params.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "build_groups",
            msg: "model has no parameters".into(),
        });
    }
    match strategy {
        GroupingStrategy::FineGrained => {
            let depth_count = model.depth_count();
            let mut by_key: std::collections::BTreeMap<GroupKey, Vec<usize>> =
                std::collections::BTreeMap::new();
            for (i, p) in params.iter().enumerate() {
                let key = GroupKey {
                    layer_type: p.meta.layer_type,
                    depth_bucket: DepthBucket::from_depth(p.meta.depth_index, depth_count),
                    is_bias: p.meta.is_bias,
                };
                by_key.entry(key).or_default().push(i);
            }
            Ok(by_key
                .into_iter()
                .enumerate()
                .map(|(index, (key, members))| ParamGroup { index, key, members })
                .collect())
        }
        GroupingStrategy::Native(partition) => {
            let sets: Vec<Vec<usize>> = match partition {
                None => vec![(0..params.len()).collect()],
                Some(sets) => sets.clone(),
            };
            let mut seen = vec![false; params.len()];
            for set in &sets {
                if set.is_empty() {
                    return Err(TensorError::InvalidArgument {
                        op: "build_groups",
                        msg: "native partition contains an empty group".into(),
                    });
                }
                for &i in set {
                    if i >= params.len() || seen[i] {
                        return Err(TensorError::InvalidArgument {
                            op: "build_groups",
                            msg: format!("native partition is not a partition (index {i})"),
                        });
                    }
                    seen[i] = true;
                }
            }
            if seen.iter().any(|&s| !s) {
                return Err(TensorError::InvalidArgument {
                    op: "build_groups",
                    msg: "native partition does not cover all parameters".into(),
                });
            }
            Ok(sets
                .into_iter()
                .enumerate()
                .map(|(index, members)| ParamGroup {
                    index,
                    key: GroupKey {
                        layer_type: LayerType::Other,
                        depth_bucket: DepthBucket::Shallow,
                        is_bias: false,
                    },
                    members,
                })
                .collect())
        }
    }
}

/// Aggregated gradient of one group: member gradients flattened and
/// concatenated in member order.
pub fn group_gradient(group: &ParamGroup, grads: &[Tensor]) -> TensorResult<Tensor> {
    let mut flat = Vec::with_capacity(group.members.len());
    for &i in &group.members {
        let g = grads.get(i).ok_or_else(|| TensorError::InvalidArgument {
            op: "group_gradient",
            msg: format!("missing gradient for member parameter {i}"),
        })?;
        flat.push(g.reshape(&[g.len()])?);
    }
    let refs: Vec<&Tensor> = flat.iter().collect();
    concat(&refs, 0)
}
