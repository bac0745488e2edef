//! Reverse pass and the finite-difference oracle.

use std::collections::BTreeMap;

use super::{no_grad, Tensor, TensorError, TensorResult};

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors that do not participate in `output`'s graph come back as zeros.
/// With `create_graph` the backward pass records nodes of its own, so the
/// returned gradients are differentiable again (needed for the meta-gradient
/// that flows through a gradient).
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> TensorResult<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(TensorError::NonScalar {
            op: "grad",
            shape: output.shape().to_vec(),
        });
    }
    if create_graph {
        backward(output, wrt)
    } else {
        no_grad(|| backward(output, wrt))
    }
}

fn backward(output: &Tensor, wrt: &[Tensor]) -> TensorResult<Vec<Tensor>> {
    // Creation ids increase monotonically and every parent predates its
    // child, so descending id order is a reverse topological order.
    let mut reachable: BTreeMap<u64, Tensor> = BTreeMap::new();
    if output.requires_grad() {
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            if reachable.insert(t.id(), t.clone()).is_none() {
                for p in t.parents() {
                    if p.requires_grad() {
                        stack.push(p.clone());
                    }
                }
            }
        }
    }

    let mut grads: BTreeMap<u64, Tensor> = BTreeMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Tensor::ones(output.shape()));
    }

    for (&id, node) in reachable.iter().rev() {
        let Some(g) = grads.get(&id).cloned() else {
            continue;
        };
        let Some(vjp) = node.vjp() else {
            continue;
        };
        let parent_grads = vjp(&g, node.parents())?;
        debug_assert_eq!(parent_grads.len(), node.parents().len());
        for (parent, pg) in node.parents().iter().zip(parent_grads) {
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "vjp shape for {}", node.op_name());
            match grads.remove(&parent.id()) {
                Some(acc) => {
                    grads.insert(parent.id(), acc.add(&pg)?);
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    wrt.iter()
        .map(|w| Ok(grads.get(&w.id()).cloned().unwrap_or_else(|| w.zeros_like())))
        .collect()
}

/// Central finite differences of a scalar function, one coordinate at a time:
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). Verification oracle; it is
/// independent of the reverse pass.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor) -> TensorResult<Tensor>,
    x: &Tensor,
    eps: f64,
) -> TensorResult<Tensor> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "finite_difference_gradient",
            msg: format!("eps must be positive, got {eps}"),
        });
    }
    let mut out = vec![0.0; x.len()];
    let base = x.data().to_vec();
    for i in 0..x.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval_scalar(&f, Tensor::constant(plus, x.shape()))?;
        let fm = eval_scalar(&f, Tensor::constant(minus, x.shape()))?;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(Tensor::constant(out, x.shape()))
}

// The function under test runs with recording untouched: forcing no_grad
// here would zero out probes whose evaluation legitimately contains a
// reverse pass (finite differences of a gradient norm, say).
fn eval_scalar(
    f: &impl Fn(&Tensor) -> TensorResult<Tensor>,
    x: Tensor,
) -> TensorResult<f64> {
    let y = f(&x)?;
    if y.len() != 1 {
        return Err(TensorError::NonScalar {
            op: "finite_difference_gradient",
            shape: y.shape().to_vec(),
        });
    }
    let v = y.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_difference_gradient",
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::super::ops::{cosine_similarity, dot};
    use super::*;

    #[test]
    fn square_gradient_matches_power_rule() {
        let x = Tensor::leaf(vec![3.0], &[]);
        let y = x.mul(&x).unwrap();
        let g = grad(&y, &[x.clone()], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let x = Tensor::leaf(vec![0.0], &[]);
        let y = x.sigmoid().unwrap();
        let g = grad(&y, &[x.clone()], false).unwrap();
        assert_eq!(g[0].item(), 0.25);
    }

    #[test]
    fn non_participant_gets_zeros() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]);
        let z = Tensor::leaf(vec![5.0], &[]);
        let y = x.sum().unwrap();
        let g = grad(&y, &[z.clone()], false).unwrap();
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]);
        let y = x.mul(&x).unwrap();
        assert!(matches!(
            grad(&y, &[x.clone()], false),
            Err(TensorError::NonScalar { .. })
        ));
    }

    #[test]
    fn second_order_through_gradient_norm() {
        // f(x) = ||d(x^3)/dx||^2 = (3x^2)^2, df/dx = 36x^3 -> 36 at x = 1
        let x = Tensor::leaf(vec![1.0], &[]);
        let y = x.powi(3).unwrap();
        let gx = grad(&y, &[x.clone()], true).unwrap().remove(0);
        let f = gx.l2_norm_sq().unwrap();
        let g2 = grad(&f, &[x.clone()], false).unwrap();
        assert!((g2[0].item() - 36.0).abs() < 1e-9);
    }

    #[test]
    fn fd_of_square_is_two_x() {
        let x = Tensor::constant(vec![2.0], &[1]);
        let g = finite_difference_gradient(|t| t.mul(t)?.sum(), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn fd_of_sigmoid_sum_at_zero() {
        let x = Tensor::constant(vec![0.0; 3], &[3]);
        let g = finite_difference_gradient(|t| t.sigmoid()?.sum(), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_detach_without_create_graph() {
        let x = Tensor::leaf(vec![2.0], &[]);
        let y = x.powi(2).unwrap();
        let g = grad(&y, &[x.clone()], false).unwrap();
        assert!(!g[0].requires_grad());
        let g2 = grad(&y, &[x.clone()], true).unwrap();
        assert!(g2[0].requires_grad());
    }

    #[test]
    fn dot_and_cosine_backprop() {
        let a = Tensor::leaf(vec![1.0, 2.0], &[2]);
        let b = Tensor::constant(vec![3.0, -1.0], &[2]);
        let d = dot(&a, &b).unwrap();
        let g = grad(&d, &[a.clone()], false).unwrap();
        assert_eq!(g[0].data(), &[3.0, -1.0]);
        let c = cosine_similarity(&a, &b).unwrap();
        let gc = grad(&c, &[a.clone()], false).unwrap();
        assert!(gc[0].data().iter().all(|v| v.is_finite()));
    }
}
