//! Tensor operations: primitives with backward closures, plus composites.
//!
//! Every backward closure is written in terms of public ops, so running the
//! reverse pass with recording enabled yields a differentiable gradient
//! (reverse-over-reverse). Closures only read their parents and plain
//! captured config; they never capture tensors, which keeps the graph
//! acyclic and lets dropped results free their history.

use super::{Tensor, TensorError, TensorResult};

// ── shape helpers ───────────────────────────────────────────────────

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> TensorResult<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Right-aligned strides of `shape` inside `target`, 0 on expanded axes.
fn aligned_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let ndim = target.len();
    let pad = ndim - shape.len();
    let mut strides = vec![0usize; ndim];
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        strides[pad + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn can_broadcast_to(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let pad = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(d, &e)| e == to[pad + d] || e == 1)
}

// ── elementwise binary primitives ───────────────────────────────────

macro_rules! same_shape_check {
    ($op:expr, $a:expr, $b:expr) => {
        if $a.shape() != $b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: $op,
                lhs: $a.shape().to_vec(),
                rhs: $b.shape().to_vec(),
            });
        }
    };
}

impl Tensor {
    fn add_raw(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape_check!("add", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| Ok(vec![g.clone(), g.clone()])),
        )
    }

    fn sub_raw(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape_check!("sub", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| Ok(vec![g.clone(), g.neg()?])),
        )
    }

    fn mul_raw(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape_check!("mul", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| Ok(vec![g.mul_raw(&ps[1])?, g.mul_raw(&ps[0])?])),
        )
    }

    fn div_raw(&self, other: &Tensor) -> TensorResult<Tensor> {
        same_shape_check!("div", self, other);
        if other.data().contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, ps| {
                let ga = g.div_raw(&ps[1])?;
                // d(a/b)/db = -a / b^2
                let gb = g.mul_raw(&ps[0].div_raw(&ps[1].mul_raw(&ps[1])?)?)?.neg()?;
                Ok(vec![ga, gb])
            }),
        )
    }

    fn binary_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(&Tensor, &Tensor) -> TensorResult<Tensor>,
    ) -> TensorResult<Tensor> {
        if self.shape() == other.shape() {
            return f(self, other);
        }
        let out = broadcast_shape(op, self.shape(), other.shape())?;
        f(&self.broadcast_to(&out)?, &other.broadcast_to(&out)?)
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast(other, "add", Tensor::add_raw)
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast(other, "sub", Tensor::sub_raw)
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast(other, "mul", Tensor::mul_raw)
    }

    /// Elementwise division; any exactly-zero divisor entry is an error.
    pub fn div(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.binary_broadcast(other, "div", Tensor::div_raw)
    }

    // ── broadcast / reduce-to-shape primitives ──────────────────────

    /// Expands to `shape` with NumPy-style right alignment.
    pub fn broadcast_to(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !can_broadcast_to(self.shape(), shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let strides = aligned_strides(self.shape(), shape);
        let mut data = vec![0.0; shape.iter().product()];
        let src = self.data();
        for_each_index(shape, |flat, idx| {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data[flat] = src[off];
        });
        let from_shape = self.shape().to_vec();
        Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.sum_to_shape(&from_shape)?])),
        )
    }

    /// Adjoint of [`broadcast_to`]: sums over the expanded axes.
    pub fn sum_to_shape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if !can_broadcast_to(shape, self.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to_shape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let strides = aligned_strides(shape, self.shape());
        let mut data = vec![0.0; shape.iter().product()];
        let src = self.data();
        for_each_index(self.shape(), |flat, idx| {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data[off] += src[flat];
        });
        let big_shape = self.shape().to_vec();
        Tensor::from_op(
            "sum_to_shape",
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.broadcast_to(&big_shape)?])),
        )
    }

    // ── elementwise unary primitives ────────────────────────────────

    pub fn neg(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(
            "neg",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.neg()?])),
        )
    }

    /// Subgradient convention: d|x|/dx = 0 at x = 0.
    pub fn abs(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v.abs()).collect();
        Tensor::from_op(
            "abs",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| {
                let sign: Vec<f64> = ps[0]
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                g.mul(&Tensor::constant(sign, ps[0].shape()))
            })
            .into_multi(),
        )
    }

    /// Subgradient convention: relu'(0) = 0.
    pub fn relu(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| {
                let mask: Vec<f64> = ps[0]
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                g.mul(&Tensor::constant(mask, ps[0].shape()))
            })
            .into_multi(),
        )
    }

    pub fn exp(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v.exp()).collect();
        Tensor::from_op(
            "exp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| g.mul(&ps[0].exp()?)).into_multi(),
        )
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&self) -> TensorResult<Tensor> {
        if self.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "log of a non-positive input".into(),
            });
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            "log",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| g.div(&ps[0])).into_multi(),
        )
    }

    /// Elementwise power. Non-integer exponents require non-negative inputs.
    pub fn powf(&self, p: f64) -> TensorResult<Tensor> {
        if p.fract() != 0.0 && self.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "powf",
                msg: format!("fractional power {p} of a negative input"),
            });
        }
        let data = self.data().iter().map(|v| v.powf(p)).collect();
        Tensor::from_op(
            "powf",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g: &Tensor, ps: &[Tensor]| g.mul(&ps[0].powf(p - 1.0)?.mul_scalar(p)?))
                .into_multi(),
        )
    }

    pub fn powi(&self, p: i32) -> TensorResult<Tensor> {
        self.powf(p as f64)
    }

    pub fn sqrt(&self) -> TensorResult<Tensor> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                msg: "sqrt of a negative input".into(),
            });
        }
        self.powf(0.5)
    }

    pub fn sigmoid(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|&v| stable_sigmoid(v)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| {
                // σ' = σ(1-σ), recomputed from the input so the closure
                // stays cycle-free and double-differentiable
                let s = ps[0].sigmoid()?;
                g.mul(&s.mul(&s.neg()?.add_scalar(1.0)?)?)
            })
            .into_multi(),
        )
    }

    pub fn tanh(&self) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(
            "tanh",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g: &Tensor, ps: &[Tensor]| {
                let t = ps[0].tanh()?;
                g.mul(&t.mul(&t)?.neg()?.add_scalar(1.0)?)
            })
            .into_multi(),
        )
    }

    // ── scalar-argument conveniences ────────────────────────────────

    pub fn add_scalar(&self, c: f64) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.clone()])),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> TensorResult<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.mul_scalar(c)?])),
        )
    }

    /// Elementwise `x / c`, kept as a true division so results match
    /// scalar-kernel code bit for bit.
    pub fn div_scalar(&self, c: f64) -> TensorResult<Tensor> {
        if c == 0.0 {
            return Err(TensorError::Domain {
                op: "div_scalar",
                msg: "division by zero".into(),
            });
        }
        let data = self.data().iter().map(|v| v / c).collect();
        Tensor::from_op(
            "div_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.div_scalar(c)?])),
        )
    }

    // ── matmul / transpose / reshape ────────────────────────────────

    /// Matrix product over the last two axes. Leading axes must match, or
    /// either side may omit them ([B,m,k] @ [k,n] broadcasts the rhs).
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        matmul_impl(self, other, false)
    }

    /// [`matmul`] with order-canonical summation (2-D only): each dot product
    /// accumulates its terms in sorted order, so the result depends only on
    /// the multiset of terms. Used where exact permutation equivariance over
    /// tokens is required.
    pub fn matmul_canonical(&self, other: &Tensor) -> TensorResult<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "matmul_canonical",
                msg: "requires two rank-2 tensors".into(),
            });
        }
        matmul_impl(self, other, true)
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose(&self) -> TensorResult<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank >= 2, got shape {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let batch: usize = self.shape()[..nd - 2].iter().product();
        let mut shape = self.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    data[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        Tensor::from_op(
            "transpose",
            shape,
            data,
            vec![self.clone()],
            Box::new(|g, _| Ok(vec![g.transpose()?])),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let from = self.shape().to_vec();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.reshape(&from)?])),
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements (rank-0 result).
    pub fn sum(&self) -> TensorResult<Tensor> {
        let s: f64 = self.data().iter().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.broadcast_to(&shape)?])),
        )
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(&self) -> TensorResult<Tensor> {
        if self.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        self.sum()?.div_scalar(self.len() as f64)
    }

    /// Population variance of all elements.
    pub fn variance(&self) -> TensorResult<Tensor> {
        let centered = self.sub(&self.mean()?)?;
        centered.mul(&centered)?.mean()
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_last_keepdim(&self) -> TensorResult<Tensor> {
        self.sum_last_impl(false)
    }

    /// [`sum_last_keepdim`] with order-canonical accumulation.
    pub fn sum_last_keepdim_canonical(&self) -> TensorResult<Tensor> {
        self.sum_last_impl(true)
    }

    fn sum_last_impl(&self, canonical: bool) -> TensorResult<Tensor> {
        if self.ndim() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "sum_last_keepdim",
                msg: "needs rank >= 1".into(),
            });
        }
        let n = *self.shape().last().unwrap();
        let rows = self.len() / n.max(1);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let src = self.data();
        let mut data = vec![0.0; rows];
        let mut buf = vec![0.0; n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            if canonical {
                buf.copy_from_slice(row);
                buf.sort_by(|a, b| a.total_cmp(b));
                data[r] = buf.iter().sum();
            } else {
                data[r] = row.iter().sum();
            }
        }
        let in_shape = self.shape().to_vec();
        Tensor::from_op(
            if canonical {
                "sum_last_keepdim_canonical"
            } else {
                "sum_last_keepdim"
            },
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.broadcast_to(&in_shape)?])),
        )
    }

    /// Max over the last axis, keeping it as size 1. The result is detached
    /// (constant); it exists for the shift in softmax-style compositions.
    pub fn max_last_keepdim(&self) -> TensorResult<Tensor> {
        if self.ndim() == 0 || self.shape().last() == Some(&0) {
            return Err(TensorError::InvalidArgument {
                op: "max_last_keepdim",
                msg: "needs a non-empty last axis".into(),
            });
        }
        let n = *self.shape().last().unwrap();
        let rows = self.len() / n;
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let src = self.data();
        let data: Vec<f64> = (0..rows)
            .map(|r| src[r * n..(r + 1) * n].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(Tensor::constant(data, &shape))
    }

    // ── structural ops ──────────────────────────────────────────────

    /// Contiguous range along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> TensorResult<Tensor> {
        if axis >= self.ndim() || start > end || end > self.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!(
                    "range {start}..{end} on axis {axis} of shape {:?}",
                    self.shape()
                ),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let axis_len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let take = end - start;
        let mut shape = self.shape().to_vec();
        shape[axis] = take;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + take * inner]);
        }
        let full = axis_len;
        Tensor::from_op(
            "slice",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                // zero-pad back to the parent extent
                let mut parts: Vec<Tensor> = Vec::new();
                if start > 0 {
                    let mut s = g.shape().to_vec();
                    s[axis] = start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(g.clone());
                if end < full {
                    let mut s = g.shape().to_vec();
                    s[axis] = full - end;
                    parts.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                Ok(vec![concat(&refs, axis)?])
            }),
        )
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn lookup_rows(&self, ids: &[usize]) -> TensorResult<Tensor> {
        if self.ndim() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "lookup_rows",
                msg: format!("table must be rank 2, got {:?}", self.shape()),
            });
        }
        let (rows, width) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "lookup_rows",
                msg: format!("row index {bad} out of range 0..{rows}"),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let ids_owned = ids.to_vec();
        Tensor::from_op(
            "lookup_rows",
            vec![ids.len(), width],
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.scatter_add_rows(&ids_owned, rows)?])),
        )
    }

    /// Adjoint of [`lookup_rows`]: row `k` of the result accumulates every
    /// input row whose id is `k`.
    pub fn scatter_add_rows(&self, ids: &[usize], n_rows: usize) -> TensorResult<Tensor> {
        if self.ndim() != 2 || self.shape()[0] != ids.len() {
            return Err(TensorError::InvalidArgument {
                op: "scatter_add_rows",
                msg: format!("values {:?} vs {} ids", self.shape(), ids.len()),
            });
        }
        let width = self.shape()[1];
        let src = self.data();
        let mut data = vec![0.0; n_rows * width];
        for (r, &i) in ids.iter().enumerate() {
            if i >= n_rows {
                return Err(TensorError::InvalidArgument {
                    op: "scatter_add_rows",
                    msg: format!("row index {i} out of range 0..{n_rows}"),
                });
            }
            for c in 0..width {
                data[i * width + c] += src[r * width + c];
            }
        }
        let ids_owned = ids.to_vec();
        Tensor::from_op(
            "scatter_add_rows",
            vec![n_rows, width],
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.lookup_rows(&ids_owned)?])),
        )
    }

    /// One entry per row of a 2-D tensor, chosen by column index.
    pub fn take_per_row(&self, cols: &[usize]) -> TensorResult<Tensor> {
        if self.ndim() != 2 || self.shape()[0] != cols.len() {
            return Err(TensorError::InvalidArgument {
                op: "take_per_row",
                msg: format!("{:?} vs {} indices", self.shape(), cols.len()),
            });
        }
        let width = self.shape()[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::InvalidArgument {
                op: "take_per_row",
                msg: format!("column index {bad} out of range 0..{width}"),
            });
        }
        let src = self.data();
        let data: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| src[r * width + c]).collect();
        let cols_owned = cols.to_vec();
        Tensor::from_op(
            "take_per_row",
            vec![cols.len()],
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.scatter_per_row(&cols_owned, width)?])),
        )
    }

    /// Adjoint of [`take_per_row`].
    pub fn scatter_per_row(&self, cols: &[usize], width: usize) -> TensorResult<Tensor> {
        if self.ndim() != 1 || self.len() != cols.len() {
            return Err(TensorError::InvalidArgument {
                op: "scatter_per_row",
                msg: format!("{:?} vs {} indices", self.shape(), cols.len()),
            });
        }
        let src = self.data();
        let mut data = vec![0.0; cols.len() * width];
        for (r, &c) in cols.iter().enumerate() {
            if c >= width {
                return Err(TensorError::InvalidArgument {
                    op: "scatter_per_row",
                    msg: format!("column index {c} out of range 0..{width}"),
                });
            }
            data[r * width + c] = src[r];
        }
        let cols_owned = cols.to_vec();
        Tensor::from_op(
            "scatter_per_row",
            vec![cols.len(), width],
            data,
            vec![self.clone()],
            Box::new(move |g, _| Ok(vec![g.take_per_row(&cols_owned)?])),
        )
    }

    // ── composites ──────────────────────────────────────────────────

    /// Softmax along the last axis (max-shifted for stability; the shift is
    /// detached, which leaves gradients exact).
    pub fn softmax_last(&self) -> TensorResult<Tensor> {
        self.softmax_impl(false)
    }

    /// [`softmax_last`] with order-canonical denominators.
    pub fn softmax_last_canonical(&self) -> TensorResult<Tensor> {
        self.softmax_impl(true)
    }

    fn softmax_impl(&self, canonical: bool) -> TensorResult<Tensor> {
        let e = self.sub(&self.max_last_keepdim()?)?.exp()?;
        let denom = if canonical {
            e.sum_last_keepdim_canonical()?
        } else {
            e.sum_last_keepdim()?
        };
        e.div(&denom)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_last(&self) -> TensorResult<Tensor> {
        let shifted = self.sub(&self.max_last_keepdim()?)?;
        shifted.sub(&shifted.exp()?.sum_last_keepdim()?.log()?)
    }

    /// Normalizes over the last axis: (x - mean) / sqrt(var + eps), with
    /// population variance. Scale and shift are applied by the caller.
    pub fn layer_norm_last(&self, eps: f64) -> TensorResult<Tensor> {
        let n = *self.shape().last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm_last",
            msg: "needs rank >= 1".into(),
        })? as f64;
        let mu = self.sum_last_keepdim()?.div_scalar(n)?;
        let centered = self.sub(&mu)?;
        let var = centered.mul(&centered)?.sum_last_keepdim()?.div_scalar(n)?;
        centered.div(&var.add_scalar(eps)?.sqrt()?)
    }

    /// Squared L2 norm of all elements.
    pub fn l2_norm_sq(&self) -> TensorResult<Tensor> {
        self.mul(self)?.sum()
    }

    /// L2 norm of all elements.
    pub fn l2_norm(&self) -> TensorResult<Tensor> {
        self.l2_norm_sq()?.sqrt()
    }
}

// Small adapter so single-parent closures returning one tensor read cleanly.
trait IntoMulti {
    fn into_multi(self) -> super::Vjp;
}

impl<F> IntoMulti for F
where
    F: Fn(&Tensor, &[Tensor]) -> TensorResult<Tensor> + 'static,
{
    fn into_multi(self) -> super::Vjp {
        Box::new(move |g, ps| Ok(vec![self(g, ps)?]))
    }
}

// ── free functions ──────────────────────────────────────────────────

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> TensorResult<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat",
            msg: "no tensors given".into(),
        });
    }
    let first = parts[0];
    if axis >= first.ndim() {
        return Err(TensorError::InvalidArgument {
            op: "concat",
            msg: format!("axis {axis} out of range for shape {:?}", first.shape()),
        });
    }
    let mut axis_total = 0usize;
    for t in parts {
        if t.ndim() != first.ndim()
            || t.shape()
                .iter()
                .enumerate()
                .any(|(d, &e)| d != axis && e != first.shape()[d])
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        axis_total += t.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = axis_total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * axis_total * inner];
    let mut offset = 0usize;
    for t in parts {
        let k = t.shape()[axis];
        let src = t.data();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * k * inner;
            data[dst_base..dst_base + k * inner]
                .copy_from_slice(&src[src_base..src_base + k * inner]);
        }
        offset += k;
    }
    let extents: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
    let parents: Vec<Tensor> = parts.iter().map(|t| (*t).clone()).collect();
    Tensor::from_op(
        "concat",
        shape,
        data,
        parents,
        Box::new(move |g, _| {
            let mut out = Vec::with_capacity(extents.len());
            let mut at = 0usize;
            for &k in &extents {
                out.push(g.slice(axis, at, at + k)?);
                at += k;
            }
            Ok(out)
        }),
    )
}

/// Dot product of two equally-sized tensors, flattened.
pub fn dot(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dot",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    a.reshape(&[a.len()])?.mul(&b.reshape(&[b.len()])?)?.sum()
}

/// Cosine similarity of two equally-sized tensors, flattened. Defined as 0
/// when either vector is exactly zero.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
    if zero(a) || zero(b) {
        return Ok(Tensor::scalar(0.0));
    }
    let denom = a.l2_norm()?.mul(&b.l2_norm()?)?;
    dot(a, b)?.div(&denom)
}

/// Mean squared error between two equally-shaped tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> TensorResult<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let d = pred.sub(target)?;
    d.mul(&d)?.mean()
}

/// Mean cross-entropy of logits `[N, C]` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> TensorResult<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    logits
        .log_softmax_last()?
        .take_per_row(labels)?
        .mean()?
        .neg()
}

/// Overflow-safe logistic function; exact 0.5 at 0.
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── matmul core ─────────────────────────────────────────────────────

fn matmul_impl(a: &Tensor, b: &Tensor, canonical: bool) -> TensorResult<Tensor> {
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(TensorError::InvalidArgument {
            op: "matmul",
            msg: format!("needs rank >= 2, got {:?} and {:?}", a.shape(), b.shape()),
        });
    }
    let (m, ka) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (kb, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    let a_lead = &a.shape()[..a.ndim() - 2];
    let b_lead = &b.shape()[..b.ndim() - 2];
    let lead_ok = a_lead == b_lead || a_lead.is_empty() || b_lead.is_empty();
    if ka != kb || !lead_ok {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = ka;
    let lead: Vec<usize> = if a_lead.is_empty() { b_lead.to_vec() } else { a_lead.to_vec() };
    let batch: usize = lead.iter().product();
    let (a_step, b_step) = (
        if a_lead.is_empty() { 0 } else { m * k },
        if b_lead.is_empty() { 0 } else { k * n },
    );
    let mut shape = lead.clone();
    shape.push(m);
    shape.push(n);
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0; batch * m * n];
    let mut terms = vec![0.0; k];
    for bi in 0..batch {
        let (ab, bb, ob) = (bi * a_step, bi * b_step, bi * m * n);
        for i in 0..m {
            for j in 0..n {
                let out = &mut data[ob + i * n + j];
                if canonical {
                    for (p, t) in terms.iter_mut().enumerate() {
                        *t = ad[ab + i * k + p] * bd[bb + p * n + j];
                    }
                    terms.sort_by(|x, y| x.total_cmp(y));
                    *out = terms.iter().sum();
                } else {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += ad[ab + i * k + p] * bd[bb + p * n + j];
                    }
                    *out = s;
                }
            }
        }
    }
    Tensor::from_op(
        if canonical { "matmul_canonical" } else { "matmul" },
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            let ga = g.matmul(&ps[1].transpose()?)?.sum_to_shape(ps[0].shape())?;
            let gb = ps[0].transpose()?.matmul(g)?.sum_to_shape(ps[1].shape())?;
            Ok(vec![ga, gb])
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::constant(data.to_vec(), shape)
    }

    #[test]
    fn matmul_of_ones_counts_inner_dim() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 2]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn sigmoid_at_zero_is_exactly_half() {
        let x = Tensor::zeros(&[3]);
        let y = x.sigmoid().unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let x = t(&[0.3, -1.2, 2.5], &[3]);
        let c = cosine_similarity(&x, &x).unwrap();
        assert!((c.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        let x = t(&[0.0, 0.0], &[2]);
        let y = t(&[1.0, 2.0], &[2]);
        assert_eq!(cosine_similarity(&x, &y).unwrap().item(), 0.0);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let a = t(&[1.0], &[1]);
        let b = t(&[0.0], &[1]);
        assert!(matches!(a.div(&b), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn log_of_negative_is_an_error() {
        let a = t(&[-1.0], &[1]);
        assert!(matches!(a.log(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn broadcast_add_row_vector() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[10.0, 20.0], &[2]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]);
        let s = x.softmax_last().unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_v() {
        let logits = Tensor::zeros(&[4, 7]);
        let ce = cross_entropy(&logits, &[0, 3, 5, 6]).unwrap();
        assert!((ce.item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[1.0, 2.0], &[2, 1]);
        let b = t(&[3.0, 4.0], &[2, 1]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);
        let back = c.slice(1, 0, 1).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0]);
    }

    #[test]
    fn canonical_matmul_matches_plain_values() {
        let a = t(&[0.3, 1.7, -0.2, 0.9, 2.2, -1.1], &[2, 3]);
        let b = t(&[1.0, 0.5, -0.25, 2.0, 0.75, -1.5], &[3, 2]);
        let plain = a.matmul(&b).unwrap();
        let canon = a.matmul_canonical(&b).unwrap();
        for (x, y) in plain.data().iter().zip(canon.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
