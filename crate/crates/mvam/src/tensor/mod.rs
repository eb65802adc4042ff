//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A `Tensor` is a cheap handle onto a graph node; cloning it clones the
//! handle, not the data. Every operation allocates a fresh node that records
//! its operands and a closure that maps the node's incoming gradient to
//! per-operand gradient contributions. `backward` on a scalar walks the graph
//! once in reverse topological order.
//!
//! Gradients accumulate by summation: across fan-out within one pass and
//! across repeated `backward` calls. Callers zero leaf gradients between
//! optimizer steps.
//!
//! All arithmetic is f64, row-major. Reductions offered in a `canonical`
//! variant add their terms in value-sorted order, which makes the result
//! independent of operand row order; callers that must be bitwise equivariant
//! under row permutations use those variants.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use std::cell::RefCell;
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise nonlinearity, fused into `conv1d_same` and available
/// standalone via the methods of the same names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // Derivative expressed through the activation's own output; every kind
    // used here admits that form, so the forward pass only saves its output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Sums addends in ascending `total_cmp` order. Equal values are
/// interchangeable, so any permutation of the input yields bitwise the same
/// result; reductions that must commute with row reordering use this.
pub(crate) fn canonical_sum(addends: &mut Vec<f64>) -> f64 {
    addends.sort_unstable_by(|a, b| a.total_cmp(b));
    addends.iter().sum()
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Leaf flag: `backward` deposits gradient sums here.
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients; nodes outside
    /// that cone keep no parents, so eval-only graphs free themselves as
    /// intermediate handles drop.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let node = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .field("has_grad", &node.grad.is_some())
            .finish()
    }
}

fn validate_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(
            "tensor shape",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::shape(
            "tensor construction",
            format!("shape {shape:?} holds {numel} values, data has {data_len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    // ---- construction ----

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(data.len(), shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf: `backward` accumulates into its `grad`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        validate_shape(data.len(), shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            })),
        }
    }

    fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(Tensor::needs_grad);
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                needs_grad,
                // Outside the gradient cone the node needs no history.
                parents: if needs_grad { parents } else { Vec::new() },
                backward_fn: if needs_grad { Some(backward_fn) } else { None },
            })),
        }
    }

    // ---- accessors ----

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the stored values; shape is immutable.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut node = self.inner.borrow_mut();
        if data.len() != node.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} values, got {}", node.data.len(), data.len()),
            ));
        }
        node.data = data;
        Ok(())
    }

    /// In-place mutation of the stored values (optimizer updates).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let node = self.inner.borrow();
        match node.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", node.shape),
            )),
        }
    }

    fn dims1(&self, op: &'static str) -> Result<usize> {
        let node = self.inner.borrow();
        match node.shape[..] {
            [n] => Ok(n),
            _ => Err(Error::shape(
                op,
                format!("expected a rank-1 tensor, got shape {:?}", node.shape),
            )),
        }
    }

    // ---- backward pass ----

    /// Reverse-mode pass from a scalar. Gradients sum over fan-out and, for
    /// leaves, over repeated calls; callers `zero_grad` between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape() });
        }
        if !self.needs_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut flows: HashMap<usize, Vec<f64>> = HashMap::new();
        flows.insert(self.ptr_id(), vec![1.0]);
        // Reverse post-order: every consumer is handled before its operands,
        // so a node's flow is complete when we reach it.
        for tensor in order.iter().rev() {
            let Some(flow) = flows.remove(&tensor.ptr_id()) else {
                continue;
            };
            let (parents, contributions) = {
                let mut node = tensor.inner.borrow_mut();
                if node.requires_grad {
                    let grad = node.grad.get_or_insert_with(|| vec![0.0; flow.len()]);
                    for (g, f) in grad.iter_mut().zip(&flow) {
                        *g += f;
                    }
                }
                let Some(backward_fn) = &node.backward_fn else {
                    continue;
                };
                (node.parents.clone(), backward_fn(&flow))
            };
            for (parent, contribution) in parents.iter().zip(contributions) {
                if contribution.is_empty() || !parent.needs_grad() {
                    continue;
                }
                debug_assert_eq!(contribution.len(), parent.numel());
                match flows.entry(parent.ptr_id()) {
                    Entry::Occupied(mut slot) => {
                        for (acc, c) in slot.get_mut().iter_mut().zip(&contribution) {
                            *acc += c;
                        }
                    }
                    Entry::Vacant(slot) => {
                        slot.insert(contribution);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((tensor, emit)) = stack.pop() {
            if emit {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.ptr_id()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            let node = tensor.inner.borrow();
            for parent in &node.parents {
                if parent.needs_grad() && !visited.contains(&parent.ptr_id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        order
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            for i in 0..m {
                for t in 0..k {
                    let av = a.data[i * k + t];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data[t * n..(t + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let lhs = self.clone();
        let rhs = other.clone();
        let (lneed, rneed) = (self.needs_grad(), other.needs_grad());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (da, db) = matmul_backward(
                    &lhs.inner.borrow().data,
                    &rhs.inner.borrow().data,
                    g,
                    (m, k, n),
                    lneed,
                    rneed,
                );
                vec![da, db]
            }),
        ))
    }

    /// Matrix product whose inner-axis accumulation is order-canonical: with
    /// matching row/column permutations of the operands, the output rows are
    /// the exact same bits, merely permuted. Used where results must commute
    /// with reordering of the shared axis.
    pub fn matmul_canonical(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_canonical")?;
        let (k2, n) = other.dims2("matmul_canonical")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_canonical",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            let mut addends = Vec::with_capacity(k);
            for i in 0..m {
                for j in 0..n {
                    addends.clear();
                    for t in 0..k {
                        addends.push(a.data[i * k + t] * b.data[t * n + j]);
                    }
                    out[i * n + j] = canonical_sum(&mut addends);
                }
            }
        }
        let lhs = self.clone();
        let rhs = other.clone();
        let (lneed, rneed) = (self.needs_grad(), other.needs_grad());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (da, db) = matmul_backward(
                    &lhs.inner.borrow().data,
                    &rhs.inner.borrow().data,
                    g,
                    (m, k, n),
                    lneed,
                    rneed,
                );
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        {
            let node = self.inner.borrow();
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = node.data[i * c + j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                vec![dx]
            }),
        ))
    }

    // ---- elementwise ----

    /// Elementwise sum; shapes must match exactly, except that either side
    /// may be a single scalar broadcast over the other.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_op(self, other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    /// Elementwise product under the same broadcast rule as `add`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_op(self, other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let node = self.inner.borrow();
        let out: Vec<f64> = node.data.iter().map(|v| v * factor).collect();
        let shape = node.shape.clone();
        drop(node);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|v| v * factor).collect()]),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Activation::Relu)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Activation::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        let node = self.inner.borrow();
        let out: Vec<f64> = node.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = node.shape.clone();
        drop(node);
        let saved = out.clone();
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect()]
            }),
        )
    }

    fn unary(&self, kind: Activation) -> Tensor {
        let node = self.inner.borrow();
        let out: Vec<f64> = node.data.iter().map(|&x| kind.apply(x)).collect();
        let shape = node.shape.clone();
        drop(node);
        let saved = out.clone();
        Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gv, y)| gv * kind.slope_from_output(*y))
                    .collect()]
            }),
        )
    }

    /// Inverted dropout: each entry is zeroed independently with probability
    /// `p` and survivors are scaled by 1/(1-p), so the expectation equals the
    /// input. `p = 0` returns the input handle unchanged and draws nothing
    /// from the generator. Eval-time behavior is the caller's concern: skip
    /// the call.
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout probability",
                format!("p must lie in [0,1), got {p}"),
            ));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = 1.0 / (1.0 - p);
        let node = self.inner.borrow();
        let mask: Vec<f64> = node
            .data
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<f64> = node.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = node.shape.clone();
        drop(node);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().zip(&mask).map(|(gv, m)| gv * m).collect()]),
        ))
    }

    // ---- rows, reductions, normalization ----

    /// Adds a length-c vector to every row of an r x c matrix.
    pub fn add_row_vector(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row_vector")?;
        let len = row.dims1("add_row_vector")?;
        if len != c {
            return Err(Error::shape(
                "add_row_vector",
                format!("matrix has {c} columns, vector has {len}"),
            ));
        }
        let mut out = vec![0.0; r * c];
        {
            let x = self.inner.borrow();
            let v = row.inner.borrow();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] = x.data[i * c + j] + v.data[j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g[i * c + j];
                    }
                }
                vec![g.to_vec(), dv]
            }),
        ))
    }

    /// Sum over each row of an r x c matrix, yielding a length-r vector.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("row_sums")?;
        let mut out = vec![0.0; r];
        {
            let node = self.inner.borrow();
            for i in 0..r {
                out[i] = node.data[i * c..(i + 1) * c].iter().sum();
            }
        }
        Ok(Tensor::from_op(
            vec![r],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c..(i + 1) * c].fill(g[i]);
                }
                vec![dx]
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let node = self.inner.borrow();
        let total: f64 = node.data.iter().sum();
        let len = node.data.len();
        drop(node);
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; len]]),
        )
    }

    /// Row-wise softmax with numerical stabilization by the row max. `mask`,
    /// when given, has one flag per entry; masked-out (false) entries produce
    /// exactly 0 and receive no gradient. The denominator is an
    /// order-canonical sum, so row permutations reproduce exact bits.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask has {} entries, matrix has {}", m.len(), r * c),
                ));
            }
        }
        let live = |i: usize, j: usize| mask.map_or(true, |m| m[i * c + j]);
        let mut out = vec![0.0; r * c];
        {
            let node = self.inner.borrow();
            let mut addends = Vec::with_capacity(c);
            for i in 0..r {
                let mut max = f64::NEG_INFINITY;
                for j in 0..c {
                    if live(i, j) {
                        max = max.max(node.data[i * c + j]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::FullyMaskedRow { row: i });
                }
                addends.clear();
                for j in 0..c {
                    if live(i, j) {
                        let e = (node.data[i * c + j] - max).exp();
                        out[i * c + j] = e;
                        addends.push(e);
                    }
                }
                let denom = canonical_sum(&mut addends);
                for j in 0..c {
                    if live(i, j) {
                        out[i * c + j] /= denom;
                    }
                }
            }
        }
        let saved = out.clone();
        let mask_owned: Option<Vec<bool>> = mask.map(<[bool]>::to_vec);
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let live = |i: usize, j: usize| mask_owned.as_ref().map_or(true, |m| m[i * c + j]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        if live(i, j) {
                            dot += g[i * c + j] * saved[i * c + j];
                        }
                    }
                    for j in 0..c {
                        if live(i, j) {
                            dx[i * c + j] = saved[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Per-row standardization to mean 0 / variance 1 (eps inside the square
    /// root), then an affine map by per-column gain and bias.
    pub fn layer_normalize(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_normalize")?;
        if c < 2 {
            return Err(Error::invalid(
                "layer_normalize",
                format!("needs at least 2 features per row, got {c}"),
            ));
        }
        check_affine_args("layer_normalize", gain, bias, c, eps)?;
        let mut out = vec![0.0; r * c];
        {
            let x = self.inner.borrow();
            let gn = gain.inner.borrow();
            let bs = bias.inner.borrow();
            for i in 0..r {
                let row = &x.data[i * c..(i + 1) * c];
                let (mean, inv_std) = standardize_stats(row.iter().copied(), c, eps);
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    out[i * c + j] = gn.data[j] * xhat + bs.data[j];
                }
            }
        }
        let x = self.clone();
        let gn = gain.clone();
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let xb = x.inner.borrow();
                let gnb = gn.inner.borrow();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let row = &xb.data[i * c..(i + 1) * c];
                    let (mean, inv_std) = standardize_stats(row.iter().copied(), c, eps);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = g[i * c + j] * gnb.data[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                        dgain[j] += g[i * c + j] * xhat[j];
                        dbias[j] += g[i * c + j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![dx, dgain, dbias]
            }),
        ))
    }

    /// Per-column standardization over rows (batch-style statistics), then an
    /// affine map by per-column gain and bias. Column sums are
    /// order-canonical so the output commutes bitwise with row permutations.
    pub fn standardize_columns(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2("standardize_columns")?;
        check_affine_args("standardize_columns", gain, bias, c, eps)?;
        let mut out = vec![0.0; r * c];
        {
            let x = self.inner.borrow();
            let gn = gain.inner.borrow();
            let bs = bias.inner.borrow();
            let mut col = Vec::with_capacity(r);
            for j in 0..c {
                col.clear();
                col.extend((0..r).map(|i| x.data[i * c + j]));
                let (mean, inv_std) = canonical_stats(&col, eps);
                for i in 0..r {
                    let xhat = (x.data[i * c + j] - mean) * inv_std;
                    out[i * c + j] = gn.data[j] * xhat + bs.data[j];
                }
            }
        }
        let x = self.clone();
        let gn = gain.clone();
        Ok(Tensor::from_op(
            vec![r, c],
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let xb = x.inner.borrow();
                let gnb = gn.inner.borrow();
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut col = Vec::with_capacity(r);
                let mut xhat = vec![0.0; r];
                let mut dxhat = vec![0.0; r];
                for j in 0..c {
                    col.clear();
                    col.extend((0..r).map(|i| xb.data[i * c + j]));
                    let (mean, inv_std) = canonical_stats(&col, eps);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..r {
                        xhat[i] = (col[i] - mean) * inv_std;
                        dxhat[i] = g[i * c + j] * gnb.data[j];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                        dgain[j] += g[i * c + j] * xhat[i];
                        dbias[j] += g[i * c + j];
                    }
                    m1 /= r as f64;
                    m2 /= r as f64;
                    for i in 0..r {
                        dx[i * c + j] = inv_std * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                vec![dx, dgain, dbias]
            }),
        ))
    }

    // ---- structured ops ----

    /// Length-preserving 1-D convolution over a d_in x N input with a
    /// k x d_in x d_out kernel, fused with `activation`. Zero padding:
    /// floor((k-1)/2) columns on the left, ceil((k-1)/2) on the right, so
    /// even widths pad one more column on the right.
    pub fn conv1d_same(
        &self,
        kernel: &Tensor,
        bias: &Tensor,
        activation: Activation,
    ) -> Result<Tensor> {
        let (d_in, n) = self.dims2("conv1d_same")?;
        let kshape = kernel.shape();
        let (k, d_out) = match kshape[..] {
            [k, kd, d_out] if kd == d_in => (k, d_out),
            _ => {
                return Err(Error::shape(
                    "conv1d_same",
                    format!("kernel {kshape:?} does not fit input {:?}", self.shape()),
                ))
            }
        };
        let blen = bias.dims1("conv1d_same")?;
        if blen != d_out {
            return Err(Error::shape(
                "conv1d_same",
                format!("bias has {blen} entries, kernel produces {d_out}"),
            ));
        }
        let left_pad = (k - 1) / 2;
        let mut out = vec![0.0; d_out * n];
        {
            let x = self.inner.borrow();
            let w = kernel.inner.borrow();
            let b = bias.inner.borrow();
            let mut acc = vec![0.0; d_out];
            for i in 0..n {
                acc.copy_from_slice(&b.data);
                for t in 0..k {
                    let Some(src) = (i + t).checked_sub(left_pad) else {
                        continue;
                    };
                    if src >= n {
                        continue;
                    }
                    for ch in 0..d_in {
                        let xv = x.data[ch * n + src];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data[(t * d_in + ch) * d_out..(t * d_in + ch + 1) * d_out];
                        for (a, wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
                for o in 0..d_out {
                    out[o * n + i] = activation.apply(acc[o]);
                }
            }
        }
        let saved = out.clone();
        let x = self.clone();
        let w = kernel.clone();
        let x_needs = self.needs_grad();
        Ok(Tensor::from_op(
            vec![d_out, n],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            Box::new(move |g| {
                let xb = x.inner.borrow();
                let wb = w.inner.borrow();
                // Chain through the fused activation first.
                let mut gz = vec![0.0; d_out * n];
                for idx in 0..d_out * n {
                    gz[idx] = g[idx] * activation.slope_from_output(saved[idx]);
                }
                let mut dbias = vec![0.0; d_out];
                for o in 0..d_out {
                    dbias[o] = gz[o * n..(o + 1) * n].iter().sum();
                }
                let mut dw = vec![0.0; k * d_in * d_out];
                let mut dx = if x_needs { vec![0.0; d_in * n] } else { Vec::new() };
                for i in 0..n {
                    for t in 0..k {
                        let Some(src) = (i + t).checked_sub(left_pad) else {
                            continue;
                        };
                        if src >= n {
                            continue;
                        }
                        for ch in 0..d_in {
                            let xv = xb.data[ch * n + src];
                            let base = (t * d_in + ch) * d_out;
                            if xv != 0.0 {
                                for o in 0..d_out {
                                    dw[base + o] += gz[o * n + i] * xv;
                                }
                            }
                            if x_needs {
                                let mut s = 0.0;
                                for o in 0..d_out {
                                    s += wb.data[base + o] * gz[o * n + i];
                                }
                                dx[ch * n + src] += s;
                            }
                        }
                    }
                }
                vec![dx, dw, dbias]
            }),
        ))
    }

    /// Column `j` of the d x N output is row `ids[j]` of this V x d table,
    /// except that `pad_id` produces a zero column and routes no gradient
    /// back, keeping the pad row inert under training.
    pub fn embedding_lookup(&self, ids: &[usize], pad_id: usize) -> Result<Tensor> {
        let (v, d) = self.dims2("embedding_lookup")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding_lookup", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::invalid(
                "embedding_lookup",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let n = ids.len();
        let mut out = vec![0.0; d * n];
        {
            let table = self.inner.borrow();
            for (j, &id) in ids.iter().enumerate() {
                if id == pad_id {
                    continue;
                }
                for r in 0..d {
                    out[r * n + j] = table.data[id * d + r];
                }
            }
        }
        let ids_owned = ids.to_vec();
        Ok(Tensor::from_op(
            vec![d, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dt = vec![0.0; v * d];
                for (j, &id) in ids_owned.iter().enumerate() {
                    if id == pad_id {
                        continue;
                    }
                    for r in 0..d {
                        dt[id * d + r] += g[r * n + j];
                    }
                }
                vec![dt]
            }),
        ))
    }

    /// Mean over documents of the per-document label-summed binary cross
    /// entropy. `targets` is row-major B x L over {0,1}; probabilities are
    /// clamped to [1e-12, 1 - 1e-12] inside the logs. The per-document label
    /// sum is order-canonical.
    pub fn binary_cross_entropy(&self, targets: &[f64]) -> Result<Tensor> {
        const CLAMP: f64 = 1e-12;
        let (b, l) = self.dims2("binary_cross_entropy")?;
        if targets.len() != b * l {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("predictions are {b}x{l}, targets hold {}", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(
                "binary_cross_entropy",
                format!("targets must be 0 or 1, got {bad}"),
            ));
        }
        let mut total = 0.0;
        {
            let node = self.inner.borrow();
            let mut addends = Vec::with_capacity(l);
            for doc in 0..b {
                addends.clear();
                for j in 0..l {
                    let p = node.data[doc * l + j];
                    let y = targets[doc * l + j];
                    addends.push(
                        y * p.max(CLAMP).ln() + (1.0 - y) * (1.0 - p).max(CLAMP).ln(),
                    );
                }
                total += canonical_sum(&mut addends);
            }
        }
        let loss = -total / b as f64;
        let probs = self.clone();
        let targets_owned = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let node = probs.inner.borrow();
                let scale = g[0] / b as f64;
                let mut dp = vec![0.0; b * l];
                for idx in 0..b * l {
                    let p = node.data[idx];
                    let y = targets_owned[idx];
                    // Clamped terms are flat in p, so they push no gradient.
                    let mut d = 0.0;
                    if p > CLAMP {
                        d += y / p;
                    }
                    if 1.0 - p > CLAMP {
                        d -= (1.0 - y) / (1.0 - p);
                    }
                    dp[idx] = -scale * d;
                }
                vec![dp]
            }),
        ))
    }
}

/// Stacks equal-length rank-1 tensors into one matrix, one per row.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::invalid("stack_rows", "no rows given"));
    }
    let c = rows[0].dims1("stack_rows")?;
    let r = rows.len();
    let mut out = Vec::with_capacity(r * c);
    for row in rows {
        let len = row.dims1("stack_rows")?;
        if len != c {
            return Err(Error::shape(
                "stack_rows",
                format!("rows of length {c} and {len} cannot stack"),
            ));
        }
        out.extend_from_slice(&row.inner.borrow().data);
    }
    Ok(Tensor::from_op(
        vec![r, c],
        out,
        rows.to_vec(),
        Box::new(move |g| g.chunks(c).map(<[f64]>::to_vec).collect()),
    ))
}

// Saturated outputs are nudged onto the nearest representable values inside
// (0,1), keeping the advertised open interval even for extreme logits.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (1.0 / (1.0 + (-x).exp())).min(1.0 - f64::EPSILON / 2.0)
    } else {
        let e = x.exp();
        (e / (1.0 + e)).max(f64::MIN_POSITIVE)
    }
}

fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    (m, k, n): (usize, usize, usize),
    need_da: bool,
    need_db: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = if need_da { vec![0.0; m * k] } else { Vec::new() };
    let mut db = if need_db { vec![0.0; k * n] } else { Vec::new() };
    if need_da {
        // dA = G * B^T
        for i in 0..m {
            for j in 0..n {
                let gv = g[i * n + j];
                if gv == 0.0 {
                    continue;
                }
                for t in 0..k {
                    da[i * k + t] += gv * b[t * n + j];
                }
            }
        }
    }
    if need_db {
        // dB = A^T * G
        for i in 0..m {
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let grow = &g[i * n..(i + 1) * n];
                let drow = &mut db[t * n..(t + 1) * n];
                for (d, gv) in drow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
    (da, db)
}

fn check_affine_args(
    op: &'static str,
    gain: &Tensor,
    bias: &Tensor,
    c: usize,
    eps: f64,
) -> Result<()> {
    let glen = gain.dims1(op)?;
    let blen = bias.dims1(op)?;
    if glen != c || blen != c {
        return Err(Error::shape(
            op,
            format!("gain/bias lengths {glen}/{blen} do not match {c} columns"),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(op, format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

fn standardize_stats(values: impl Iterator<Item = f64>, len: usize, eps: f64) -> (f64, f64) {
    let collected: Vec<f64> = values.collect();
    let mean = collected.iter().sum::<f64>() / len as f64;
    let var = collected.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
    (mean, 1.0 / (var + eps).sqrt())
}

// Same statistics but with order-canonical sums: used where the reduced axis
// may be permuted and outputs must still match bitwise.
fn canonical_stats(values: &[f64], eps: f64) -> (f64, f64) {
    let mut addends = values.to_vec();
    let mean = canonical_sum(&mut addends) / values.len() as f64;
    addends.clear();
    addends.extend(values.iter().map(|v| (v - mean) * (v - mean)));
    let var = canonical_sum(&mut addends) / values.len() as f64;
    (mean, 1.0 / (var + eps).sqrt())
}

fn binary_op(
    lhs: &Tensor,
    rhs: &Tensor,
    op: &'static str,
    f: fn(f64, f64) -> f64,
    df: fn(f64, f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let (lshape, rshape) = (lhs.shape(), rhs.shape());
    let (lnum, rnum) = (lhs.numel(), rhs.numel());
    enum Cast {
        Exact,
        ScalarRhs,
        ScalarLhs,
    }
    let cast = if lshape == rshape {
        Cast::Exact
    } else if rnum == 1 {
        Cast::ScalarRhs
    } else if lnum == 1 {
        Cast::ScalarLhs
    } else {
        return Err(Error::shape(op, format!("{lshape:?} vs {rshape:?}")));
    };
    let out_shape = match cast {
        Cast::ScalarLhs => rshape,
        _ => lshape,
    };
    let out = {
        let a = lhs.inner.borrow();
        let b = rhs.inner.borrow();
        match cast {
            Cast::Exact => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            Cast::ScalarRhs => a.data.iter().map(|&x| f(x, b.data[0])).collect(),
            Cast::ScalarLhs => b.data.iter().map(|&y| f(a.data[0], y)).collect(),
        }
    };
    let (la, rb) = (lhs.clone(), rhs.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![lhs.clone(), rhs.clone()],
        Box::new(move |g| {
            let a = la.inner.borrow();
            let b = rb.inner.borrow();
            match (a.data.len(), b.data.len()) {
                (al, bl) if al == bl => {
                    let mut da = vec![0.0; al];
                    let mut db = vec![0.0; bl];
                    for i in 0..al {
                        let (dx, dy) = df(a.data[i], b.data[i], g[i]);
                        da[i] = dx;
                        db[i] = dy;
                    }
                    vec![da, db]
                }
                (al, 1) => {
                    let mut da = vec![0.0; al];
                    let mut db_acc = 0.0;
                    for i in 0..al {
                        let (dx, dy) = df(a.data[i], b.data[0], g[i]);
                        da[i] = dx;
                        db_acc += dy;
                    }
                    vec![da, vec![db_acc]]
                }
                (1, bl) => {
                    let mut da_acc = 0.0;
                    let mut db = vec![0.0; bl];
                    for i in 0..bl {
                        let (dx, dy) = df(a.data[0], b.data[i], g[i]);
                        da_acc += dx;
                        db[i] = dy;
                    }
                    vec![vec![da_acc], db]
                }
                _ => unreachable!("shapes validated at construction"),
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Independent numeric oracle: central differences through a freshly
    // rebuilt graph, never touching the backward machinery under test.
    fn numeric_grad(f: &dyn Fn() -> Tensor, param: &Tensor, step: f64) -> Vec<f64> {
        let base = param.data();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + step;
            param.set_data(bumped.clone()).unwrap();
            let up = f().data()[0];
            bumped[i] = base[i] - step;
            param.set_data(bumped).unwrap();
            let down = f().data()[0];
            param.set_data(base.clone()).unwrap();
            grad[i] = (up - down) / (2.0 * step);
        }
        grad
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], what: &str) {
        assert_eq!(analytic.len(), numeric.len(), "{what}: length");
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "{what}: coordinate {i} analytic {a} vs numeric {n} (rel {rel:.3e})"
            );
        }
    }

    fn check_against_fd(f: impl Fn() -> Tensor, params: &[(&str, &Tensor)]) {
        for (_, p) in params {
            p.zero_grad();
        }
        let loss = f();
        loss.backward().unwrap();
        for (name, p) in params {
            let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let numeric = numeric_grad(&|| f(), p, 1e-5);
            assert_grads_close(&analytic, &numeric, name);
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::param(data, shape).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert!(Tensor::new(vec![1.0], &[]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).is_ok());
    }

    #[test]
    fn matmul_identity_passes_through() {
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let x = Tensor::new(vec![5.0, -1.0, 2.5, 0.0, 3.0, 9.0], &[2, 3]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![1.0, 1.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::new(vec![0.0; 4], &[2, 2]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradient_with_ones_matches_fd() {
        let mut r = rng(11);
        let a = random_param(&[3, 4], &mut r);
        let b = Tensor::new(vec![1.0; 8], &[4, 2]).unwrap();
        check_against_fd(|| a.matmul(&b).unwrap().sum_all(), &[("a", &a)]);
        // With B = ones, each dA entry is the row count of G; check directly.
        a.zero_grad();
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn matmul_gradients_both_sides() {
        let mut r = rng(12);
        let a = random_param(&[2, 3], &mut r);
        let b = random_param(&[3, 4], &mut r);
        check_against_fd(
            || a.matmul(&b).unwrap().tanh().sum_all(),
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn matmul_canonical_agrees_with_plain_on_integers() {
        let mut r = rng(13);
        let data_a: Vec<f64> = (0..12).map(|_| r.gen_range(-4..=4) as f64).collect();
        let data_b: Vec<f64> = (0..12).map(|_| r.gen_range(-4..=4) as f64).collect();
        let a = Tensor::new(data_a, &[3, 4]).unwrap();
        let b = Tensor::new(data_b, &[4, 3]).unwrap();
        // Small integers accumulate exactly in either order.
        assert_eq!(
            a.matmul(&b).unwrap().data(),
            a.matmul_canonical(&b).unwrap().data()
        );
    }

    #[test]
    fn matmul_canonical_commutes_with_shared_axis_permutation() {
        let mut r = rng(14);
        let k = 7;
        let a = random_param(&[2, k], &mut r);
        let b = random_param(&[k, 3], &mut r);
        let base = a.matmul_canonical(&b).unwrap().data();
        let perm: Vec<usize> = vec![4, 0, 6, 2, 5, 1, 3];
        let a_data = a.data();
        let b_data = b.data();
        let mut a_perm = vec![0.0; 2 * k];
        let mut b_perm = vec![0.0; k * 3];
        for (new, &old) in perm.iter().enumerate() {
            for i in 0..2 {
                a_perm[i * k + new] = a_data[i * k + old];
            }
            for j in 0..3 {
                b_perm[new * 3 + j] = b_data[old * 3 + j];
            }
        }
        let ap = Tensor::new(a_perm, &[2, k]).unwrap();
        let bp = Tensor::new(b_perm, &[k, 3]).unwrap();
        let permuted = ap.matmul_canonical(&bp).unwrap().data();
        assert_eq!(base, permuted, "bitwise equality under inner permutation");
        check_against_fd(
            || a.matmul_canonical(&b).unwrap().sigmoid().sum_all(),
            &[("a", &a), ("b", &b)],
        );
    }

    #[test]
    fn transpose_round_trips_and_differentiates() {
        let mut r = rng(15);
        let x = random_param(&[2, 5], &mut r);
        let tt = x.transpose().unwrap().transpose().unwrap();
        assert_eq!(tt.data(), x.data());
        check_against_fd(|| x.transpose().unwrap().tanh().sum_all(), &[("x", &x)]);
    }

    #[test]
    fn add_and_mul_elementwise_and_scalar_broadcast() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = Tensor::new(vec![10.0, 20.0, 30.0], &[3]).unwrap();
        let s = Tensor::scalar(2.0);
        assert_eq!(x.add(&y).unwrap().data(), vec![11.0, 22.0, 33.0]);
        assert_eq!(x.mul(&s).unwrap().data(), vec![2.0, 4.0, 6.0]);
        assert_eq!(s.add(&x).unwrap().data(), vec![3.0, 4.0, 5.0]);
        let bad = Tensor::new(vec![0.0; 2], &[2]).unwrap();
        assert!(x.add(&bad).is_err());

        let mut r = rng(16);
        let a = random_param(&[2, 3], &mut r);
        let b = random_param(&[2, 3], &mut r);
        let c = random_param(&[1], &mut r);
        check_against_fd(
            || a.mul(&b).unwrap().add(&c).unwrap().tanh().sum_all(),
            &[("a", &a), ("b", &b), ("c", &c)],
        );
    }

    #[test]
    fn activations_and_scale() {
        let x = Tensor::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().data(), vec![0.0, 0.0, 2.0]);
        assert_eq!(Tensor::scalar(0.0).sigmoid().data(), vec![0.5]);
        assert!((Tensor::scalar(3.0_f64.ln()).sigmoid().data()[0] - 0.75).abs() < 1e-15);
        assert_eq!(x.scale(-2.0).data(), vec![2.0, 0.0, -4.0]);
        // Large magnitudes stay finite.
        let extreme = Tensor::new(vec![-800.0, 800.0], &[2]).unwrap();
        let s = extreme.sigmoid().data();
        assert!(s[0] >= 0.0 && s[1] <= 1.0 && s.iter().all(|v| v.is_finite()));

        let mut r = rng(17);
        let p = random_param(&[6], &mut r);
        check_against_fd(|| p.tanh().sum_all(), &[("tanh", &p)]);
        check_against_fd(|| p.sigmoid().sum_all(), &[("sigmoid", &p)]);
        check_against_fd(|| p.scale(1.5).mul(&p).unwrap().sum_all(), &[("scale", &p)]);
    }

    #[test]
    fn relu_gradient_matches_fd_away_from_kink() {
        let x = Tensor::param(vec![-0.9, -0.3, 0.4, 1.2], &[4]).unwrap();
        check_against_fd(|| x.relu().sum_all(), &[("relu", &x)]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut r = rng(18);
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let before = r.clone();
        let out = x.dropout(0.0, &mut r).unwrap();
        assert_eq!(out.data(), x.data());
        // No randomness consumed.
        assert_eq!(r.gen::<u64>(), before.clone().gen::<u64>());
        assert!(x.dropout(1.0, &mut r).is_err());
        assert!(x.dropout(-0.1, &mut r).is_err());
    }

    #[test]
    fn dropout_is_deterministic_for_a_fixed_seed() {
        let x = Tensor::new((0..100).map(f64::from).collect(), &[100]).unwrap();
        let a = x.dropout(0.4, &mut rng(99)).unwrap().data();
        let b = x.dropout(0.4, &mut rng(99)).unwrap().data();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo over 1e5 scalar trials: mean within 1% of the input.
        let x = Tensor::new(vec![2.0], &[1]).unwrap();
        let mut r = rng(7);
        let trials = 100_000;
        let mut sum = 0.0;
        for _ in 0..trials {
            sum += x.dropout(0.6, &mut r).unwrap().data()[0];
        }
        let mean = sum / trials as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let out = x.dropout(0.5, &mut rng(3)).unwrap();
        let mask: Vec<f64> = out
            .data()
            .iter()
            .zip(x.data())
            .map(|(o, xv)| if *o == 0.0 { 0.0 } else { o / xv })
            .collect();
        out.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), mask);
    }

    #[test]
    fn softmax_uniform_closed_form_and_single_element() {
        let row = Tensor::new(vec![3.7; 5], &[1, 5]).unwrap();
        assert!(row
            .softmax_rows(None)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0 / 5.0));
        let pair = Tensor::new(vec![0.0, 3.0_f64.ln()], &[1, 2]).unwrap();
        let sm = pair.softmax_rows(None).unwrap().data();
        assert!((sm[0] - 0.25).abs() < 1e-12 && (sm[1] - 0.75).abs() < 1e-12);
        let single = Tensor::new(vec![42.0], &[1, 1]).unwrap();
        assert_eq!(single.softmax_rows(None).unwrap().data(), vec![1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_nonnegative() {
        let mut r = rng(20);
        for _ in 0..200 {
            let x = random_param(&[3, 8], &mut r);
            let sm = x.softmax_rows(None).unwrap().data();
            for i in 0..3 {
                let row = &sm[i * 8..(i + 1) * 8];
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_mask_zeroes_entries_and_rejects_dead_rows() {
        let x = Tensor::new(vec![5.0, 1.0, -2.0, 0.0, 0.0, 4.0], &[2, 3]).unwrap();
        let mask = vec![true, false, true, true, true, false];
        let sm = x.softmax_rows(Some(&mask)).unwrap().data();
        assert_eq!(sm[1], 0.0);
        assert_eq!(sm[5], 0.0);
        assert!((sm[0] + sm[2] - 1.0).abs() < 1e-12);
        assert!((sm[3] + sm[4] - 1.0).abs() < 1e-12);
        let dead = vec![true, true, true, false, false, false];
        match x.softmax_rows(Some(&dead)) {
            Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("expected fully-masked error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_is_numerically_stable_for_huge_logits() {
        let x = Tensor::new(vec![1000.0, 1001.0], &[1, 2]).unwrap();
        let sm = x.softmax_rows(None).unwrap().data();
        assert!(sm.iter().all(|v| v.is_finite()));
        assert!((sm[0] + sm[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_fd_with_and_without_mask() {
        let mut r = rng(21);
        let x = random_param(&[2, 5], &mut r);
        let w = Tensor::new((1..=10).map(f64::from).collect(), &[2, 5]).unwrap();
        check_against_fd(
            || x.softmax_rows(None).unwrap().mul(&w).unwrap().sum_all(),
            &[("softmax", &x)],
        );
        let mask = vec![true, true, false, true, true, false, true, true, true, false];
        check_against_fd(
            || {
                x.softmax_rows(Some(&mask))
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum_all()
            },
            &[("softmax_masked", &x)],
        );
    }

    #[test]
    fn layer_normalize_closed_forms() {
        let gain = Tensor::new(vec![1.0, 1.0], &[2]).unwrap();
        let bias = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        let constant = Tensor::new(vec![4.0, 4.0], &[1, 2]).unwrap();
        let out = constant.layer_normalize(&gain, &bias, 1e-6).unwrap().data();
        assert_eq!(out, vec![0.0, 0.0]);
        let row = Tensor::new(vec![1.0, 3.0], &[1, 2]).unwrap();
        let out = row.layer_normalize(&gain, &bias, 1e-15).unwrap().data();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
        let zero_gain = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        let shift = Tensor::new(vec![7.0, -3.0], &[2]).unwrap();
        let out = row.layer_normalize(&zero_gain, &shift, 1e-6).unwrap().data();
        assert_eq!(out, vec![7.0, -3.0]);
        // Single-feature rows have no spread to normalize.
        let narrow = Tensor::new(vec![1.0], &[1, 1]).unwrap();
        let g1 = Tensor::new(vec![1.0], &[1]).unwrap();
        assert!(narrow.layer_normalize(&g1, &g1, 1e-6).is_err());
    }

    #[test]
    fn layer_normalize_gradient_matches_fd() {
        let mut r = rng(22);
        let x = random_param(&[3, 6], &mut r);
        let gain = random_param(&[6], &mut r);
        let bias = random_param(&[6], &mut r);
        check_against_fd(
            || {
                x.layer_normalize(&gain, &bias, 1e-5)
                    .unwrap()
                    .tanh()
                    .sum_all()
            },
            &[("x", &x), ("gain", &gain), ("bias", &bias)],
        );
    }

    #[test]
    fn standardize_columns_stats_and_gradient() {
        let x = Tensor::new(vec![1.0, 10.0, 3.0, 20.0], &[2, 2]).unwrap();
        let gain = Tensor::new(vec![1.0, 1.0], &[2]).unwrap();
        let bias = Tensor::new(vec![0.0, 0.0], &[2]).unwrap();
        let out = x.standardize_columns(&gain, &bias, 1e-15).unwrap().data();
        // Columns (1,3) and (10,20) standardize to -1/+1.
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[2] - 1.0).abs() < 1e-9);
        assert!((out[1] + 1.0).abs() < 1e-9 && (out[3] - 1.0).abs() < 1e-9);

        let mut r = rng(23);
        let x = random_param(&[4, 3], &mut r);
        let gain = random_param(&[3], &mut r);
        let bias = random_param(&[3], &mut r);
        check_against_fd(
            || {
                x.standardize_columns(&gain, &bias, 1e-5)
                    .unwrap()
                    .tanh()
                    .sum_all()
            },
            &[("x", &x), ("gain", &gain), ("bias", &bias)],
        );
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let kernel = Tensor::new(vec![1.0], &[1, 1, 1]).unwrap();
        let bias = Tensor::new(vec![0.0], &[1]).unwrap();
        let out = x.conv1d_same(&kernel, &bias, Activation::Identity).unwrap();
        assert_eq!(out.data(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_width_two_sums_neighbors_with_right_pad() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let kernel = Tensor::new(vec![1.0, 1.0], &[2, 1, 1]).unwrap();
        let bias = Tensor::new(vec![0.0], &[1]).unwrap();
        let out = x.conv1d_same(&kernel, &bias, Activation::Identity).unwrap();
        assert_eq!(out.data(), vec![3.0, 5.0, 3.0]);
    }

    #[test]
    fn conv_zero_kernel_emits_activated_bias() {
        let x = Tensor::new(vec![1.0, -2.0, 0.5, 4.0], &[2, 2]).unwrap();
        let kernel = Tensor::zeros(&[3, 2, 2]).unwrap();
        let bias = Tensor::new(vec![0.3, -0.7], &[2]).unwrap();
        let out = x.conv1d_same(&kernel, &bias, Activation::Tanh).unwrap().data();
        for i in 0..2 {
            assert_eq!(out[i], 0.3_f64.tanh());
            assert_eq!(out[2 + i], (-0.7_f64).tanh());
        }
    }

    #[test]
    fn conv_preserves_length_for_all_small_widths() {
        let mut r = rng(24);
        for k in 1..=12 {
            for n in [1, 2, 3, 5, 17, 64] {
                let x = random_param(&[2, n], &mut r);
                let kernel = random_param(&[k, 2, 3], &mut r);
                let bias = random_param(&[3], &mut r);
                let out = x.conv1d_same(&kernel, &bias, Activation::Tanh).unwrap();
                assert_eq!(out.shape(), vec![3, n], "k={k} n={n}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut r = rng(25);
        for k in [1, 2, 3, 4] {
            let x = random_param(&[3, 6], &mut r);
            let kernel = random_param(&[k, 3, 2], &mut r);
            let bias = random_param(&[2], &mut r);
            check_against_fd(
                || {
                    x.conv1d_same(&kernel, &bias, Activation::Tanh)
                        .unwrap()
                        .sum_all()
                },
                &[("x", &x), ("kernel", &kernel), ("bias", &bias)],
            );
        }
    }

    #[test]
    fn embedding_lookup_selects_rows_and_zeroes_pad() {
        let table = Tensor::new(vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0], &[3, 2]).unwrap();
        let out = table.embedding_lookup(&[1, 0, 2, 1], 0).unwrap();
        assert_eq!(out.shape(), vec![2, 4]);
        assert_eq!(out.data(), vec![1.0, 0.0, 3.0, 1.0, 2.0, 0.0, 4.0, 2.0]);
        assert!(table.embedding_lookup(&[3], 0).is_err());
        assert!(table.embedding_lookup(&[], 0).is_err());
    }

    #[test]
    fn embedding_lookup_routes_gradient_to_used_rows_only() {
        let mut r = rng(26);
        let table = random_param(&[4, 3], &mut r);
        check_against_fd(
            || table.embedding_lookup(&[2, 0, 2], 0).unwrap().tanh().sum_all(),
            &[("table", &table)],
        );
        table.zero_grad();
        table
            .embedding_lookup(&[2, 0, 2], 0)
            .unwrap()
            .sum_all()
            .backward()
            .unwrap();
        let grad = table.grad().unwrap();
        assert!(grad[0..3].iter().all(|&g| g == 0.0), "pad row stays inert");
        assert!(grad[3..6].iter().all(|&g| g == 0.0), "unused row untouched");
        assert!(grad[6..9].iter().all(|&g| g == 2.0), "row 2 used twice");
    }

    #[test]
    fn bce_closed_forms() {
        let half = Tensor::new(vec![0.5], &[1, 1]).unwrap();
        let loss = half.binary_cross_entropy(&[1.0]).unwrap().data()[0];
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);
        let quarter = Tensor::new(vec![0.25], &[1, 1]).unwrap();
        let loss = quarter.binary_cross_entropy(&[1.0]).unwrap().data()[0];
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
        // Matching predictions cost ~0 after clamping.
        let confident = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let loss = confident.binary_cross_entropy(&[1.0, 0.0]).unwrap().data()[0];
        assert!(loss.abs() < 1e-10 && loss.is_finite());
        assert!(half.binary_cross_entropy(&[0.5]).is_err(), "non-binary target");
        assert!(half.binary_cross_entropy(&[1.0, 0.0]).is_err(), "length");
    }

    #[test]
    fn bce_averages_over_documents_and_sums_over_labels() {
        let probs = Tensor::new(vec![0.5, 0.5, 0.5, 0.5], &[2, 2]).unwrap();
        let loss = probs
            .binary_cross_entropy(&[1.0, 0.0, 1.0, 1.0])
            .unwrap()
            .data()[0];
        assert!((loss - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_matches_fd_on_interior_points() {
        let x = Tensor::param(vec![0.3, 0.8, 0.6, 0.45], &[2, 2]).unwrap();
        check_against_fd(
            || x.binary_cross_entropy(&[1.0, 0.0, 0.0, 1.0]).unwrap(),
            &[("probs", &x)],
        );
    }

    #[test]
    fn add_row_vector_row_sums_stack_rows() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let v = Tensor::new(vec![10.0, 20.0], &[2]).unwrap();
        assert_eq!(x.add_row_vector(&v).unwrap().data(), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(x.row_sums().unwrap().data(), vec![3.0, 7.0]);
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let stacked = stack_rows(&[a, b]).unwrap();
        assert_eq!(stacked.shape(), vec![2, 2]);
        assert_eq!(stacked.data(), vec![1.0, 2.0, 3.0, 4.0]);

        let mut r = rng(27);
        let x = random_param(&[3, 4], &mut r);
        let v = random_param(&[4], &mut r);
        check_against_fd(
            || x.add_row_vector(&v).unwrap().tanh().sum_all(),
            &[("x", &x), ("v", &v)],
        );
        check_against_fd(|| x.row_sums().unwrap().sigmoid().sum_all(), &[("x", &x)]);
        let r0 = random_param(&[4], &mut r);
        let r1 = random_param(&[4], &mut r);
        check_against_fd(
            || stack_rows(&[r0.clone(), r1.clone()]).unwrap().tanh().sum_all(),
            &[("r0", &r0), ("r1", &r1)],
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(vec![4.0, -1.0, 2.0], &[3]).unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_elementwise_square() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_sums_over_fan_out() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let shared = x.scale(2.0);
        // loss = 2x + (2x)^2, so dloss/dx = 2 + 8x = 26 at x = 3.
        let loss = shared.add(&shared.mul(&shared).unwrap()).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![26.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates_over_calls() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            x.scale(1.0).backward(),
            Err(Error::NonScalarLoss { .. })
        ));
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0], "two passes accumulate");
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_through_a_diamond_matches_fd() {
        let mut r = rng(28);
        let x = random_param(&[2, 2], &mut r);
        check_against_fd(
            || {
                let h = x.tanh();
                let left = h.matmul(&h).unwrap();
                let right = h.scale(0.5);
                left.add(&right).unwrap().sum_all()
            },
            &[("x", &x)],
        );
    }

    #[test]
    fn grads_flow_only_inside_the_requires_grad_cone() {
        let frozen = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let live = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
        let loss = frozen.mul(&live).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(frozen.grad().is_none());
        assert_eq!(live.grad().unwrap(), vec![1.0, 2.0]);
    }
}
