//! Dense N-dimensional `f64` tensors with reverse-mode differentiation.
//!
//! Axis order follows `(N, D, H, W, C)` with the leading axes optional, so
//! channels are always the innermost, contiguous axis.
//!
//! A [`Tensor`] produced by an operation remembers its inputs and a backward
//! rule whenever any input requires a gradient. Node ids are allocated from a
//! global counter, so sorting the reachable nodes by descending id gives a
//! valid reverse topological order for [`Tensor::backward`].

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule: receives the output gradient and a per-parent flag saying
/// whether that parent needs a gradient; returns one optional gradient per
/// parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    retain_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            retain_grad: Cell::new(false),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        check_finite("tensor", &data)?;
        Ok(Tensor::build(shape.to_vec(), data, false))
    }

    /// Leaf tensor that accumulates a gradient during [`Tensor::backward`].
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(t.with_grad())
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false)
    }

    /// Turns this tensor into a gradient-accumulating leaf.
    pub fn with_grad(self) -> Tensor {
        match Rc::try_unwrap(self.0) {
            Ok(node) => Tensor::build(node.shape, node.data, true),
            Err(rc) => Tensor::build(rc.shape.clone(), rc.data.clone(), true),
        }
    }

    /// Same values, cut from any recorded computation.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Result of an operation. Records `parents` and `backward` only when at
    /// least one parent requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Ok(Tensor::build(shape, data, false));
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad: true,
            retain_grad: Cell::new(false),
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
        })))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Keep the gradient of this intermediate tensor after backward.
    pub fn retain_grad(&self) {
        self.0.retain_grad.set(true);
    }

    /// Back-propagates from this scalar. Leaves (and tensors marked with
    /// [`Tensor::retain_grad`]) accumulate `dself/dleaf`; calling again
    /// without [`Tensor::zero_grad`] adds to the stored gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::Detached);
        }

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in &nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(rule) = &node.0.backward else {
                accumulate(&node.0.grad, &g);
                continue;
            };
            if node.0.retain_grad.get() {
                accumulate(&node.0.grad, &g);
            }
            let needs: Vec<bool> = node.0.parents.iter().map(|p| p.requires_grad()).collect();
            let grads = rule(&g, &needs);
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (p, pg) in node.0.parents.iter().zip(grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match pending.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(p.id(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f64>>>, g: &[f64]) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape().to_vec(),
                found: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Result<Tensor> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let x = self.clone();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let y = data.clone();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }),
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::invalid("log", format!("input {bad} outside (0, inf)")));
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        Tensor::from_op(
            "log",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(x.data()).map(|(g, x)| g / x).collect())]),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let data = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let x = self.clone();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(g, x)| if (lo..=hi).contains(x) { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// For a reduction over `axes`, maps every input flat index to its output
/// flat index.
fn reduction_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    // Stride in the output for every input axis (0 for reduced axes).
    let mut step = vec![0usize; shape.len()];
    let mut k = 0;
    for (i, s) in step.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = out_strides[k];
            k += 1;
        }
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for _ in 0..n {
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            o += step[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= step[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

impl Tensor {
    fn check_axes(&self, op: &'static str, axes: &[usize]) -> Result<Vec<usize>> {
        if axes.is_empty() {
            return Err(Error::invalid(op, "empty axis set"));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&a) = sorted.iter().find(|&&a| a >= self.rank()) {
            return Err(Error::InvalidAxis {
                op,
                axis: a,
                rank: self.rank(),
            });
        }
        Ok(sorted)
    }

    /// Sum over `axes`, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.reduce("sum", axes, 1.0)
    }

    /// Mean over `axes`, removing them from the shape.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let axes = self.check_axes("mean", axes)?;
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.reduce("mean", &axes, 1.0 / count as f64)
    }

    fn reduce(&self, op: &'static str, axes: &[usize], factor: f64) -> Result<Tensor> {
        let axes = self.check_axes(op, axes)?;
        let (out_shape, map) = reduction_index(self.shape(), &axes);
        let mut out = vec![0.0; numel(&out_shape)];
        for (v, &o) in self.data().iter().zip(&map) {
            out[o] += v;
        }
        if factor != 1.0 {
            out.iter_mut().for_each(|v| *v *= factor);
        }
        Tensor::from_op(
            op,
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(map.iter().map(|&o| g[o] * factor).collect())]),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        self.sum_all()?.scale(1.0 / n as f64)
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape().to_vec(),
                found: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..rank).collect::<Vec<_>>() {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of 0..{rank}")));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        // map[out_flat] = in_flat
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            map.push(src);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += step[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= step[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let data = map.iter().map(|&s| self.data()[s]).collect();
        Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![0.0; g.len()];
                for (gv, &s) in g.iter().zip(&map) {
                    out[s] = *gv;
                }
                vec![Some(out)]
            }),
        )
    }

    /// The sub-tensor `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: self.rank(),
            });
        }
        let dim = self.shape()[axis];
        if start + len > dim {
            return Err(Error::invalid("narrow", format!("range {start}..{} exceeds {dim}", start + len)));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut out = vec![0.0; total];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(out)]
            }),
        )
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                op: "split",
                axis,
                rank: self.rank(),
            });
        }
        let total: usize = sizes.iter().sum();
        if total != self.shape()[axis] {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} sum to {total}, axis length is {}", self.shape()[axis]),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "concat", axis, rank });
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: first.shape().to_vec(),
                    found: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut out = Vec::with_capacity(lens.len());
                for (k, &l) in lens.iter().enumerate() {
                    if needs[k] {
                        let mut piece = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            piece.extend_from_slice(&g[base..base + l * inner]);
                        }
                        out.push(Some(piece));
                    } else {
                        out.push(None);
                    }
                    offset += l;
                }
                out
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Compares the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences with step `step`.
///
/// Returns the maximum over coordinates of
/// `|analytic - fd| / max(1, |analytic|)`. Coordinates with
/// `|x_i| < 10 * step` are skipped so that kinks at zero (relu, clamp at 0)
/// do not pollute the estimate.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let leaf = Tensor::leaf(x.shape(), x.to_vec())?;
    let y = f(&leaf)?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> { f(&Tensor::new(x.shape(), data)?)?.item() };
    let base_a = eval(x.to_vec())?;
    let base_b = eval(x.to_vec())?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let xi = x.data()[i];
        if xi.abs() < 10.0 * step {
            continue;
        }
        let mut plus = x.to_vec();
        plus[i] = xi + step;
        let mut minus = x.to_vec();
        minus[i] = xi - step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::leaf(&[2], vec![0.0, 1.0]).unwrap();
        x.relu().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let x = random(&[2, 3, 4], 1);
        let y = x.add(&Tensor::zeros(&[2, 3, 4])).unwrap();
        assert_eq!(x.data(), y.data());
        assert_eq!(x.add_scalar(0.0).unwrap().data(), x.data());
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_error() {
        let a = Tensor::full(&[2], 1e308);
        assert!(matches!(a.scale(10.0), Err(Error::NonFinite { .. })));
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn reductions() {
        let c = Tensor::full(&[2, 3, 4], 1.75);
        assert_eq!(c.mean_axes(&[0, 2]).unwrap().data(), &[1.75; 3]);
        let ones = Tensor::full(&[2, 3], 1.0);
        assert_eq!(ones.sum_axes(&[0, 1]).unwrap().item().unwrap(), 6.0);
        assert_eq!(ones.sum_all().unwrap().item().unwrap(), 6.0);
        let x = Tensor::zeros(&[4, 8, 8, 3]);
        assert_eq!(x.mean_axes(&[0]).unwrap().shape(), &[8, 8, 3]);
        assert!(x.sum_axes(&[]).is_err());
        assert!(x.sum_axes(&[4]).is_err());
    }

    #[test]
    fn reduce_matches_manual_sum() {
        let x = random(&[2, 3, 4], 2);
        let s = x.sum_axes(&[1]).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let want: f64 = (0..3).map(|b| x.data()[a * 12 + b * 4 + c]).sum();
                assert!((s.data()[a * 4 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn split_and_concat() {
        let x = random(&[4, 8, 8, 6], 3);
        let parts = x.split(3, &[3, 3]).unwrap();
        assert_eq!(parts[0].shape(), &[4, 8, 8, 3]);
        assert_eq!(parts[1].shape(), &[4, 8, 8, 3]);
        let back = Tensor::concat(&parts, 3).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(x.split(3, &[4, 3]).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let x = random(&[2, 3, 4, 5], 4);
        let p = x.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        // Inverse of [2,0,3,1] is [1,3,0,2].
        let back = p.permute(&[1, 3, 0, 2]).unwrap();
        assert_eq!(back.data(), x.data());
        // p[c,a,d,b] == x[a,b,c,d]
        assert_eq!(p.data()[((2 + 1) * 5 + 3) * 3 + 2], x.data()[((3 + 2) * 4 + 1) * 5 + 3]);
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let x = Tensor::leaf(&[3], vec![0.5, -2.0, 3.0]).unwrap();
        x.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
        x.zero_grad();
        x.mul(&x).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let x = Tensor::leaf(&[3], vec![1.0; 3]).unwrap();
        assert!(matches!(x.scale(2.0).unwrap().backward(), Err(Error::NotScalar(_))));
        assert!(matches!(Tensor::scalar(1.0).backward(), Err(Error::Detached)));
    }

    #[test]
    fn gradient_accumulates_exactly() {
        let x = random(&[5], 5).with_grad();
        let l1 = || x.square().unwrap().sum_all().unwrap();
        let l2 = || x.sigmoid().unwrap().sum_all().unwrap();
        l1().backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        l2().backward().unwrap();
        let g2 = x.grad().unwrap();
        x.zero_grad();
        l1().backward().unwrap();
        l2().backward().unwrap();
        let both = x.grad().unwrap();
        for i in 0..5 {
            assert_eq!(both[i], g1[i] + g2[i]);
        }
    }

    #[test]
    fn shared_subexpression_gradient() {
        // y = x*x + x, used twice downstream.
        let x = Tensor::leaf(&[1], vec![1.5]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.add(&y).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0 * (2.0 * 1.5 + 1.0)]);
    }

    #[test]
    fn retain_grad_on_intermediate() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let h = x.scale(3.0).unwrap();
        h.retain_grad();
        h.square().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![6.0, 12.0]);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let x = random(&[8], 6);
        let err = grad_check(|t| t.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_quadratic() {
        let x = random(&[8], 7);
        let err = grad_check(|t| t.square()?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_skips_kinks() {
        // The middle coordinate sits on the relu kink and is excluded.
        let x = Tensor::new(&[3], vec![-0.5, 1e-6, 0.7]).unwrap();
        let err = grad_check(|t| t.relu()?.sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_detects_non_determinism() {
        let counter = Cell::new(0.0);
        let x = random(&[2], 8);
        let res = grad_check(
            |t| {
                counter.set(counter.get() + 1.0);
                t.sum_all()?.add_scalar(counter.get())
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonDeterministic)));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..50u64 {
            let x = random(&[2, 3, 4], 100 + seed);
            let w = random(&[2, 3, 4], 200 + seed);
            let checks: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
                ("add", Box::new(|t: &Tensor| t.add(&w)?.square()?.sum_all())),
                ("sub", Box::new(|t: &Tensor| w.sub(t)?.square()?.sum_all())),
                ("mul", Box::new(|t: &Tensor| t.mul(&w)?.mul(t)?.sum_all())),
                ("scale", Box::new(|t: &Tensor| t.scale(-1.7)?.square()?.sum_all())),
                ("relu", Box::new(|t: &Tensor| t.relu()?.mul(&w)?.sum_all())),
                ("sigmoid", Box::new(|t: &Tensor| t.sigmoid()?.mul(&w)?.sum_all())),
                ("log", Box::new(|t: &Tensor| t.square()?.add_scalar(0.5)?.log()?.sum_all())),
                ("clamp", Box::new(|t: &Tensor| t.clamp(-0.5, 0.5)?.mul(&w)?.sum_all())),
                ("sum_axes", Box::new(|t: &Tensor| t.sum_axes(&[1])?.square()?.sum_all())),
                ("mean_axes", Box::new(|t: &Tensor| t.mean_axes(&[0, 2])?.square()?.sum_all())),
                ("permute", Box::new(|t: &Tensor| t.permute(&[2, 0, 1])?.reshape(&[24])?.mul(&w.reshape(&[24])?)?.sum_all())),
                ("split", Box::new(|t: &Tensor| {
                    let p = t.split(2, &[1, 3])?;
                    p[0].square()?.sum_all()?.add(&p[1].sigmoid()?.sum_all()?)
                })),
                ("concat", Box::new(|t: &Tensor| Tensor::concat(&[t.clone(), w.mul(t)?], 1)?.square()?.mean_all())),
            ];
            for (name, f) in checks {
                let err = grad_check(f, &x, 1e-5).unwrap();
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn layout_roundtrips_are_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..5),
            seed in any::<u64>(),
            axis_pick in any::<prop::sample::Index>(),
            cut in 0.0f64..1.0,
        ) {
            let x = random(&dims, seed);
            let rank = dims.len();
            let flat = x.reshape(&[x.numel()]).unwrap().reshape(&dims).unwrap();
            prop_assert_eq!(flat.data(), x.data());

            let mut perm: Vec<usize> = (0..rank).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut inverse = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = x.permute(&perm).unwrap().permute(&inverse).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert_eq!(back.data(), x.data());

            let axis = axis_pick.index(rank);
            let len = dims[axis];
            let first = 1 + (cut * (len - 1) as f64) as usize;
            let sizes: Vec<usize> = if first < len { vec![first, len - first] } else { vec![len] };
            let parts = x.split(axis, &sizes).unwrap();
            let joined = Tensor::concat(&parts, axis).unwrap();
            prop_assert_eq!(joined.data(), x.data());
        }
    }
}
