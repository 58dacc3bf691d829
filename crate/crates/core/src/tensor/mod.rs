//! Dense f32 tensors with tape-free reverse-mode autodiff.
//!
//! Every op that sees a `requires_grad` input records its parents and a
//! backward closure on the output node. [`Tensor::backward`] walks the
//! resulting DAG in reverse topological order, accumulates gradients into
//! the leaves, and drops the op records so the graph is freed once the
//! caller releases its handles.
//!
//! Storage is f32; reductions (matmul inner products, sums, normalization
//! statistics, log-sum-exp) accumulate in f64 before rounding back.

mod adam;
mod ops;

pub use adam::{adam_step, cosine_lr, Adam, AdamState};

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

struct OpRecord {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    op: RefCell<Option<OpRecord>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) || n != data.len() {
        return Err(Error::Validation(format!(
            "shape {:?} does not describe {} elements",
            shape,
            data.len()
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Option<OpRecord>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: RefCell::new(op),
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let op = requires_grad.then(|| OpRecord { parents, backward });
        Tensor::build(shape, data, requires_grad, op)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Tensor::build(shape.to_vec(), data, true, None))
    }

    /// Non-trainable leaf.
    pub fn constant(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape, &data)?;
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::build(vec![1], vec![value], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite leaf data in place (optimizer use). Length must match.
    pub fn set_data(&self, new: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub(crate) fn add_to_grad(&self, delta: &[f32]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively into every reachable `requires_grad` tensor; op records
    /// of visited nodes are dropped afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.inner.shape.clone()));
        }
        if !self.inner.requires_grad {
            return Err(Error::EmptyGraph);
        }
        let order = self.topo_order();
        self.add_to_grad(&[1.0]);
        for node in order.iter().rev() {
            let record = node.inner.op.borrow_mut().take();
            let Some(record) = record else { continue };
            let grad = node.inner.grad.borrow().clone();
            if let Some(grad) = grad {
                (record.backward)(&grad, &record.parents);
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.inner.op.borrow().as_ref() {
                for p in &op.parents {
                    if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// True when the tensor holds no NaN or infinity.
    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

// ── f64-accumulating matmul kernels ─────────────────────────────────────────
//
// All three layouts funnel into one row-accumulator kernel whose inner
// loop runs over independent output columns, which autovectorizes without
// reordering any per-element accumulation chain.

fn transpose_raw(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

/// C[m,n] = A[m,k] @ B[k,n]
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let out = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b64[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// C[m,n] = A[m,k] @ B[n,k]^T
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul_nn(a, &transpose_raw(b, n, k), m, k, n)
}

/// C[m,n] = A[k,m]^T @ B[k,n]
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul_nn(&transpose_raw(a, k, m), b, m, k, n)
}

#[cfg(test)]
mod tests;
