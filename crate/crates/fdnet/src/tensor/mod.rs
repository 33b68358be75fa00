//! Reverse-mode autodiff tape over dynamically shaped `ndarray` tensors.
//!
//! Nodes are appended in execution order, so iterating the tape backwards is
//! a valid topological order for backpropagation. Everything is
//! single-threaded and allocation order is fixed, which makes forward and
//! backward passes bitwise deterministic for a given seed.
//!
//! The element type is generic: `f32` carries training, `f64` carries the
//! finite-difference verification paths.

pub mod conv;
pub mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rustfft::FftNum;

/// Tag for the element type stored in checkpoints.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element of the engine.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + FftNum
    + Display
    + Debug
    + Default
    + Sum<Self>
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const SIZE: usize;

    fn of(x: f64) -> Self;
    fn f(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const SIZE: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn f(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const SIZE: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn f(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: ArrayD<T>,
    pub(crate) needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

type BackwardFn<T> = Box<dyn Fn(&[Node<T>], &ArrayD<T>, &mut GradStore<T>)>;

pub(crate) struct TapeInner<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

/// Handle to a value recorded on a tape. Cloning is cheap.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
    id: usize,
    shape: Vec<usize>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// Tape that records values only; backward closures are dropped.
    pub fn inference() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_enabled: false,
            })),
        }
    }

    pub fn leaf(&self, value: ArrayD<T>, requires_grad: bool) -> Tensor<T> {
        let mut inner = self.inner.borrow_mut();
        let needs = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        let shape = value.shape().to_vec();
        inner.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: None,
        });
        Tensor {
            inner: Rc::clone(&self.inner),
            id,
            shape,
        }
    }

    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backpropagate from a scalar loss. Returns the gradients of every node
    /// that required them; query by tensor handle.
    pub fn backward(&self, loss: &Tensor<T>) -> GradStore<T> {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.inner),
            "loss recorded on a different tape"
        );
        let inner = self.inner.borrow();
        assert_eq!(
            inner.nodes[loss.id].value.len(),
            1,
            "backward expects a scalar loss"
        );
        let n = inner.nodes.len();
        let mut store = GradStore {
            grads: vec![None; n],
            wants: inner.nodes.iter().map(|nd| nd.needs_grad).collect(),
        };
        store.grads[loss.id] = Some(ArrayD::ones(inner.nodes[loss.id].value.raw_dim()));
        for id in (0..=loss.id).rev() {
            let Some(back) = inner.nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = store.grads[id].take() else {
                continue;
            };
            back(&inner.nodes, &g, &mut store);
            store.grads[id] = Some(g);
        }
        store
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the value without cloning.
    pub fn with<R>(&self, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[self.id].value)
    }

    /// Owned copy of the value.
    pub fn value(&self) -> ArrayD<T> {
        self.with(|v| v.clone())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.with(|v| {
            assert_eq!(v.len(), 1, "item() on non-scalar tensor");
            *v.iter().next().unwrap()
        })
    }

    pub(crate) fn same_tape(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Record a new node computed from `parents`. The backward closure
    /// receives the full node list (for reading parent values), the incoming
    /// gradient, and the gradient store to accumulate into.
    pub(crate) fn from_op(
        parents: &[&Tensor<T>],
        value: ArrayD<T>,
        backward: impl Fn(&[Node<T>], &ArrayD<T>, &mut GradStore<T>) + 'static,
    ) -> Tensor<T> {
        let first = parents.first().expect("op with no parents");
        for p in &parents[1..] {
            assert!(first.same_tape(p), "op parents recorded on different tapes");
        }
        let mut inner = first.inner.borrow_mut();
        let needs = inner.grad_enabled && parents.iter().any(|p| inner.nodes[p.id].needs_grad);
        let id = inner.nodes.len();
        let shape = value.shape().to_vec();
        inner.nodes.push(Node {
            value,
            needs_grad: needs,
            backward: if needs { Some(Box::new(backward)) } else { None },
        });
        Tensor {
            inner: Rc::clone(&first.inner),
            id,
            shape,
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct GradStore<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
    wants: Vec<bool>,
}

impl<T: Scalar> GradStore<T> {
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.wants[id]
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: ArrayD<T>) {
        if !self.wants[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn grad(&self, t: &Tensor<T>) -> Option<&ArrayD<T>> {
        self.grads[t.id].as_ref()
    }

    pub fn take(&mut self, t: &Tensor<T>) -> Option<ArrayD<T>> {
        self.grads[t.id].take()
    }
}

/// Clone into standard (row-major, contiguous) layout if needed.
pub(crate) fn std_owned<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ArrayD::from_shape_vec(shape, a.iter().cloned().collect()).unwrap()
    }
}

/// Zero-dimensional tensor value.
pub(crate) fn scalar_value<T: Scalar>(x: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), x)
}

#[cfg(test)]
pub(crate) mod check {
    //! Finite-difference oracle used by the op tests.

    use super::*;
    use ndarray::ArrayD;

    /// Central finite differences of `f` at `x0`, elementwise.
    pub fn finite_diff<F>(f: F, x0: &ArrayD<f64>, h: f64) -> ArrayD<f64>
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let mut g = ArrayD::zeros(x0.raw_dim());
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    /// Check the autodiff input-gradient of `build` (a scalar-valued graph)
    /// against central differences.
    pub fn gradcheck<F>(build: F, x0: &ArrayD<f64>, h: f64, tol: f64)
    where
        F: Fn(&Tape<f64>, &Tensor<f64>) -> Tensor<f64>,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = build(&tape, &x);
        let grads = tape.backward(&loss);
        let auto = grads.grad(&x).expect("input gradient missing").clone();

        let fd = finite_diff(
            |xv| {
                let t = Tape::new();
                let xt = t.leaf(xv.clone(), false);
                build(&t, &xt).item()
            },
            x0,
            h,
        );
        let err = max_rel_err(&auto, &fd);
        assert!(
            err <= tol,
            "gradcheck failed: max rel err {err:.3e} > tol {tol:.1e}"
        );
    }
}
