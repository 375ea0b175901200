//! Dense row-major tensors with reverse-mode autodiff.
//!
//! Tensors are value-semantic and immutable once built; every op returns a
//! fresh tensor. Nodes that (transitively) depend on a parameter carry a
//! backward closure; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and accumulates gradients into each parameter's slot.
//! The tape lives inside the tensors themselves and is confined to one thread
//! (`Rc`, not `Arc`); batch-level parallelism belongs above this layer.
//!
//! Shape mismatches are programming errors and panic with a description; they
//! are not recoverable conditions at this level. Configuration-level
//! validation happens before tensors are ever built.
//!
//! Generic over [`Element`] (`f32`/`f64`): double precision is the test-suite
//! default, single precision the training default. The inner matmul kernel is
//! delegated to `matrixmultiply`, which is pure Rust and deterministic.

mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar type a [`Tensor`] can hold.
pub trait Element:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE_NAME: &'static str;

    /// C <- alpha * A * B + beta * C over strided buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE_NAME: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Element for f64 {
    const DTYPE_NAME: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// Lossless-enough conversion from f64 literals into the element type.
#[inline]
pub fn el<E: Element>(v: f64) -> E {
    E::from_f64(v).expect("f64 literal converts into element type")
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Context handed to a backward closure: the incoming gradient plus the
/// node's own output and its parents.
pub struct BackCtx<'a, E: Element> {
    pub grad: &'a [E],
    pub out_shape: &'a [usize],
    pub out_data: &'a [E],
    pub parents: &'a [Tensor<E>],
}

type BackwardFn<E> = Box<dyn Fn(&BackCtx<'_, E>) -> Vec<Option<Vec<E>>>>;

struct Op<E: Element> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

impl<E: Element> Drop for Inner<E> {
    // Dropping a node naively recurses through its parent chain, which
    // overflows the stack on long graphs. Strip ops iteratively instead,
    // so each Inner that actually dies does so with no parents attached.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<E>> = Vec::new();
        if let Some(op) = self.op.take() {
            stack.extend(op.parents);
        }
        while let Some(t) = stack.pop() {
            let Tensor { inner } = t;
            if let Ok(mut sole) = Rc::try_unwrap(inner) {
                if let Some(op) = sole.op.take() {
                    stack.extend(op.parents);
                }
            }
        }
    }
}

pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// A constant (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::new(shape.to_vec(), data, false, None)
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![E::zero(); shape.iter().product()])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![E::one(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: E) -> Self {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Seeded normal draw, mean 0 and the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                el::<E>(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.inner.requires_grad);
        let op = requires_grad.then_some(Op { parents, backward });
        Tensor::new(shape, data, requires_grad, op)
    }

    #[inline]
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() needs a one-element tensor");
        self.inner.data[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::from_vec(&self.inner.shape, self.inner.data.clone())
    }

    /// Fresh trainable leaf with this tensor's values.
    pub fn to_param(&self) -> Tensor<E> {
        Tensor::param(&self.inner.shape, self.inner.data.clone())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .inner
            .data
            .iter()
            .map(|&v| F::from_f64(v.to_f64().expect("finite")).expect("fits"))
            .collect();
        Tensor::from_vec(&self.inner.shape, data)
    }

    /// Backward from a scalar output with seed gradient 1.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar; use backward_with");
        self.backward_with(vec![E::one()]);
    }

    /// Backward with an explicit seed gradient (same shape as `self`).
    pub fn backward_with(&self, seed: Vec<E>) {
        assert_eq!(seed.len(), self.numel(), "seed gradient shape mismatch");
        if !self.inner.requires_grad {
            return;
        }
        // Post-order DFS; reversed it yields every node before its parents.
        enum Frame<E: Element> {
            Enter(Tensor<E>),
            Exit(Tensor<E>),
        }
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.inner.id) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    if let Some(op) = &t.inner.op {
                        for p in &op.parents {
                            if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                                stack.push(Frame::Enter(p.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        *self.inner.grad.borrow_mut() = Some(seed);
        for t in order.iter().rev() {
            let Some(op) = &t.inner.op else { continue };
            let grad_ref = t.inner.grad.borrow();
            let Some(grad) = grad_ref.as_ref() else { continue };
            let ctx = BackCtx {
                grad,
                out_shape: &t.inner.shape,
                out_data: &t.inner.data,
                parents: &op.parents,
            };
            let parent_grads = (op.backward)(&ctx);
            drop(grad_ref);
            assert_eq!(parent_grads.len(), op.parents.len());
            for (p, g) in op.parents.iter().zip(parent_grads) {
                if !p.inner.requires_grad {
                    continue;
                }
                let Some(g) = g else { continue };
                assert_eq!(g.len(), p.numel(), "bad gradient size from backward op");
                let mut slot = p.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }
}

/// Largest absolute elementwise difference, in f64.
pub fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

/// Largest relative elementwise difference with an absolute floor, in f64.
pub fn max_rel_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_diff shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64().unwrap(), y.to_f64().unwrap());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
