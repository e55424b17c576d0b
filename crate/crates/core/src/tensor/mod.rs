//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Parameters live in [`Tensor`]s owned by the caller. Each training step
//! builds a fresh [`Graph`], binds the parameters as leaves, records the
//! forward pass and calls [`Graph::backward`]. The returned [`Gradients`]
//! are then accumulated into the tensors' `grad` buffers.
//!
//! The element type is generic over [`Scalar`] so that the same model code
//! runs in `f32` for training and in `f64` for finite-difference checks.

mod broadcast;
mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use graph::{Gradients, Graph, Var};

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type usable in a [`Graph`].
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the stated sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `c (+)= op(a) @ op(b)` for row-major slices, where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were asserted above and the strides describe exactly
    // those row-major buffers; `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A dense N-dimensional array with an optional gradient buffer.
///
/// A shape of `[]` denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Data and gradient together, for optimizers.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&[T]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Drops the gradient buffer, keeping `requires_grad`.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new([2, 3], vec![0.0; 5]),
            Err(Error::DataLength { expected: 6, .. })
        ));
    }

    #[test]
    fn grad_is_lazy() {
        let mut t = Tensor::<f32>::zeros([3]).with_grad();
        assert!(t.grad().is_none());
        t.grad_mut()[1] = 2.0;
        assert_eq!(t.grad().unwrap(), &[0.0, 2.0, 0.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}
