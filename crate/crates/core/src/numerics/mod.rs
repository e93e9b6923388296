//! Differentiable primitives with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! is gradient-checked in `f64`.

mod checkpoint;
mod conv;
mod gradcheck;
mod lstm;
mod ops;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use checkpoint::{read_param_set, write_param_set, PARAM_MAGIC, PARAM_VERSION};
pub use conv::{conv2d_masked, conv2d_masked_backward, Mask};
pub use gradcheck::{grad_check, grad_check_piecewise, relative_error, GradCheckReport};
pub use lstm::{lstm_cell, lstm_cell_backward, lstm_cell_forward, LstmCellParams, LstmStep};
pub use ops::{
    dense, dense_backward, elementwise_max, elementwise_max_backward, elementwise_max_with_argmax,
    l2_normalize, l2_normalize_backward, relu, sigmoid, tanh_op, NORM_EPS,
};
pub use tensor::{ParamSet, Tensor};

pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// `out += w · x` for a row-major `w` of shape `[out.len(), x.len()]`.
#[inline]
pub(crate) fn matvec_acc<T: Real>(out: &mut [T], w: &[T], x: &[T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = T::zero();
        for (a, b) in row.iter().zip(x) {
            acc += *a * *b;
        }
        *o += acc;
    }
}

/// `out += wᵀ · dy` for a row-major `w` of shape `[dy.len(), out.len()]`.
#[inline]
pub(crate) fn matvec_t_acc<T: Real>(out: &mut [T], w: &[T], dy: &[T]) {
    let cols = out.len();
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g == T::zero() {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += *g * *a;
        }
    }
}

/// `gw += dy ⊗ x`.
#[inline]
pub(crate) fn outer_acc<T: Real>(gw: &mut [T], dy: &[T], x: &[T]) {
    let cols = x.len();
    for (g, row) in dy.iter().zip(gw.chunks_exact_mut(cols)) {
        if *g == T::zero() {
            continue;
        }
        for (o, b) in row.iter_mut().zip(x) {
            *o += *g * *b;
        }
    }
}
