use crate::error::{Error, Result};

use super::{matvec_acc, matvec_t_acc, outer_acc, Real};

/// Stabilizer inside the square root of [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn tanh_op<T: Real>(x: T) -> T {
    x.tanh()
}

pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub fn dense<T: Real>(x: &[T], w: &[T], b: &[T]) -> Result<Vec<T>> {
    if x.is_empty() || w.len() != b.len() * x.len() {
        return Err(Error::ShapeMismatch(format!(
            "dense: W has {} entries, expected {}x{}",
            w.len(),
            b.len(),
            x.len()
        )));
    }
    let mut y = b.to_vec();
    matvec_acc(&mut y, w, x);
    Ok(y)
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn dense_backward<T: Real>(x: &[T], w: &[T], dy: &[T], dw: &mut [T], db: &mut [T]) -> Vec<T> {
    outer_acc(dw, dy, x);
    for (g, d) in db.iter_mut().zip(dy) {
        *g += *d;
    }
    let mut dx = vec![T::zero(); x.len()];
    matvec_t_acc(&mut dx, w, dy);
    dx
}

pub fn elementwise_max<T: Real>(rows: &[&[T]]) -> Result<Vec<T>> {
    elementwise_max_with_argmax(rows).map(|(v, _)| v)
}

/// Coordinate-wise maximum plus, per coordinate, the index of the first row
/// attaining it.
pub fn elementwise_max_with_argmax<T: Real>(rows: &[&[T]]) -> Result<(Vec<T>, Vec<usize>)> {
    let first = rows.first().ok_or(Error::EmptyInput("elementwise_max"))?;
    let mut out = first.to_vec();
    let mut arg = vec![0; out.len()];
    for (r, row) in rows.iter().enumerate().skip(1) {
        if row.len() != out.len() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise_max: row {r} has length {}, expected {}",
                row.len(),
                out.len()
            )));
        }
        for ((o, a), v) in out.iter_mut().zip(arg.iter_mut()).zip(row.iter()) {
            if *v > *o {
                *o = *v;
                *a = r;
            }
        }
    }
    Ok((out, arg))
}

/// Routes each coordinate's gradient to its argmax row.
pub fn elementwise_max_backward<T: Real>(argmax: &[usize], dy: &[T], n_rows: usize) -> Vec<Vec<T>> {
    let mut grads = vec![vec![T::zero(); dy.len()]; n_rows];
    for (k, (&r, &g)) in argmax.iter().zip(dy).enumerate() {
        grads[r][k] += g;
    }
    grads
}

/// `x / sqrt(|x|² + NORM_EPS)`; returns the normalized vector and the norm.
pub fn l2_normalize<T: Real>(x: &[T]) -> (Vec<T>, T) {
    let sq: T = x.iter().map(|v| *v * *v).sum();
    let norm = (sq + T::lit(NORM_EPS)).sqrt();
    (x.iter().map(|v| *v / norm).collect(), norm)
}

/// Gradient of [`l2_normalize`] given its output `y` and norm.
pub fn l2_normalize_backward<T: Real>(y: &[T], norm: T, dy: &[T]) -> Vec<T> {
    let dot: T = y.iter().zip(dy).map(|(a, b)| *a * *b).sum();
    y.iter()
        .zip(dy)
        .map(|(yi, gi)| (*gi - *yi * dot) / norm)
        .collect()
}
